"""Text-to-embedding extraction for the fiadd engine's wire format."""

from .encoders import EncoderError, OfflineDeterministicEncoder, TransformersEncoder, get_encoder
from .extract import ExtractError, TextRecord, extract, load_text_records

__version__ = "0.1.0"
