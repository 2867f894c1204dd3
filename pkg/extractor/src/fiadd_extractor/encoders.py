"""Frozen text encoders producing token-level vectors for pooling.

Two backends: a Hugging Face transformers model (weights never updated,
inference mode only) and an offline deterministic encoder for environments
without model downloads. Both expose the same interface: encode a batch of
texts into per-text pooled vectors under cls or mean pooling.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

POOLINGS = ("cls", "mean")

MAX_TOKENS = 128


class EncoderError(RuntimeError):
    """Encoder could not be loaded or used."""


class OfflineDeterministicEncoder:
    """Hash-seeded stand-in encoder with a configurable hidden size.

    Each whitespace token gets a fixed pseudo-random vector seeded by its
    SHA-256 digest; the cls vector is seeded by the digest of the full
    text. Deterministic across runs and platforms, no model files needed.
    """

    def __init__(self, hidden_size: int = 768):
        if hidden_size < 1:
            raise EncoderError(f"hidden size must be positive, got {hidden_size}")
        self.hidden_size = hidden_size
        self.name = f"offline-{hidden_size}"

    @staticmethod
    def _seed(text: str) -> np.random.Generator:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return np.random.default_rng(list(digest[:16]))

    def _token_vectors(self, text: str) -> np.ndarray:
        tokens = re.findall(r"\S+", text.lower())[: MAX_TOKENS - 2]
        rows = [self._seed("cls::" + text.lower()).standard_normal(self.hidden_size)]
        rows += [self._seed("tok::" + t).standard_normal(self.hidden_size) for t in tokens]
        return np.stack(rows)

    def encode(self, texts: list[str], pooling: str) -> np.ndarray:
        out = np.empty((len(texts), self.hidden_size))
        for i, text in enumerate(texts):
            vectors = self._token_vectors(text)
            out[i] = vectors[0] if pooling == "cls" else vectors.mean(axis=0)
        return out


class TransformersEncoder:
    """Frozen pretrained encoder via transformers; cls pooling takes the
    first position of the final layer, mean pooling averages over the
    attention mask. Sequences truncate at 128 tokens."""

    def __init__(self, model_name: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise EncoderError(f"transformers backend unavailable: {exc}") from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
            self.model = AutoModel.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderError(f"cannot load encoder '{model_name}': {exc}") from exc
        self.model.eval()
        for param in self.model.parameters():
            param.requires_grad_(False)
        self._torch = torch
        self.hidden_size = int(self.model.config.hidden_size)
        self.name = model_name

    def encode(self, texts: list[str], pooling: str) -> np.ndarray:
        torch = self._torch
        enc = self.tokenizer(texts, padding=True, truncation=True,
                             max_length=MAX_TOKENS, return_tensors="pt")
        with torch.no_grad():
            hidden = self.model(**enc).last_hidden_state
        if pooling == "cls":
            pooled = hidden[:, 0, :]
        else:
            mask = enc["attention_mask"].unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1.0)
        return pooled.cpu().numpy().astype(np.float64)


def get_encoder(name: str):
    """offline[-<dim>] maps to the deterministic backend; anything else is
    treated as a transformers model name."""
    if name == "offline":
        return OfflineDeterministicEncoder()
    if name.startswith("offline-"):
        try:
            return OfflineDeterministicEncoder(int(name.split("-", 1)[1]))
        except ValueError as exc:
            raise EncoderError(f"bad offline encoder spec '{name}'") from exc
    return TransformersEncoder(name)
