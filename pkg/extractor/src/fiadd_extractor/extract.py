"""Text-record ingestion and conversion to the embedding wire format.

Input is line-delimited JSON records {"id", "text", "label",
"implied_text"?}; output is the engine's embedding dump: a header line
with d_in, class_names and implicit_labels followed by one record per
input with the pooled vector (and the pooled implied vector where an
implied text exists). Record order and ids are preserved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import POOLINGS, get_encoder


class ExtractError(ValueError):
    """Malformed input records or invalid extraction request."""


@dataclass
class TextRecord:
    id: str
    text: str
    label: int
    implied_text: str | None = None


def load_text_records(path: str | Path) -> list[TextRecord]:
    path = Path(path)
    records: list[TextRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExtractError(f"malformed line {line_no}: {exc}") from exc
        for key in ("id", "text", "label"):
            if key not in rec:
                raise ExtractError(f"line {line_no} is missing '{key}'")
        sid = str(rec["id"])
        if sid in seen:
            raise ExtractError(f"duplicate id '{sid}' at line {line_no}")
        seen.add(sid)
        text = str(rec["text"])
        if not text.strip():
            raise ExtractError(f"empty text for id '{sid}' (line {line_no})")
        implied = rec.get("implied_text")
        if implied is not None and not str(implied).strip():
            raise ExtractError(f"empty implied text for id '{sid}' (line {line_no})")
        records.append(TextRecord(sid, text, int(rec["label"]),
                                  None if implied is None else str(implied)))
    if not records:
        raise ExtractError("no text records found")
    return records


def _batched(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def extract(
    input_path: str | Path,
    output_path: str | Path,
    encoder_name: str = "bert-base-uncased",
    pooling: str = "cls",
    class_names: list[str] | None = None,
    implicit_labels: set[int] | None = None,
    batch_size: int = 16,
) -> int:
    """Encode every record and write the embedding dump; returns the count.

    The taxonomy defaults to generic names spanning the observed labels,
    with the implicit set inferred from which labels carry implied texts.
    """
    if pooling not in POOLINGS:
        raise ExtractError(f"pooling must be one of {POOLINGS}, got '{pooling}'")
    records = load_text_records(input_path)

    n_classes = max(r.label for r in records) + 1
    if class_names is None:
        class_names = [f"class{c}" for c in range(n_classes)]
    if len(class_names) < n_classes:
        raise ExtractError(f"{len(class_names)} class names for labels up to {n_classes - 1}")
    if implicit_labels is None:
        implicit_labels = {r.label for r in records if r.implied_text is not None}
    for r in records:
        if r.implied_text is not None and r.label not in implicit_labels:
            raise ExtractError(f"implied text on non-implicit label {r.label} (id '{r.id}')")

    encoder = get_encoder(encoder_name)
    vectors = np.empty((len(records), encoder.hidden_size))
    for start, batch in zip(range(0, len(records), batch_size),
                            _batched(records, batch_size)):
        vectors[start:start + len(batch)] = encoder.encode([r.text for r in batch], pooling)

    implied_rows = [i for i, r in enumerate(records) if r.implied_text is not None]
    implied_vectors: dict[int, np.ndarray] = {}
    for batch in _batched(implied_rows, batch_size):
        encoded = encoder.encode([records[i].implied_text for i in batch], pooling)
        for j, i in enumerate(batch):
            implied_vectors[i] = encoded[j]

    output_path = Path(output_path)
    with output_path.open("w", encoding="utf-8") as out:
        header = {
            "d_in": encoder.hidden_size,
            "class_names": list(class_names),
            "implicit_labels": sorted(implicit_labels),
        }
        out.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i, rec in enumerate(records):
            row: dict = {"id": rec.id, "label": rec.label, "vector": vectors[i].tolist()}
            if i in implied_vectors:
                row["implied_vector"] = implied_vectors[i].tolist()
            out.write(json.dumps(row, separators=(",", ":")) + "\n")
    return len(records)
