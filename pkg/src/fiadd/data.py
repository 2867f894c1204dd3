"""Embedding dataset wire format: load, dump, validate, split, synthesize.

Datasets are line-delimited JSON: a header record declaring ``d_in``,
``class_names`` and ``implicit_labels``, followed by one record per sample
with ``id``, ``label``, ``vector`` and an optional ``implied_vector``. All
randomness goes through numpy's PCG64 generator so a seed means the same
dataset on every platform.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or invalid dataset contents."""


@dataclass
class EmbeddedSample:
    """One text's frozen embedding, its label, and optional implied embedding."""

    id: str
    label: int
    vector: np.ndarray
    implied_vector: np.ndarray | None = None


@dataclass
class Dataset:
    samples: list[EmbeddedSample]
    d_in: int
    class_names: list[str]
    implicit_labels: set[int]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def vectors(self) -> np.ndarray:
        return np.stack([s.vector for s in self.samples]) if self.samples else np.zeros((0, self.d_in))

    def by_label(self) -> dict[int, list[int]]:
        """Sample indices grouped by label, in record order."""
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            groups.setdefault(s.label, []).append(i)
        return groups

    def dump(self, path: str | Path) -> None:
        dump_dataset(self, path)


def _as_vector(values, d_in: int, where: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != d_in:
        raise DatasetError(f"dimension mismatch at {where}: expected {d_in}, got {vec.shape}")
    return vec


def load_dataset(path: str | Path, expected_dim: int | None = None) -> Dataset:
    """Read a line-delimited embedding dump.

    Raises DatasetError naming the offending line for malformed records,
    dimension mismatches, duplicate ids, or implied vectors on labels
    outside the declared implicit set.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    records = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not records:
        raise DatasetError("empty dataset")

    header_no, header_line = records[0]
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed header at line {header_no}: {exc}") from exc
    for key in ("d_in", "class_names", "implicit_labels"):
        if key not in header:
            raise DatasetError(f"header at line {header_no} missing '{key}'")
    d_in = int(header["d_in"])
    class_names = [str(c) for c in header["class_names"]]
    implicit_labels = {int(c) for c in header["implicit_labels"]}
    if d_in <= 0:
        raise DatasetError(f"header at line {header_no}: d_in must be positive")
    if expected_dim is not None and d_in != expected_dim:
        raise DatasetError(f"dimension mismatch at line {header_no}: header d_in={d_in}, expected {expected_dim}")

    samples: list[EmbeddedSample] = []
    seen: set[str] = set()
    for line_no, line in records[1:]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed line {line_no}: {exc}") from exc
        if not isinstance(rec, dict) or "id" not in rec or "label" not in rec or "vector" not in rec:
            raise DatasetError(f"malformed line {line_no}: record needs id, label, vector")
        sid = str(rec["id"])
        label = int(rec["label"])
        if sid in seen:
            raise DatasetError(f"duplicate id '{sid}' at line {line_no}")
        seen.add(sid)
        if not 0 <= label < len(class_names):
            raise DatasetError(f"label {label} out of range at line {line_no}")
        vec = _as_vector(rec["vector"], d_in, f"line {line_no}")
        implied = None
        if rec.get("implied_vector") is not None:
            if label not in implicit_labels:
                raise DatasetError(f"implied vector on non-implicit label at line {line_no} (id '{sid}')")
            implied = _as_vector(rec["implied_vector"], d_in, f"line {line_no} (implied)")
        samples.append(EmbeddedSample(sid, label, vec, implied))

    if not samples:
        raise DatasetError("empty dataset")
    return Dataset(samples, d_in, class_names, implicit_labels)


def dump_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the wire format; floats round-trip bit-exactly through repr."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as out:
        header = {
            "d_in": ds.d_in,
            "class_names": ds.class_names,
            "implicit_labels": sorted(ds.implicit_labels),
        }
        out.write(json.dumps(header, separators=(",", ":")) + "\n")
        for s in ds.samples:
            rec: dict = {"id": s.id, "label": s.label, "vector": s.vector.tolist()}
            if s.implied_vector is not None:
                rec["implied_vector"] = s.implied_vector.tolist()
            out.write(json.dumps(rec, separators=(",", ":")) + "\n")


def validate(ds: Dataset) -> list[str]:
    """List every dataset invariant violation; empty list iff the dataset is valid."""
    report: list[str] = []
    seen: set[str] = set()
    for s in ds.samples:
        if s.id in seen:
            report.append(f"duplicate id '{s.id}'")
        seen.add(s.id)
        if not 0 <= s.label < ds.n_classes:
            report.append(f"label {s.label} out of range for id '{s.id}'")
        if s.vector.shape != (ds.d_in,):
            report.append(f"vector of id '{s.id}' has length {s.vector.shape[0]}, expected {ds.d_in}")
        if s.implied_vector is not None:
            if s.label not in ds.implicit_labels:
                report.append(f"implied vector on non-implicit label for id '{s.id}'")
            if s.implied_vector.shape != (ds.d_in,):
                report.append(f"implied vector of id '{s.id}' has length {s.implied_vector.shape[0]}, expected {ds.d_in}")
    return report


@dataclass
class SplitPair:
    train: Dataset
    test: Dataset
    seed: int
    ratio: float


def split(ds: Dataset, ratio: float, seed: int) -> SplitPair:
    """Deterministic stratified train/test split.

    Each class's train share lands within one sample of ratio * N_c and the
    overall train size equals round(ratio * N). Classes with fewer than two
    samples go wholly to train with a warning.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    n = len(ds.samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")

    rng = np.random.default_rng(seed)
    groups = ds.by_label()
    tiny = {lab: idx for lab, idx in groups.items() if len(idx) < 2}
    for lab in sorted(tiny):
        warnings.warn(f"class {lab} has fewer than 2 samples; placed wholly in train", stacklevel=2)
    eligible = sorted(lab for lab in groups if lab not in tiny)

    quota = round(ratio * n) - sum(len(groups[lab]) for lab in tiny)
    base = {lab: math.floor(ratio * len(groups[lab])) for lab in eligible}
    frac = {lab: ratio * len(groups[lab]) - base[lab] for lab in eligible}
    extras = quota - sum(base.values())
    if extras > 0:
        for lab in sorted(eligible, key=lambda c: (-frac[c], c)):
            if extras == 0:
                break
            if base[lab] < len(groups[lab]):
                base[lab] += 1
                extras -= 1
    elif extras < 0:
        for lab in sorted(eligible, key=lambda c: (frac[c], c)):
            if extras == 0:
                break
            if base[lab] > 0:
                base[lab] -= 1
                extras += 1

    train_idx: list[int] = []
    test_idx: list[int] = []
    for lab in sorted(groups):
        idx = groups[lab]
        if lab in tiny:
            train_idx.extend(idx)
            continue
        order = rng.permutation(len(idx))
        chosen = [idx[j] for j in order[: base[lab]]]
        rest = [idx[j] for j in order[base[lab]:]]
        train_idx.extend(chosen)
        test_idx.extend(rest)

    train_idx.sort()
    test_idx.sort()
    mk = lambda ix: Dataset([ds.samples[i] for i in ix], ds.d_in, list(ds.class_names), set(ds.implicit_labels))
    return SplitPair(mk(train_idx), mk(test_idx), seed, ratio)


@dataclass
class ClassSpec:
    """Gaussian spec for one class; cov may be scalar, diagonal, or full."""

    count: int
    mean: np.ndarray
    cov: np.ndarray
    implied_mean: np.ndarray | None = None
    implied_cov: np.ndarray | None = None


@dataclass
class SyntheticSpec:
    d_in: int
    class_names: list[str]
    implicit_labels: set[int]
    classes: list[ClassSpec]

    @staticmethod
    def default() -> "SyntheticSpec":
        """Desk-scale three-class geometry: the implicit cluster overlaps
        non-hate while its implied cluster sits near the explicit one."""
        eye = np.eye(2)
        return SyntheticSpec(
            d_in=2,
            class_names=["non-hate", "explicit", "implicit"],
            implicit_labels={2},
            classes=[
                ClassSpec(50, np.array([0.0, 0.0]), eye.copy()),
                ClassSpec(50, np.array([8.0, 0.0]), eye.copy()),
                ClassSpec(50, np.array([2.0, 0.0]), eye.copy(),
                          implied_mean=np.array([7.0, 1.0]), implied_cov=eye.copy()),
            ],
        )


def _chol_factor(cov: np.ndarray, d_in: int, where: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = np.full(d_in, float(cov))
    if cov.ndim == 1:
        if cov.shape[0] != d_in:
            raise DatasetError(f"{where}: diagonal covariance length {cov.shape[0]} != d_in {d_in}")
        if np.any(cov < 0):
            raise DatasetError(f"{where}: covariance not positive semi-definite")
        return np.diag(np.sqrt(cov))
    if cov.shape != (d_in, d_in):
        raise DatasetError(f"{where}: covariance shape {cov.shape} != ({d_in}, {d_in})")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DatasetError(f"{where}: covariance not positive semi-definite") from exc


def generate_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Sample a labeled Gaussian-mixture dataset, reproducibly.

    Draws are mean + L z with L the Cholesky factor and z standard normal
    from PCG64, so a fixed seed gives a byte-identical dump everywhere.
    """
    if len(spec.classes) != len(spec.class_names):
        raise DatasetError("one ClassSpec required per class name")
    rng = np.random.default_rng(seed)
    samples: list[EmbeddedSample] = []
    for label, cs in enumerate(spec.classes):
        if cs.count <= 0:
            raise DatasetError(f"class {label}: count must be positive")
        mean = _as_vector(cs.mean, spec.d_in, f"class {label} mean")
        fac = _chol_factor(cs.cov, spec.d_in, f"class {label}")
        pts = mean + rng.standard_normal((cs.count, spec.d_in)) @ fac.T
        implied_pts = None
        if cs.implied_mean is not None:
            if label not in spec.implicit_labels:
                raise DatasetError(f"class {label}: implied mean on non-implicit class")
            imean = _as_vector(cs.implied_mean, spec.d_in, f"class {label} implied mean")
            icov = cs.implied_cov if cs.implied_cov is not None else cs.cov
            ifac = _chol_factor(icov, spec.d_in, f"class {label} (implied)")
            implied_pts = imean + rng.standard_normal((cs.count, spec.d_in)) @ ifac.T
        for i in range(cs.count):
            samples.append(EmbeddedSample(
                id=f"c{label}-{i:04d}",
                label=label,
                vector=pts[i],
                implied_vector=None if implied_pts is None else implied_pts[i],
            ))
    return Dataset(samples, spec.d_in, list(spec.class_names), set(spec.implicit_labels))
