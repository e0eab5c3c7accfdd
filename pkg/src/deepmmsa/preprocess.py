"""Clinical encoding, scaling, imputation and volume preparation.

All fitted statistics are explicit objects computed from the training subset
and passed in when transforming other subsets, so a held-out fold can never
leak into them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

MISSING = ""
SCHEMA_VERSION = 1


def is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, str):
        return value.strip() in (MISSING, "NA", "nan")
    return isinstance(value, float) and math.isnan(value)


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str  # "numeric" | "categorical"
    vocabulary: tuple = ()
    normalization: str = "minmax"  # numeric only: "minmax" | "standard"

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"field {self.name!r}: kind must be numeric or categorical")
        if self.kind == "categorical" and not self.vocabulary:
            raise ValueError(f"field {self.name!r}: categorical field needs a vocabulary")
        if self.kind == "numeric" and self.normalization not in ("minmax", "standard"):
            raise ValueError(f"field {self.name!r}: unknown normalization {self.normalization!r}")

    @property
    def width(self) -> int:
        return 1 if self.kind == "numeric" else len(self.vocabulary)


@dataclass(frozen=True)
class ClinicalSchema:
    fields: tuple
    version: int = SCHEMA_VERSION

    @property
    def width(self) -> int:
        return sum(f.width for f in self.fields)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    def to_json(self) -> str:
        doc = {"version": self.version, "fields": [
            {"name": f.name, "kind": f.kind,
             **({"vocabulary": list(f.vocabulary)} if f.kind == "categorical" else {"normalization": f.normalization})}
            for f in self.fields]}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClinicalSchema":
        doc = json.loads(text)
        if doc.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported clinical schema version {doc.get('version')!r}")
        fields = tuple(FieldSpec(d["name"], d["kind"], tuple(d.get("vocabulary", ())),
                                 d.get("normalization", "minmax")) for d in doc["fields"])
        return cls(fields, doc["version"])

    @classmethod
    def load(cls, path) -> "ClinicalSchema":
        return cls.from_json(Path(path).read_text())


def default_schema() -> ClinicalSchema:
    """The shipped 27-wide schema (1 numeric + 26 one-hot columns)."""
    return ClinicalSchema((
        FieldSpec("age", "numeric", normalization="minmax"),
        FieldSpec("gender", "categorical", ("male", "female")),
        FieldSpec("t_stage", "categorical", ("T1", "T2", "T3", "T4", "Tx")),
        FieldSpec("n_stage", "categorical", ("N0", "N1", "N2", "N3", "Nx")),
        FieldSpec("m_stage", "categorical", ("M0", "M1", "Mx")),
        FieldSpec("overall_stage", "categorical", ("I", "II", "IIIa", "IIIb", "IV", "unknown")),
        FieldSpec("histology", "categorical",
                  ("adenocarcinoma", "squamous cell carcinoma", "large cell", "nos", "other")),
    ))


# ---------------------------------------------------------------- scalar scaling


@dataclass(frozen=True)
class NormalizationStats:
    min: float
    max: float
    mean: float
    std: float

    @classmethod
    def fit(cls, values) -> "NormalizationStats":
        v = np.asarray([x for x in values if not is_missing(x)], dtype=np.float64)
        if v.size == 0:
            raise ValueError("cannot fit normalization statistics on an empty column")
        return cls(float(v.min()), float(v.max()), float(v.mean()), float(v.std()))

    def check(self, method: str = "minmax") -> None:
        if method == "minmax" and not self.max > self.min:
            raise ValueError(f"degenerate range: max ({self.max}) must exceed min ({self.min})")
        if method == "standard" and not self.std > 0:
            raise ValueError("degenerate column: standard deviation is zero")


def minmax_scale(x, stats: NormalizationStats):
    """``(x - min) / (max - min)`` clamped to [0, 1]."""
    stats.check("minmax")
    out = (np.asarray(x, dtype=np.float64) - stats.min) / (stats.max - stats.min)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def minmax_inverse(x, stats: NormalizationStats):
    stats.check("minmax")
    out = stats.min + np.asarray(x, dtype=np.float64) * (stats.max - stats.min)
    return float(out) if out.ndim == 0 else out


def standard_score(x, stats: NormalizationStats):
    stats.check("standard")
    out = (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- clinical fields


def one_hot(value, vocabulary: Sequence[str], field_name: str = "field") -> np.ndarray:
    """Unit vector at the vocabulary index of ``value``; all zeros when missing."""
    vec = np.zeros(len(vocabulary))
    if is_missing(value):
        return vec
    try:
        vec[list(vocabulary).index(str(value).strip())] = 1.0
    except ValueError:
        raise ValueError(f"unknown category {value!r} for field {field_name!r}; "
                         f"expected one of {list(vocabulary)}") from None
    return vec


def impute_mean(column: Sequence, training_column: Sequence) -> list[float]:
    """Replace missing entries of ``column`` with the mean of ``training_column``."""
    present = [float(v) for v in training_column if not is_missing(v)]
    if not present:
        raise ValueError("training column has no present values to impute from")
    fill = float(np.mean(present))
    return [fill if is_missing(v) else float(v) for v in column]


@dataclass
class ClinicalEncoder:
    """Maps raw clinical field dicts to the encoded vector using training-subset statistics."""

    schema: ClinicalSchema
    stats: dict = field(default_factory=dict)
    fill: dict = field(default_factory=dict)

    def fit(self, train_rows: Sequence[Mapping]) -> "ClinicalEncoder":
        for f in self.schema.fields:
            if f.kind != "numeric":
                continue
            col = [row.get(f.name) for row in train_rows]
            imputed = impute_mean(col, col)
            self.fill[f.name] = float(np.mean([float(v) for v in col if not is_missing(v)]))
            stats = NormalizationStats.fit(imputed)
            stats.check(f.normalization)
            self.stats[f.name] = stats
        return self

    def transform(self, rows: Sequence[Mapping]) -> np.ndarray:
        if any(f.kind == "numeric" and f.name not in self.stats for f in self.schema.fields):
            raise RuntimeError("encoder is not fitted")
        out = np.zeros((len(rows), self.schema.width))
        for i, row in enumerate(rows):
            parts = []
            for f in self.schema.fields:
                raw = row.get(f.name)
                if f.kind == "numeric":
                    v = self.fill[f.name] if is_missing(raw) else float(raw)
                    scale = minmax_scale if f.normalization == "minmax" else standard_score
                    parts.append([scale(v, self.stats[f.name])])
                else:
                    parts.append(one_hot(raw, f.vocabulary, f.name))
            out[i] = np.concatenate(parts)
        return out


# ---------------------------------------------------------------- volumes


def _check_volume(vol) -> np.ndarray:
    v = np.asarray(vol)
    if v.ndim != 3:
        raise ValueError(f"volume must be 3-D (depth, height, width), got shape {v.shape}")
    if v.size == 0:
        raise ValueError("empty volume")
    return v


def _interp_axis(v: np.ndarray, axis: int, size: int) -> np.ndarray:
    src = v.shape[axis]
    if size == src:
        return v
    pos = np.zeros(size) if size == 1 else np.arange(size) * ((src - 1) / (size - 1))
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    shape = [1] * v.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(v, lo, axis=axis) * (1 - frac) + np.take(v, hi, axis=axis) * frac


def resize_volume(vol, target: Sequence[int]) -> np.ndarray:
    """Corner-aligned trilinear resize to ``target`` (depth, height, width)."""
    v = _check_volume(vol).astype(np.float64)
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target shape must be three positive ints, got {target}")
    for axis, size in enumerate(target):
        v = _interp_axis(v, axis, size)
    return v.astype(np.float32)


def intensity_normalize(vol) -> np.ndarray:
    """Per-volume min-max into [0, 1]; a constant volume maps to zeros."""
    v = _check_volume(vol).astype(np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros(v.shape, dtype=np.float32)
    return ((v - lo) / (hi - lo)).astype(np.float32)


def augment_x8(vol) -> list[np.ndarray]:
    """The eight in-plane symmetries of a square-slice volume.

    Order: rotations by 0, 90, 180, 270 degrees in the height-width plane, then
    the same four followed by a reflection of the width axis.
    """
    v = _check_volume(vol)
    if v.shape[1] != v.shape[2]:
        raise ValueError(f"augment_x8 needs square slices (H == W), got {v.shape[1]}x{v.shape[2]}")
    rotations = [np.rot90(v, k, axes=(1, 2)) for k in range(4)]
    return [np.ascontiguousarray(r) for r in rotations] + \
        [np.ascontiguousarray(r[:, :, ::-1]) for r in rotations]


def prepare_volume(vol, target: Optional[Sequence[int]] = None) -> np.ndarray:
    """Resize (when a target is given) then normalize intensities into [0, 1]."""
    v = _check_volume(vol)
    if target is not None and tuple(v.shape) != tuple(target):
        v = resize_volume(v, target)
    return intensity_normalize(v)
