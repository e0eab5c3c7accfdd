"""Cohort files, fold plans and the synthetic cohort generator.

On-disk layout of a cohort directory::

    manifest.csv      patient_id, survival_time_days, event, volume_path, <clinical fields...>
    schema.json       clinical schema used by the manifest columns
    clinical.csv      patient_id + clinical fields (convenience export)
    volumes/P0000.vol raw little-endian float32 voxels, W fastest
    volumes/P0000.vol.json   {"dims": [D, H, W], "dtype": "f32le", "layout": "row-major, W fastest"}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .preprocess import ClinicalSchema, default_schema, is_missing

MANIFEST_COLUMNS = ("patient_id", "survival_time_days", "event", "volume_path")
VOLUME_DTYPE = "f32le"
VOLUME_LAYOUT = "row-major, W fastest"
DEFAULT_CENSOR_RATE = 49 / 422


class CohortError(ValueError):
    pass


class VolumeFormatError(ValueError):
    pass


# ---------------------------------------------------------------- volumes


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_volume(vol, path) -> Path:
    path = Path(path)
    v = np.asarray(vol)
    if v.ndim != 3:
        raise VolumeFormatError(f"volume must be 3-D, got shape {v.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(v, dtype="<f4").tobytes())
    header = {"dims": [int(d) for d in v.shape], "dtype": VOLUME_DTYPE, "layout": VOLUME_LAYOUT}
    _sidecar(path).write_text(json.dumps(header))
    return path


def load_volume(path) -> np.ndarray:
    path = Path(path)
    try:
        header = json.loads(_sidecar(path).read_text())
    except FileNotFoundError:
        raise VolumeFormatError(f"missing volume header {_sidecar(path)}") from None
    if header.get("dtype") != VOLUME_DTYPE:
        raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = [int(d) for d in header.get("dims", [])]
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: header dims must be three positive ints, got {dims}")
    raw = path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise VolumeFormatError(f"{path}: size mismatch, header {dims} needs {expected} bytes, blob has {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


# ---------------------------------------------------------------- cohort


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    survival_time: float
    event: int
    clinical_raw: dict
    volume_path: str

    def load_volume(self) -> np.ndarray:
        return load_volume(self.volume_path)


@dataclass
class Cohort:
    records: list
    schema: ClinicalSchema
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def by_id(self) -> dict:
        return {r.patient_id: r for r in self.records}

    def subset(self, ids: Sequence[str]) -> list:
        lookup = self.by_id()
        return [lookup[i] for i in ids]


def _parse_row(lineno, row, root, schema):
    problems = []
    pid = (row.get("patient_id") or "").strip()
    if not pid:
        problems.append(f"row {lineno}: empty patient_id")
    raw_time, raw_event = row.get("survival_time_days"), row.get("event")
    if is_missing(raw_time) and is_missing(raw_event):
        problems.append(f"row {lineno}: patient {pid!r} has neither survival time nor event status")
        return None, problems
    try:
        time = float(raw_time)
        if not math.isfinite(time) or time <= 0:
            raise ValueError
    except (TypeError, ValueError):
        problems.append(f"row {lineno}: survival_time_days must be a positive number, got {raw_time!r}")
        time = None
    event = (raw_event or "").strip()
    if event not in ("0", "1"):
        problems.append(f"row {lineno}: event must be 0 or 1, got {raw_event!r}")
    vol = (row.get("volume_path") or "").strip()
    vol_path = (root / vol) if vol and not Path(vol).is_absolute() else Path(vol)
    if not vol:
        problems.append(f"row {lineno}: empty volume_path")
    elif not vol_path.exists():
        problems.append(f"row {lineno}: missing volume file {vol_path}")
    clinical = {f.name: row.get(f.name, "") for f in schema.fields}
    for f in schema.fields:
        value = clinical[f.name]
        if is_missing(value):
            continue
        if f.kind == "categorical" and value.strip() not in f.vocabulary:
            problems.append(f"row {lineno}: unknown category {value!r} for field {f.name!r}")
        if f.kind == "numeric":
            try:
                float(value)
            except ValueError:
                problems.append(f"row {lineno}: field {f.name!r} is not numeric: {value!r}")
    if problems:
        return None, problems
    return SurvivalRecord(pid, time, int(event), clinical, str(vol_path)), []


def load_cohort(manifest_path, schema: Optional[ClinicalSchema] = None) -> Cohort:
    """Read and validate a cohort manifest; any malformed row fails the whole load."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    if schema is None:
        schema_path = root / "schema.json"
        schema = ClinicalSchema.load(schema_path) if schema_path.exists() else default_schema()
    records, problems, seen = [], [], {}
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return Cohort([], schema, root)
        absent = [c for c in MANIFEST_COLUMNS + tuple(schema.names) if c not in reader.fieldnames]
        if absent:
            raise CohortError(f"{manifest_path}: header lacks columns {absent}")
        for lineno, row in enumerate(reader, start=2):
            record, errs = _parse_row(lineno, row, root, schema)
            problems.extend(errs)
            if record is None:
                continue
            if record.patient_id in seen:
                problems.append(f"row {lineno}: duplicate patient_id {record.patient_id!r} "
                                f"(first seen on row {seen[record.patient_id]})")
                continue
            seen[record.patient_id] = lineno
            records.append(record)
    if problems:
        raise CohortError(f"{manifest_path}: rejected {len(problems)} problem(s):\n  " + "\n  ".join(problems))
    return Cohort(records, schema, root)


def write_manifest(path, records: Sequence[SurvivalRecord], schema: ClinicalSchema) -> Path:
    path = Path(path)
    root = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(MANIFEST_COLUMNS) + schema.names)
        for r in records:
            vol = Path(r.volume_path)
            try:
                vol = vol.relative_to(root)
            except ValueError:
                pass
            writer.writerow([r.patient_id, repr(float(r.survival_time)), int(r.event), vol.as_posix()]
                            + [r.clinical_raw.get(n, "") for n in schema.names])
    return path


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple  # one {"train", "validation", "test"} dict of id lists per fold

    def fold(self, i: int) -> dict:
        return self.folds[i]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "folds": [dict(f) for f in self.folds]}


def split_folds(patient_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Patient-level k-fold rotation: fold i tests chunk i, validates on chunk i+1, trains on the rest."""
    ids = list(patient_ids)
    if k < 3:
        raise ValueError("k must be at least 3 (test, validation and training chunks)")
    if len(ids) < k:
        raise ValueError(f"cohort of {len(ids)} patients is smaller than k={k}")
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = [[ids[j] for j in part] for part in np.array_split(order, k)]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        train = [pid for j, c in enumerate(chunks) if j not in (i, v) for pid in c]
        folds.append({"train": train, "validation": list(chunks[v]), "test": list(chunks[i])})
    return FoldPlan(k, seed, tuple(folds))


# ---------------------------------------------------------------- synthetic cohorts


@dataclass(frozen=True)
class SynthSpec:
    n: int = 256
    volume_shape: tuple = (8, 24, 24)
    image_weight: float = 1.0
    clinical_weight: float = 1.0
    noise_sd: float = 0.25
    censor_rate: float = DEFAULT_CENSOR_RATE
    base_time: float = 700.0
    missing_age_rate: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("synthetic cohorts need n >= 10")
        if self.image_weight < 0 or self.clinical_weight < 0:
            raise ValueError("signal weights must be non-negative")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if not 0 <= self.censor_rate < 1:
            raise ValueError(f"censor_rate must lie in [0, 1), got {self.censor_rate}")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ValueError(f"volume_shape must be three positive ints, got {self.volume_shape}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        signal = doc.pop("signal", {})
        clash = sorted(set(signal) & set(doc))
        if clash:
            raise ValueError(f"synth spec keys given both at top level and under signal: {clash}")
        doc.update(signal)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {unknown}")
        if "volume_shape" in doc:
            doc["volume_shape"] = tuple(doc["volume_shape"])
        return cls(**doc)


def tumor_volume(shape, radius: float, rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    """A soft-edged bright ellipsoid on a noisy background; the in-plane radius is ``radius`` voxels."""
    d, h, w = shape
    cz, cy, cx = (np.array(shape) - 1) / 2 + rng.uniform(-0.5, 0.5, 3) * np.array([0.1 * d, 0.1 * h, 0.1 * w])
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    rz = max(radius * d / h, 0.5)
    dist = np.sqrt(((zz - cz) / rz) ** 2 + ((yy - cy) / radius) ** 2 + ((xx - cx) / radius) ** 2)
    blob = 1.0 / (1.0 + np.exp((dist - 1.0) * 8.0))
    return (blob + noise * rng.standard_normal(shape)).astype(np.float32)


def _uniform_censor_bound(times: np.ndarray, rate: float) -> float:
    """Upper bound c of Uniform(0, c) censoring giving expected censored fraction ``rate``."""

    def frac(c):
        return float(np.mean(np.minimum(times / c, 1.0)))

    lo, hi = times.min() * 1e-6, times.max()
    while frac(hi) > rate:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) > rate:
            lo = mid
        else:
            hi = mid
    return hi


def synthesize(spec: SynthSpec) -> tuple[list[dict], list[np.ndarray]]:
    """Draw patients in memory: one dict of raw fields and latent factors per patient, plus volumes."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    d, h, w = spec.volume_shape
    u_img = rng.uniform(0, 1, n)
    age_u = rng.uniform(0, 1, n)
    t_idx = rng.integers(0, 4, n)
    u_clin = 0.5 * age_u + 0.5 * t_idx / 3
    radius = (0.12 + 0.23 * u_img) * min(h, w)

    risk = spec.image_weight * 2 * (u_img - 0.5) + spec.clinical_weight * 2 * (u_clin - 0.5)
    true_time = spec.base_time * np.exp(-risk) * np.exp(spec.noise_sd * rng.standard_normal(n))
    if spec.censor_rate > 0:
        bound = _uniform_censor_bound(true_time, spec.censor_rate)
        censor = rng.uniform(0, bound, n)
    else:
        censor = np.full(n, np.inf)
    event = (true_time <= censor).astype(int)
    observed = np.maximum(np.minimum(true_time, censor), 1e-3)

    genders = rng.integers(0, 2, n)
    n_stage = rng.integers(0, 4, n)
    m_stage = (rng.uniform(0, 1, n) < 0.1).astype(int)
    histology = rng.integers(0, 5, n)
    missing_age = rng.uniform(0, 1, n) < spec.missing_age_rate
    schema = default_schema()
    vocab = {f.name: f.vocabulary for f in schema.fields}
    overall_of_t = ("I", "II", "IIIa", "IIIb")

    rows, volumes = [], []
    for i in range(n):
        age = "" if missing_age[i] else f"{45 + 35 * age_u[i]:.1f}"
        rows.append({
            "patient_id": f"P{i:04d}",
            "survival_time_days": round(float(observed[i]), 6),
            "event": int(event[i]),
            "age": age,
            "gender": vocab["gender"][genders[i]],
            "t_stage": vocab["t_stage"][t_idx[i]],
            "n_stage": vocab["n_stage"][n_stage[i]],
            "m_stage": vocab["m_stage"][m_stage[i]],
            "overall_stage": "IV" if m_stage[i] else overall_of_t[t_idx[i]],
            "histology": vocab["histology"][histology[i]],
            "image_risk": float(u_img[i]),
            "clinical_risk": float(u_clin[i]),
            "radius": float(radius[i]),
        })
        volumes.append(tumor_volume(spec.volume_shape, radius[i], rng))
    return rows, volumes


def generate_synthetic_cohort(spec: SynthSpec, out_dir) -> Path:
    """Write a synthetic cohort directory and return the manifest path."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    schema = default_schema()
    rows, volumes = synthesize(spec)
    records = []
    for row, vol in zip(rows, volumes):
        rel = Path("volumes") / f"{row['patient_id']}.vol"
        save_volume(vol, out / rel)
        records.append(SurvivalRecord(row["patient_id"], row["survival_time_days"], row["event"],
                                      {k: row[k] for k in schema.names}, str(out / rel)))
    (out / "schema.json").write_text(schema.to_json())
    manifest = write_manifest(out / "manifest.csv", records, schema)
    with open(out / "clinical.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id"] + schema.names)
        for row in rows:
            writer.writerow([row["patient_id"]] + [row[k] for k in schema.names])
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "image_risk", "clinical_risk", "radius"])
        for row in rows:
            writer.writerow([row["patient_id"], repr(row["image_risk"]), repr(row["clinical_risk"]),
                             repr(row["radius"])])
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return manifest
