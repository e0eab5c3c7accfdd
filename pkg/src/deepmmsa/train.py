"""Training protocol, fold evaluation, cross-validation and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Cohort, FoldPlan, split_folds
from .metrics import c_index, mae_uncensored
from .model import DeepMMSA, ModelConfig
from .preprocess import ClinicalEncoder, NormalizationStats, augment_x8, minmax_scale, prepare_volume

log = logging.getLogger(__name__)

FULL_VOLUME_SHAPE = (8, 96, 96)
DESK_VOLUME_SHAPE = (8, 24, 24)
DESK_BASE_CHANNELS = 8


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr0: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 40
    seed: int = 0
    augment_train_only: bool = True
    volume_shape: tuple = FULL_VOLUME_SHAPE
    k_folds: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr0 >= 0:
            raise ValueError("lr0 must be non-negative")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Shrunken profile that trains in minutes on one CPU core."""
        base = dict(epochs=50, batch_size=16, volume_shape=DESK_VOLUME_SHAPE)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume_shape"] = list(self.volume_shape)
        return d


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: the rate is multiplied by the decay factor every ``lr_decay_every`` epochs."""
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def derive_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


# ---------------------------------------------------------------- fold data


@dataclass
class Split:
    ids: list
    volumes: Optional[np.ndarray]  # [n, D, H, W]
    clinical: np.ndarray  # [n, width]
    labels: np.ndarray  # survival time scaled into [0, 1] with training statistics
    events: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def uncensored(self) -> "Split":
        keep = self.events == 1
        return Split([i for i, k in zip(self.ids, keep) if k],
                     None if self.volumes is None else self.volumes[keep],
                     self.clinical[keep], self.labels[keep], self.events[keep])


@dataclass
class FoldData:
    fold: int
    train: Split
    validation: Split
    test: Split
    label_stats: NormalizationStats
    encoder: ClinicalEncoder


def load_volumes(cohort: Cohort, volume_shape) -> dict:
    """Resize and intensity-normalize every patient's volume once."""
    return {r.patient_id: prepare_volume(r.load_volume(), volume_shape) for r in cohort}


def prepare_fold(cohort: Cohort, plan: FoldPlan, fold: int, volume_shape=DESK_VOLUME_SHAPE,
                 volumes: Optional[dict] = None, with_volumes: bool = True) -> FoldData:
    """Fit label scaling and clinical encoding on the training ids, then apply them to every split."""
    assignment = plan.fold(fold)
    train_recs = cohort.subset(assignment["train"])
    encoder = ClinicalEncoder(cohort.schema).fit([r.clinical_raw for r in train_recs])
    label_stats = NormalizationStats.fit([r.survival_time for r in train_recs])
    if with_volumes and volumes is None:
        volumes = {r.patient_id: prepare_volume(r.load_volume(), volume_shape)
                   for name in ("train", "validation", "test") for r in cohort.subset(assignment[name])}

    def build(ids):
        recs = cohort.subset(ids)
        vols = np.stack([volumes[i] for i in ids]).astype(np.float32) if with_volumes and ids else None
        return Split(list(ids), vols, encoder.transform([r.clinical_raw for r in recs]),
                     np.asarray(minmax_scale([r.survival_time for r in recs], label_stats), dtype=np.float64).reshape(-1),
                     np.array([r.event for r in recs], dtype=np.int64))

    return FoldData(fold, build(assignment["train"]), build(assignment["validation"]),
                    build(assignment["test"]), label_stats, encoder)


def augment_split(split: Split) -> Split:
    """Expand every sample into its eight in-plane symmetries (clinical rows and labels repeated)."""
    if split.volumes is None:
        return split
    vols = np.stack([v for vol in split.volumes for v in augment_x8(vol)])
    rep = lambda a: np.repeat(a, 8, axis=0)
    ids = [f"{i}#{k}" for i in split.ids for k in range(8)]
    return Split(ids, vols, rep(split.clinical), rep(split.labels), rep(split.events))


# ---------------------------------------------------------------- training


@dataclass
class RunReport:
    fold: int
    config: dict
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    test_loss: Optional[float] = None
    c_index: Optional[float] = None
    mae: Optional[float] = None
    censored_loss_terms: int = 0
    loss_terms: int = 0
    dropped_batches: int = 0
    wall_clock: float = 0.0

    @property
    def loss_curve(self) -> list[dict]:
        return [{"epoch": i, "train_loss": t, "val_loss": v}
                for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))]

    def to_dict(self) -> dict:
        return {"fold": self.fold, "c_index": self.c_index, "mae": self.mae, "loss_curve": self.loss_curve,
                "config": self.config, "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
                "test_loss": self.test_loss, "lr": self.lr, "censored_loss_terms": self.censored_loss_terms,
                "loss_terms": self.loss_terms, "dropped_batches": self.dropped_batches,
                "wall_clock": self.wall_clock}

    def write(self, out_dir, stem: Optional[str] = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"fold{self.fold}"
        (out / f"{stem}_report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / f"{stem}_loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for row in self.loss_curve:
                writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def _inputs(model: DeepMMSA, split: Split, idx=None):
    cfg = model.config
    vol = cli = None
    if cfg.use_image:
        v = split.volumes if idx is None else split.volumes[idx]
        vol = ad.Tensor(v[:, None])
    if cfg.use_clinical:
        cli = ad.Tensor(split.clinical if idx is None else split.clinical[idx])
    return vol, cli


def predict(model: DeepMMSA, split: Split, batch_size: int = 64) -> np.ndarray:
    """Eval-mode predictions, one per sample, on the normalized label scale."""
    was_training = model.training
    model.eval()
    try:
        out = []
        for start in range(0, len(split), batch_size):
            idx = np.arange(start, min(start + batch_size, len(split)))
            out.append(model(*_inputs(model, split, idx)).data.astype(np.float64))
        return np.concatenate(out) if out else np.zeros(0)
    finally:
        model.train(was_training)


def objective_value(model: DeepMMSA, split: Split) -> float:
    """Training objective (MSE + L2) in eval mode over the given samples."""
    pred = predict(model, split)
    mse = float(np.mean((pred - split.labels) ** 2))
    lam = model.config.lam
    penalty = lam * sum(float((p.data.astype(np.float64) ** 2).sum()) for p in model.penalized_parameters())
    return mse + penalty


def train_fold(model: DeepMMSA, data: FoldData, config: TrainConfig,
               on_epoch: Optional[Callable[[int, float, float], None]] = None) -> tuple[DeepMMSA, RunReport]:
    """Minimize MSE + L2 over uncensored training samples; keep the best-validation epoch."""
    started = time.perf_counter()
    report = RunReport(fold=data.fold, config={"model": model.config.to_dict(), "train": config.to_dict()})
    train = data.train.uncensored()
    if len(train) == 0:
        raise TrainingError("training subset has no uncensored patients")
    if model.config.use_image:
        train = augment_split(train)
    val = data.validation.uncensored()

    params = model.parameters()
    penalized = model.penalized_parameters()
    state = ad.AdamState(lr=lr_at(0, config))
    n = len(train)
    model.train()
    best_state = model.state_dict()

    for epoch in range(config.epochs):
        state.lr = lr_at(epoch, config)
        report.lr.append(state.lr)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        if len(batches[-1]) < 2:
            report.dropped_batches += 1
            log.info("epoch %d: dropping trailing batch of size 1", epoch)
            batches = batches[:-1]
        if not batches:
            raise TrainingError("no batch of at least 2 samples could be formed")
        total, count = 0.0, 0
        for idx in batches:
            report.censored_loss_terms += int(np.count_nonzero(train.events[idx] == 0))
            report.loss_terms += len(idx)
            model.zero_grad()
            pred = model(*_inputs(model, train, idx))
            loss = ad.mse_l2_objective(pred, train.labels[idx], penalized, model.config.lam)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, f"non-finite training loss {value}")
            ad.backward(loss, params)
            ad.adam_step(params, state)
            total += value * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = objective_value(model, val) if len(val) else train_loss
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, f"non-finite validation loss {val_loss}")
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = model.state_dict()
        log.info("fold %d epoch %d lr %.2e train %.5f val %.5f", data.fold, epoch, state.lr, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)

    model.load_state_dict(best_state)
    report.wall_clock = time.perf_counter() - started
    return model, report


def evaluate_fold(model: DeepMMSA, split: Split) -> dict:
    """C-index over every test patient, MAE over the uncensored ones, one prediction each."""
    pred = predict(model, split)
    result = {"c_index": c_index(pred, split.labels, split.events),
              "mae": mae_uncensored(pred, split.labels, split.events)}
    unc = split.events == 1
    result["loss"] = float(np.mean((pred[unc] - split.labels[unc]) ** 2))
    return result


def preprocessing_meta(data: FoldData, volume_shape) -> dict:
    """Training-fold statistics a checkpoint needs to score new patients consistently."""
    enc = data.encoder
    return {"fold": data.fold, "volume_shape": list(volume_shape),
            "label_stats": asdict(data.label_stats),
            "encoder": {"stats": {k: asdict(v) for k, v in enc.stats.items()}, "fill": dict(enc.fill),
                        "schema": json.loads(enc.schema.to_json())}}


def encoder_from_meta(meta: dict) -> tuple[ClinicalEncoder, NormalizationStats]:
    from .preprocess import ClinicalSchema
    enc_doc = meta["encoder"]
    encoder = ClinicalEncoder(ClinicalSchema.from_json(json.dumps(enc_doc["schema"])),
                              {k: NormalizationStats(**v) for k, v in enc_doc["stats"].items()},
                              dict(enc_doc["fill"]))
    return encoder, NormalizationStats(**meta["label_stats"])


def run_fold(cohort: Cohort, plan: FoldPlan, fold: int, model_config: ModelConfig, train_config: TrainConfig,
             volumes: Optional[dict] = None, out_dir=None) -> tuple[DeepMMSA, RunReport]:
    """Prepare, train and test one fold; fold-level seeds derive from the master seed."""
    from .model import save_model
    data = prepare_fold(cohort, plan, fold, train_config.volume_shape, volumes,
                        with_volumes=model_config.use_image)
    model = DeepMMSA(model_config, seed=derive_seed(train_config.seed, fold, 1))
    fold_cfg = replace(train_config, seed=derive_seed(train_config.seed, fold, 2))
    model, report = train_fold(model, data, fold_cfg)
    metrics = evaluate_fold(model, data.test)
    report.c_index, report.mae, report.test_loss = metrics["c_index"], metrics["mae"], metrics["loss"]
    report.config["train"]["seed"] = train_config.seed
    if out_dir is not None:
        report.write(out_dir)
        meta = preprocessing_meta(data, train_config.volume_shape)
        meta["plan"] = {"k": plan.k, "seed": plan.seed}
        save_model(model, Path(out_dir) / f"fold{fold}.json", meta)
    return model, report


def _run_fold_job(args):
    cohort, plan, fold, model_config, train_config, out_dir = args
    logging.basicConfig(level=logging.WARNING)
    return run_fold(cohort, plan, fold, model_config, train_config, out_dir=out_dir)[1]


def run_folds(cohort: Cohort, plan: FoldPlan, folds: Sequence[int], model_config: ModelConfig,
              train_config: TrainConfig, jobs: int = 1, volumes: Optional[dict] = None,
              out_dir=None) -> list[RunReport]:
    """Run folds sequentially, or in ``jobs`` worker processes (results returned in fold order)."""
    folds = list(folds)
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_fold_job,
                                 [(cohort, plan, f, model_config, train_config, out_dir) for f in folds]))
    if volumes is None and model_config.use_image:
        volumes = load_volumes(cohort, train_config.volume_shape)
    return [run_fold(cohort, plan, f, model_config, train_config, volumes, out_dir)[1] for f in folds]


def aggregate(reports: Sequence[RunReport]) -> dict:
    """Per-fold values plus mean, sample sd and best fold for each headline metric."""
    out = {"folds": [r.to_dict() for r in reports]}
    for key in ("c_index", "mae", "test_loss", "best_val_loss"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                    "best": float(vals.max() if key == "c_index" else vals.min()), "values": vals.tolist()}
    return out


def run_cv(cohort: Cohort, model_config: ModelConfig, train_config: TrainConfig,
           folds: Optional[Sequence[int]] = None, jobs: int = 1, out_dir=None) -> dict:
    """Train and evaluate each fold of a patient-level k-fold rotation."""
    plan = split_folds(cohort.ids, train_config.k_folds, train_config.seed)
    folds = list(range(plan.k)) if folds is None else list(folds)
    reports = run_folds(cohort, plan, folds, model_config, train_config, jobs, out_dir=out_dir)
    result = aggregate(reports)
    result["plan"] = plan.to_dict()
    return result


# ---------------------------------------------------------------- ablation


MODALITIES = {"image": (True, False), "clinical": (False, True), "multi": (True, True)}
ABLATION_COLUMNS = ("table", "key", "depth", "modality", "ratio", "head_hidden", "loss", "c_index", "mae",
                    "c_index_sd", "n_folds")


@dataclass(frozen=True)
class AblationAxes:
    depths: tuple = (18, 34, 50, 101)
    modalities: tuple = ("image", "multi")
    ratio_depth: int = 34
    ratios: tuple = (512, 100, 25, 5)
    head_hidden: tuple = (True, False)
    folds: tuple = (0,)


def ablation_cells(axes: AblationAxes, base: ModelConfig) -> list[tuple[str, dict, ModelConfig]]:
    """Every (key, descriptor, config) cell of the two sweep tables."""
    cells = []
    for depth in axes.depths:
        for modality in axes.modalities:
            use_image, use_clinical = MODALITIES[modality]
            cfg = replace(base, resnet_depth=depth, use_image=use_image, use_clinical=use_clinical,
                          image_proj_dim=512, head_hidden=True)
            cells.append((f"structures/r3d{depth}/{modality}",
                          {"table": "structures", "depth": depth, "modality": modality, "ratio": "512:27",
                           "head_hidden": True}, cfg))
    for ratio in axes.ratios:
        for hidden in axes.head_hidden:
            cfg = replace(base, resnet_depth=axes.ratio_depth, use_image=True, use_clinical=True,
                          image_proj_dim=ratio, head_hidden=hidden)
            cells.append((f"ratio/{ratio}:27/{'hidden' if hidden else 'no-hidden'}",
                          {"table": "ratio", "depth": axes.ratio_depth, "modality": "multi",
                           "ratio": f"{ratio}:27", "head_hidden": hidden}, cfg))
    return cells


def run_ablation(cohort: Cohort, axes: AblationAxes, train_config: TrainConfig,
                 base: Optional[ModelConfig] = None, completed: Optional[dict] = None,
                 on_row: Optional[Callable[[dict], None]] = None, jobs: int = 1) -> list[dict]:
    """Sweep the structure table (depth x modality) and the ratio table (ratio x head hidden layer).

    Cells whose key already appears in ``completed`` are reused, not retrained.
    """
    base = base or ModelConfig()
    completed = dict(completed or {})
    volumes = None
    rows = []
    for key, desc, cfg in ablation_cells(axes, base):
        if key in completed:
            rows.append(completed[key])
            continue
        if volumes is None and cfg.use_image and jobs <= 1:
            volumes = load_volumes(cohort, train_config.volume_shape)
        plan = split_folds(cohort.ids, train_config.k_folds, train_config.seed)
        reports = run_folds(cohort, plan, axes.folds, cfg, train_config, jobs, volumes)
        agg = aggregate(reports)
        row = dict(desc, key=key, loss=agg["test_loss"]["mean"], c_index=agg["c_index"]["mean"],
                   mae=agg["mae"]["mean"], c_index_sd=agg["c_index"]["sd"], n_folds=len(reports))
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
