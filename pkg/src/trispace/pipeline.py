"""End-to-end experiment runner: splits, training, ablations, metrics and run artifacts.

A run directory holds everything needed to score new trajectories later:
normalizer and attribute scaler, the encoder checkpoint (when one was
trained), the boosted model and the reference trajectories the relation
graph was built over.  Prediction rebuilds the graph over the reference set
plus the new trajectories, so new rows receive neighbours from training data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import report
from .aem import AttributeScaler, attribute_embedding
from .dpm import DEFAULT_ALPHA, BoostedModel, HGBConfig, fit_hgb, fuse
from .learn import DEFAULT_EPOCHS, DEFAULT_ETA, DEFAULT_LR, TrainConfig, TrainingDiverged, train_tlm
from .sfm import DEFAULT_K, DEFAULT_STEPS, spatial_embedding
from .tlm import TemporalEncoder, TLMConfig
from .trajio import (DEFAULT_CAP, DataError, NormParams, Trajectory, fit_normalizer, pad_and_mask,
                     parse_labels, parse_points)

logger = logging.getLogger(__name__)

MAPE_EPS = 1e-8
METRICS = ("mse", "rmse", "mape", "mae")
SPLITS = ("train", "val", "test")
VARIANTS = ("full", "no_ls", "no_fd", "attribute_only")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # re-raised with the stage attached
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    split_ratios: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    cap: int = DEFAULT_CAP
    k: int = DEFAULT_K
    steps: int = DEFAULT_STEPS
    eta: float = DEFAULT_ETA
    alpha: float = DEFAULT_ALPHA
    weight_mode: str = "distance"
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    patience: int = 10
    batch_size: int = 64
    structure: str = "weighted_norm"
    graph_refresh: str = "epoch"
    n_state: int = 8
    d_inner: int = 8
    conv_width: int = 4
    n_blocks: int = 2
    variant: str = "zoh"
    direction_wrap: bool = False
    max_bins: int = 255
    max_depth: int = 6
    n_rounds: int = 200
    shrinkage: float = 0.1
    min_samples_leaf: int = 5
    hgb_patience: int = 20
    no_fd: bool = False
    no_ls: bool = False
    attribute_only: bool = False
    figures: bool = True

    def validate(self) -> "ExperimentConfig":
        r = self.split_ratios
        if len(r) != 3 or any(x < 0 for x in r) or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split_ratios must be three nonnegative numbers summing to 1, got {r}")
        if r[0] <= 0:
            raise ConfigError("training ratio must be positive")
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.lr >= 0, "lr must be >= 0"),
            (self.cap >= 1, "cap must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.patience >= 1 and self.hgb_patience >= 1, "patience must be >= 1"),
            (self.weight_mode in ("distance", "gaussian"), "weight_mode must be 'distance' or 'gaussian'"),
            (self.structure in ("weighted_norm", "smooth"), "structure must be 'weighted_norm' or 'smooth'"),
            (self.graph_refresh in ("epoch", "step"), "graph_refresh must be 'epoch' or 'step'"),
            (len(self.seeds) >= 1, "seeds must not be empty"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.tlm_config()
            self.hgb_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def variant_name(self) -> str:
        if self.attribute_only:
            return "attribute_only"
        if self.no_fd:
            return "no_fd"
        return "no_ls" if self.no_ls else "full"

    def with_variant(self, name: str) -> "ExperimentConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}")
        flags = {v: v == name for v in ("no_ls", "no_fd", "attribute_only")}
        return ExperimentConfig(**{**asdict(self), **flags})

    def tlm_config(self) -> TLMConfig:
        return TLMConfig(n_state=self.n_state, d_inner=self.d_inner, conv_width=self.conv_width,
                         n_blocks=self.n_blocks, variant=self.variant, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, eta=0.0 if self.no_ls else self.eta, k=self.k,
                           steps=self.steps, weight_mode=self.weight_mode, structure=self.structure,
                           patience=self.patience, batch_size=self.batch_size,
                           graph_refresh=self.graph_refresh, seed=self.seed)

    def hgb_config(self) -> HGBConfig:
        return HGBConfig(max_bins=self.max_bins, max_depth=self.max_depth, n_rounds=self.n_rounds,
                         shrinkage=self.shrinkage, min_samples_leaf=self.min_samples_leaf,
                         patience=self.hgb_patience)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d).validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---------------------------------------------------------------- data


def load_dataset(data_dir) -> list[Trajectory]:
    """Read ``points.csv`` and ``labels.csv`` (if present) from a directory."""
    data_dir = Path(data_dir)
    points = data_dir / "points.csv"
    if not points.exists():
        raise DataError(f"{points} not found")
    labels = None
    if (data_dir / "labels.csv").exists():
        with open(data_dir / "labels.csv", newline="") as fh:
            labels = parse_labels(fh)
    with open(points, newline="") as fh:
        result = parse_points(fh, labels)
    if not result.trajectories:
        raise DataError(f"no valid trajectories in {points}")
    return result.trajectories


def split(trajs: Sequence, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[list, list, list]:
    """Seeded shuffle followed by a contiguous cut into train/val/test."""
    n = len(trajs)
    if n < 10:
        raise ConfigError(f"need at least 10 trajectories to split, got {n}")
    idx = split_indices(n, ratios, seed)
    return tuple([trajs[i] for i in part] for part in idx)


def split_indices(n: int, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or not math.isclose(r.sum(), 1.0, abs_tol=1e-9):
        raise ConfigError(f"invalid split ratios {list(ratios)}")
    n_train = int(math.floor(r[0] * n + 1e-9))
    n_val = int(math.floor(r[1] * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


# ---------------------------------------------------------------- metrics


def compute_metrics(y_true, y_pred, eps: float = MAPE_EPS) -> dict[str, float]:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if len(y_true) == 0:
        raise ValueError("metrics need at least one sample")
    err = y_pred - y_true
    mse = float(np.mean(err**2))
    return {
        "mse": mse,
        "rmse": math.sqrt(mse),
        "mape": float(np.mean(np.abs(err) / np.maximum(np.abs(y_true), eps))),
        "mae": float(np.mean(np.abs(err))),
    }


@dataclass
class MetricsReport:
    """Metrics per split, on normalized and on second-valued labels."""

    rows: dict = field(default_factory=dict)  # (split, normalized) -> metrics dict

    def add(self, split_name: str, normalized: bool, metrics: dict) -> None:
        self.rows[(split_name, normalized)] = metrics

    def get(self, split_name: str, metric: str, normalized: bool = True) -> float:
        return self.rows[(split_name, normalized)][metric]

    def to_csv(self, stream) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["split", "metric", "normalized", "value"])
        for (name, norm), m in self.rows.items():
            for key in METRICS:
                w.writerow([name, key, str(norm).lower(), repr(m[key])])

    def to_dict(self) -> dict:
        out: dict = {}
        for (name, norm), m in self.rows.items():
            out.setdefault(name, {})["normalized" if norm else "seconds"] = m
        return out

    def format_table(self) -> str:
        lines = [f"{'split':<8}{'units':<12}" + "".join(f"{k:>14}" for k in METRICS)]
        for (name, norm), m in self.rows.items():
            lines.append(f"{name:<8}{'normalized' if norm else 'seconds':<12}"
                         + "".join(f"{m[k]:>14.6g}" for k in METRICS))
        return "\n".join(lines)


# ---------------------------------------------------------------- fitted state


@dataclass
class FittedRun:
    config: ExperimentConfig
    norm: NormParams
    scaler: AttributeScaler
    encoder: TemporalEncoder | None
    model: BoostedModel
    reference: list[Trajectory]
    train_result: object = None
    graph: object = None


def _hybrid_embedding(cfg: ExperimentConfig, trajs: Sequence[Trajectory], norm: NormParams,
                      scaler: AttributeScaler, encoder: TemporalEncoder | None, timings: dict):
    """Scaled attributes, the relation graph and the fused features for ``trajs``."""
    with _stage("attributes", timings):
        attrs = scaler.transform(attribute_embedding(trajs, cfg.cap, wrap=cfg.direction_wrap).values)
    graph = None
    if cfg.attribute_only:
        hybrid = fuse(attrs, np.zeros_like(attrs), 0.0)
    elif cfg.no_fd:
        hybrid = fuse(attrs, attrs, cfg.alpha)
    else:
        with _stage("temporal", timings):
            tensor = pad_and_mask(trajs, norm, cfg.cap)
            temporal = encoder.encode(tensor) if encoder is not None else tensor.values
        with _stage("spatial", timings):
            spatial, graph = spatial_embedding(temporal, attrs, cfg.k, cfg.steps, cfg.weight_mode)
        hybrid = fuse(attrs, spatial.values, cfg.alpha)
    return attrs, hybrid, graph


def needs_encoder(cfg: ExperimentConfig) -> bool:
    # without feature diffusion the temporal embedding never reaches the predictor
    return not (cfg.attribute_only or cfg.no_fd)


def fit(cfg: ExperimentConfig, trajs: Sequence[Trajectory], train_idx, val_idx,
        timings: dict | None = None) -> tuple[FittedRun, np.ndarray]:
    """Fit every stage on ``trajs`` (graph over all of them); returns the run and hybrid features."""
    timings = {} if timings is None else timings
    cfg.validate()
    torch.manual_seed(cfg.seed)
    train = [trajs[i] for i in train_idx]
    val = [trajs[i] for i in val_idx]
    with _stage("normalize", timings):
        if any(tr.label is None for tr in trajs):
            raise DataError("every trajectory needs a label for training")
        norm = fit_normalizer(train)
        raw_attrs = attribute_embedding(trajs, cfg.cap, wrap=cfg.direction_wrap).values
        scaler = AttributeScaler.fit(raw_attrs[train_idx])
        attrs = scaler.transform(raw_attrs)

    encoder, train_result = None, None
    if needs_encoder(cfg):
        with _stage("train_encoder", timings):
            encoder = TemporalEncoder(cfg.tlm_config())
            tensor = pad_and_mask(trajs, norm, cfg.cap)
            train_result = train_tlm(encoder, tensor.subset(train_idx), attrs[train_idx],
                                     tensor.subset(val_idx) if len(val_idx) else None,
                                     attrs[val_idx] if len(val_idx) else None, cfg.train_config())

    _, hybrid, graph = _hybrid_embedding(cfg, trajs, norm, scaler, encoder, timings)
    y = norm.transform_labels(np.array([tr.label for tr in trajs]))
    with _stage("boosting", timings):
        model = fit_hgb(hybrid[train_idx], y[train_idx], cfg.hgb_config(),
                        hybrid[val_idx] if len(val_idx) else None, y[val_idx] if len(val_idx) else None)
        model.label_norm = {"label_min": norm.label_min, "label_max": norm.label_max}
    run = FittedRun(cfg, norm, scaler, encoder, model, list(trajs), train_result, graph)
    return run, hybrid


def predict(run: FittedRun, trajs: Sequence[Trajectory]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Score ``trajs`` with the graph rebuilt over the reference set plus these trajectories.

    Trajectories whose id is already in the reference set replace that entry.
    """
    new_ids = {tr.id for tr in trajs}
    if len(new_ids) != len(trajs):
        raise DataError("duplicate trajectory ids in prediction input")
    nodes = [tr for tr in run.reference if tr.id not in new_ids] + list(trajs)
    _, hybrid, _ = _hybrid_embedding(run.config, nodes, run.norm, run.scaler, run.encoder, {})
    rows = hybrid[len(nodes) - len(trajs):]
    pred_norm, pred_sec = run.model.predict_seconds(rows)
    return [tr.id for tr in trajs], pred_norm, pred_sec


# ---------------------------------------------------------------- persistence


def save_run(run: FittedRun, run_dir) -> dict[str, str]:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "config": run_dir / "config.json",
        "preprocess": run_dir / "preprocess.json",
        "model": run_dir / "model.json",
        "reference": run_dir / "reference.npz",
    }
    with open(paths["config"], "w") as fh:
        json.dump(run.config.to_dict(), fh, indent=2, sort_keys=True)
    with open(paths["preprocess"], "w") as fh:
        json.dump({"norm": run.norm.to_dict(), "scaler": run.scaler.to_dict()}, fh)
    run.model.save(paths["model"])
    if run.encoder is not None:
        paths["encoder"] = run_dir / "encoder.json"
        run.encoder.save(paths["encoder"])
    ref = run.reference
    np.savez_compressed(
        paths["reference"],
        ids=np.array([tr.id for tr in ref]),
        lengths=np.array([len(tr.points) for tr in ref]),
        points=np.concatenate([tr.points for tr in ref]),
        regions=np.array([tr.region or "" for tr in ref]),
    )
    return {k: str(v) for k, v in paths.items()}


def resolve_run_dir(path) -> Path:
    """Accept a run directory or a parent whose ``LATEST`` file names one."""
    path = Path(path)
    if (path / "model.json").exists():
        return path
    latest = path / "LATEST"
    if latest.exists():
        return path / latest.read_text().strip()
    raise DataError(f"{path} is not a run directory")


def load_run(path) -> FittedRun:
    run_dir = resolve_run_dir(path)
    with open(run_dir / "config.json") as fh:
        cfg = ExperimentConfig.from_dict(json.load(fh))
    with open(run_dir / "preprocess.json") as fh:
        pre = json.load(fh)
    encoder = TemporalEncoder.load(run_dir / "encoder.json") if (run_dir / "encoder.json").exists() else None
    if needs_encoder(cfg) and encoder is None:
        raise DataError(f"{run_dir} lacks the encoder checkpoint its config requires")
    ref = np.load(run_dir / "reference.npz")
    bounds = np.concatenate([[0], np.cumsum(ref["lengths"])])
    reference = [Trajectory(str(i), ref["points"][a:b], None, str(r) or None)
                 for i, a, b, r in zip(ref["ids"], bounds[:-1], bounds[1:], ref["regions"])]
    return FittedRun(cfg, NormParams.from_dict(pre["norm"]), AttributeScaler.from_dict(pre["scaler"]),
                     encoder, BoostedModel.load(run_dir / "model.json"), reference)


def write_predictions(ids, pred_norm, pred_sec, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["traj_id", "pred_norm", "pred_seconds"])
    for i, a, b in zip(ids, pred_norm, pred_sec):
        w.writerow([i, repr(float(a)), repr(float(b))])


def read_predictions(stream) -> dict[str, float]:
    """Predicted seconds by id; also accepts a label file (``traj_id,arrival_time``)."""
    reader = csv.reader(stream)
    header = next(reader, None)
    if not header or header[0] != "traj_id" or len(header) < 2:
        raise DataError("prediction file needs a traj_id column followed by values")
    col = header.index("pred_seconds") if "pred_seconds" in header else 1
    out = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out[row[0]] = float(row[col])
        except (IndexError, ValueError) as exc:
            raise DataError(f"line {lineno}: bad prediction row {row!r}") from exc
    return out


def evaluate_files(pred_stream, label_stream, label_norm: dict | None = None) -> MetricsReport:
    preds = read_predictions(pred_stream)
    labels, _ = parse_labels(label_stream)
    missing = sorted(set(labels) - set(preds))
    if missing:
        raise DataError(f"{len(missing)} labelled trajectories have no prediction (first: {missing[0]})")
    ids = sorted(labels)
    y = np.array([labels[i] for i in ids])
    p = np.array([preds[i] for i in ids])
    rep = MetricsReport()
    if label_norm and label_norm.get("label_min") is not None:
        norm = NormParams(np.zeros(0), np.zeros(0), label_norm["label_min"], label_norm["label_max"])
        rep.add("all", True, compute_metrics(norm.transform_labels(y), norm.transform_labels(p)))
    rep.add("all", False, compute_metrics(y, p))
    return rep


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentResult:
    metrics: MetricsReport
    run_dir: Path
    manifest: dict


def _metrics_for(run: FittedRun, trajs, hybrid, parts: dict) -> tuple[MetricsReport, np.ndarray, np.ndarray]:
    pred_norm, pred_sec = run.model.predict_seconds(hybrid)
    y_sec = np.array([tr.label for tr in trajs])
    y_norm = run.norm.transform_labels(y_sec)
    rep = MetricsReport()
    for name, idx in parts.items():
        if len(idx) == 0:
            continue
        rep.add(name, True, compute_metrics(y_norm[idx], pred_norm[idx]))
        rep.add(name, False, compute_metrics(y_sec[idx], pred_sec[idx]))
    return rep, pred_norm, pred_sec


def _run(cfg: ExperimentConfig, trajs: Sequence[Trajectory], parts: dict, out_dir, extra: dict) -> ExperimentResult:
    timings: dict = {}
    start = time.perf_counter()
    run, hybrid = fit(cfg, trajs, parts["train"], parts["val"], timings)
    rep, pred_norm, pred_sec = _metrics_for(run, trajs, hybrid, parts)

    run_dir = Path(out_dir) / cfg.digest()
    run_dir.mkdir(parents=True, exist_ok=True)
    with _stage("write", timings):
        artifacts = save_run(run, run_dir)
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            rep.to_csv(fh)
        test = parts["test"]
        with open(run_dir / "predictions.csv", "w", newline="") as fh:
            write_predictions([trajs[i].id for i in test], pred_norm[test], pred_sec[test], fh)
        artifacts.update(metrics=str(run_dir / "metrics.csv"), predictions=str(run_dir / "predictions.csv"))
        if run.train_result is not None:
            with open(run_dir / "loss_history.csv", "w", newline="") as fh:
                run.train_result.to_csv(fh)
            artifacts["loss_history"] = str(run_dir / "loss_history.csv")
        if run.graph is not None:
            with open(run_dir / "graph.csv", "w", newline="") as fh:
                run.graph.to_csv(fh, ids=[tr.id for tr in trajs])
            artifacts["graph"] = str(run_dir / "graph.csv")
        if cfg.figures:
            artifacts.update(_figures(run, trajs, pred_sec, test, run_dir))
        (Path(out_dir) / "LATEST").write_text(run_dir.name + "\n")

    manifest = {
        "config": cfg.to_dict(),
        "config_hash": run_dir.name,
        "seed": cfg.seed,
        "variant": cfg.variant_name,
        "encoder_trained": run.encoder is not None,
        "split_sizes": {k: int(len(v)) for k, v in parts.items()},
        "split_ids": {k: [trajs[i].id for i in v] for k, v in parts.items()},
        "metrics": rep.to_dict(),
        "wall_times": {**timings, "total": time.perf_counter() - start},
        "artifacts": artifacts,
        **extra,
    }
    if run.train_result is not None:
        manifest["best_epoch"] = run.train_result.best_epoch
        manifest["stopped_early"] = run.train_result.stopped_early
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    logger.info("run %s (%s): test MAE %.6g", run_dir.name, cfg.variant_name,
                rep.get("test", "mae") if ("test", True) in rep.rows else float("nan"))
    return ExperimentResult(rep, run_dir, manifest)


def _figures(run: FittedRun, trajs, pred_sec, test, run_dir: Path) -> dict[str, str]:
    fig_dir = run_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    out = {}
    if len(test):
        path = fig_dir / "test_predictions.png"
        report.prediction_scatter([trajs[i].label for i in test], pred_sec[test], path, run.config.variant_name)
        out["fig_predictions"] = str(path)
    if run.train_result is not None:
        path = fig_dir / "loss.png"
        report.loss_curve(run.train_result.history, path)
        out["fig_loss"] = str(path)
    if run.graph is not None:
        path = fig_dir / "degrees.png"
        report.degree_histogram(np.asarray(run.graph.W.sum(axis=1)).ravel(), path)
        out["fig_degrees"] = str(path)
    return out


def run_experiment(cfg: ExperimentConfig, trajs: Sequence[Trajectory], out_dir) -> ExperimentResult:
    """Split, fit every stage, score all splits and write the run directory."""
    cfg.validate()
    with _stage("split", {}):
        if len(trajs) < 10:
            raise ConfigError(f"need at least 10 trajectories, got {len(trajs)}")
        tr_idx, va_idx, te_idx = split_indices(len(trajs), cfg.split_ratios, cfg.seed)
    return _run(cfg, trajs, {"train": tr_idx, "val": va_idx, "test": te_idx}, out_dir, {"mode": "in_domain"})


def domain_transfer(cfg: ExperimentConfig, trajs: Sequence[Trajectory], train_regions, test_regions,
                    out_dir) -> ExperimentResult:
    """Fit on ``train_regions`` only and report test metrics on ``test_regions``.

    Identical region sets fall back to an ordinary split of those regions.
    """
    cfg.validate()
    train_regions, test_regions = list(train_regions), list(test_regions)
    known = {tr.region for tr in trajs}
    for r in train_regions + test_regions:
        if r not in known:
            raise DataError(f"region {r!r} has no trajectories")
    if not train_regions or not test_regions:
        raise DataError("both region lists must be non-empty")
    if set(train_regions) == set(test_regions):
        subset = [tr for tr in trajs if tr.region in set(train_regions)]
        return run_experiment(cfg, subset, out_dir)

    pool = [tr for tr in trajs if tr.region in set(train_regions)]
    held = [tr for tr in trajs if tr.region in set(test_regions) and tr.region not in set(train_regions)]
    if len(pool) < 2 or not held:
        raise DataError("transfer needs at least two training and one test trajectory")
    r_train, r_val = cfg.split_ratios[0], cfg.split_ratios[1]
    perm = np.random.default_rng(cfg.seed).permutation(len(pool))
    n_train = max(1, int(math.floor(len(pool) * r_train / (r_train + r_val) + 1e-9)))
    nodes = pool + held
    parts = {"train": perm[:n_train], "val": perm[n_train:],
             "test": np.arange(len(pool), len(nodes))}
    extra = {"mode": "transfer", "train_regions": train_regions, "test_regions": test_regions}
    return _run(cfg, nodes, parts, out_dir, extra)


def ablate(cfg: ExperimentConfig, data_for_seed, out_dir, variants=VARIANTS) -> dict:
    """Run each variant for each seed in ``cfg.seeds``; writes ``ablation.csv`` and a bar chart.

    ``data_for_seed(seed)`` returns the trajectories for that seed, which lets
    synthetic sweeps regenerate data while real data is simply reused.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        trajs = data_for_seed(seed)
        for name in variants:
            vcfg = ExperimentConfig(**{**cfg.with_variant(name).to_dict(), "seed": seed})
            res = run_experiment(vcfg, trajs, out_dir / name)
            rows.append((name, seed, *(res.metrics.get("test", m) for m in METRICS)))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed"] + [f"test_{m}" for m in METRICS])
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(v) for v in r[2:]])
    summary = {}
    for name in variants:
        maes = np.array([r[2 + METRICS.index("mae")] for r in rows if r[0] == name])
        summary[name] = (float(maes.mean()), float(maes.std()))
    if cfg.figures:
        report.ablation_bars(summary, out_dir / "ablation.png")
    with open(out_dir / "ablation_summary.json", "w") as fh:
        json.dump({k: {"mean_mae": m, "std_mae": s} for k, (m, s) in summary.items()}, fh, indent=2)
    return {"rows": rows, "summary": summary}


__all__ = [
    "ConfigError", "StageError", "TrainingDiverged", "ExperimentConfig", "MetricsReport", "FittedRun",
    "ExperimentResult", "load_dataset", "split", "split_indices", "compute_metrics", "fit", "predict",
    "save_run", "load_run", "resolve_run_dir", "write_predictions", "read_predictions", "evaluate_files",
    "run_experiment", "domain_transfer", "ablate",
]
