"""Training loop, the ablation suite and latency probing."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from cadnet.errors import ConfigurationError, NonFiniteError, UsageError
from cadnet.grid import Sample, serialize_dataset, stack
from cadnet.model import CADNet, Inputs, ModelConfig, make_inputs, save_checkpoint, variant_config
from cadnet.numerics import OptimizerConfig, Tape, rmsprop_step
from cadnet.scoring import (
    DEFAULT_PRESENCE_FLOOR,
    DEFAULT_THRESHOLD,
    EvalRow,
    EvalSummary,
    detection_accuracy,
    reconstruction_error,
    score_batch,
)
from cadnet.world.generate import derive_rng, generate_normal, split_dataset
from cadnet.world.inject import inject_contextual_anomalies, inject_point_anomalies
from cadnet.world.rules import RuleBook, check_scenario
from cadnet.world.scenario import ScenarioSpec

logger = logging.getLogger(__name__)

SUITE_ROWS = ("full", "autoencoder", "wo-gps-time", "wo-time", "wo-gps", "wo-frame", "wo-skip", "wo-skip-m", "wo-skip-c")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.05
    decay_epochs: tuple[int, ...] = (5, 18)
    decay_factor: float = 0.1
    max_epochs: int = 40
    patience: int = 3
    kl_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.kl_weight < 0:
            raise ConfigurationError("kl_weight must be non-negative")
        self.optimizer()  # validates lr and schedule

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(learning_rate=self.learning_rate, decay_factor=self.decay_factor,
                               decay_epochs=tuple(self.decay_epochs))

    def lr_at(self, epoch: int) -> float:
        return self.optimizer().lr_at(epoch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(d["decay_epochs"])
        return cls(**d)


# Suite training regime: the step schedule at a tenth of the nominal rate (the
# nominal 0.05 diverges within the first epoch) and a fixed epoch budget, since
# detection accuracy plateaus by epoch six while validation loss creeps down.
SUITE_TRAIN = TrainConfig(learning_rate=0.005, max_epochs=10)


def dataset_hash(samples: Sequence[Sample]) -> str:
    """SHA-256 of the serialized dataset; identical samples give identical hashes."""
    return hashlib.sha256(serialize_dataset(samples)).hexdigest()


@dataclass
class RunManifest:
    model_config: dict
    train_config: dict
    seed: int
    dataset_hashes: dict[str, str]
    checkpoint: str | None = None
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    status: str = "ok"  # ok | diverged
    diagnostic: str = ""
    summary: dict | None = None
    seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def verify(self, datasets: dict[str, Sequence[Sample]]) -> None:
        """Raise if any named dataset no longer hashes to the recorded value."""
        for name, samples in datasets.items():
            want = self.dataset_hashes.get(name)
            got = dataset_hash(samples)
            if want is not None and want != got:
                raise UsageError(f"dataset {name!r} changed since training: hash {got[:12]} != recorded {want[:12]}")


@dataclass
class TrainResult:
    model: CADNet
    manifest: RunManifest

    @property
    def diverged(self) -> bool:
        return self.manifest.status == "diverged"


def _as_inputs(data: Sequence[Sample] | Inputs, config: ModelConfig) -> Inputs:
    return data if isinstance(data, Inputs) else make_inputs(stack(data, config.S, config.C, config.F), config)


def evaluate_loss(model: CADNet, inp: Inputs, kl_weight: float, batch_size: int = 256) -> float:
    """Deterministic (z = mu) loss averaged over a dataset."""
    total = 0.0
    for start in range(0, len(inp), batch_size):
        b = inp.subset(slice(start, start + batch_size))
        tape = Tape()
        trace = model.forward(tape, b)
        total += float(model.loss(tape, b, trace, kl_weight).value) * len(b)
    model.params.release()
    return total / max(len(inp), 1)


def train(
    model: CADNet,
    train_set: Sequence[Sample] | Inputs,
    val_set: Sequence[Sample] | Inputs,
    config: TrainConfig,
    checkpoint: str | Path | None = None,
    dataset_hashes: dict[str, str] | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """RMSProp with the step schedule and early stopping on validation loss.

    The returned model holds the best-validation parameters. On a non-finite
    loss, training stops, the last good parameters are kept and the manifest
    records the diagnostic.
    """
    train_inp = _as_inputs(train_set, model.config)
    val_inp = _as_inputs(val_set, model.config)
    if len(train_inp) == 0 or len(val_inp) == 0:
        raise UsageError("training needs non-empty train and validation sets")
    opt = config.optimizer()
    manifest = RunManifest(model.config.to_dict(), config.to_dict(), config.seed, dict(dataset_hashes or {}),
                           str(checkpoint) if checkpoint else None)
    started = time.perf_counter()
    best = model.params.copy()
    best_val = math.inf
    stale = 0
    n = len(train_inp)
    for epoch in range(1, config.max_epochs + 1):
        lr = opt.lr_at(epoch)
        order = derive_rng(config.seed, "shuffle", epoch).permutation(n)
        noise_rng = derive_rng(config.seed, "noise", epoch)
        losses = []
        try:
            for start in range(0, n, config.batch_size):
                b = train_inp.subset(order[start : start + config.batch_size])
                tape = Tape()
                eps = model.noise(noise_rng, len(b)) if model.config.variational else None
                trace = model.forward(tape, b, eps)
                loss = model.loss(tape, b, trace, config.kl_weight)
                if not np.isfinite(loss.value):
                    raise NonFiniteError("loss")
                tape.backward(loss)
                model.params.collect_grads()
                rmsprop_step(model.params, opt, lr)
                losses.append(float(loss.value))
            val = evaluate_loss(model, val_inp, config.kl_weight)
            if not math.isfinite(val):
                raise NonFiniteError("validation loss")
        except NonFiniteError as exc:
            model.params = best
            manifest.status = "diverged"
            manifest.diagnostic = (f"non-finite values in {exc} during epoch {epoch} at lr {lr:g} "
                                   f"(seed {config.seed}); kept parameters from epoch {manifest.best_epoch}")
            manifest.stopped_epoch = epoch
            logger.error(manifest.diagnostic)
            break
        manifest.train_loss.append(float(np.mean(losses)))
        manifest.val_loss.append(val)
        logger.info("epoch %d lr %.2g train %.4f val %.4f", epoch, lr, manifest.train_loss[-1], val)
        if on_epoch is not None:
            on_epoch(epoch, manifest.train_loss[-1], val)
        manifest.stopped_epoch = epoch
        if val < best_val:
            best_val = val
            best = model.params.copy()
            manifest.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.params = best
    manifest.seconds = time.perf_counter() - started
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, {"best_epoch": manifest.best_epoch, "seed": config.seed})
        manifest.save(Path(str(checkpoint) + ".manifest.json"))
    return TrainResult(model, manifest)


# -- experiment suite -------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    n_normal: int = 20000
    n_point: int = 180
    n_contextual: int = 120
    rarity_threshold: float = 0.05
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)
    data_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    rows: tuple[str, ...] = SUITE_ROWS
    train: TrainConfig = SUITE_TRAIN
    threshold: float = DEFAULT_THRESHOLD
    presence_floor: float = DEFAULT_PRESENCE_FLOOR

    def __post_init__(self) -> None:
        unknown = [r for r in self.rows if r not in SUITE_ROWS]
        if unknown:
            raise ConfigurationError(f"unknown suite rows {unknown}; expected a subset of {list(SUITE_ROWS)}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")


@dataclass
class SuiteData:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    point: list[Sample]
    contextual: list[Sample]

    def hashes(self) -> dict[str, str]:
        return {k: dataset_hash(getattr(self, k)) for k in ("train", "val", "test", "point", "contextual")}


def build_suite_data(spec: ScenarioSpec, rulebook: RuleBook, config: SuiteConfig) -> SuiteData:
    """Normal splits plus point and contextual evaluation sets injected into the test split."""
    check_scenario(spec, rulebook)
    normal = generate_normal(spec, config.n_normal, config.data_seed)
    train_set, val_set, test_set = split_dataset(normal, config.split, config.data_seed)
    point, _ = inject_point_anomalies(test_set, spec, rulebook, config.n_point, config.data_seed)
    contextual, _ = inject_contextual_anomalies(test_set, spec, rulebook, config.rarity_threshold,
                                                config.n_contextual, config.data_seed)
    return SuiteData(train_set, val_set, test_set, point, contextual)


def evaluate(model: CADNet, test: Inputs, point: Inputs | None, point_gt: Sequence, contextual: Inputs | None,
             contextual_gt: Sequence, threshold: float = DEFAULT_THRESHOLD,
             presence_floor: float = DEFAULT_PRESENCE_FLOOR) -> dict:
    """Reconstruction error on normal data and accuracy/FPR on each anomaly set."""
    out = {"reconstruction_error": reconstruction_error(test.x, model.reconstruct(test))}
    for key, inp, gt in (("point", point, point_gt), ("contextual", contextual, contextual_gt)):
        if inp is None or len(inp) == 0:
            out[f"{key}_accuracy"] = math.nan
            out[f"{key}_fpr"] = math.nan
            continue
        reports = score_batch(inp.x, model.reconstruct(inp), [str(i) for i in range(len(inp))], presence_floor, threshold)
        acc = detection_accuracy(reports, gt)
        out[f"{key}_accuracy"] = acc.accuracy
        out[f"{key}_fpr"] = acc.false_positive_rate
    return out


def run_experiment_suite(
    spec: ScenarioSpec,
    rulebook: RuleBook,
    config: SuiteConfig = SuiteConfig(),
    out_dir: str | Path | None = None,
    data: SuiteData | None = None,
) -> EvalSummary:
    """Train every requested row for every seed on identical data; each table row is the per-metric median.

    A run that raises is recorded as a failure for its row; the remaining rows still run.
    """
    data = data or build_suite_data(spec, rulebook, config)
    hashes = data.hashes()
    base = ModelConfig(S=spec.S, C=spec.C, F=spec.F, gps_bounds=spec.gps_bounds())
    stacked = {k: stack(getattr(data, k)) for k in ("train", "val", "test", "point", "contextual")}
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in config.rows:
        cfg = variant_config(name, base)
        inputs = {k: make_inputs(b, cfg) for k, b in stacked.items()}
        row = EvalRow(name)
        metrics: list[dict] = []
        for seed in config.seeds:
            tc = replace(config.train, seed=seed, kl_weight=config.train.kl_weight if cfg.variational else 0.0)
            ckpt = out_path / f"{name}-seed{seed}.ckpt" if out_path is not None else None
            try:
                model = CADNet(cfg, seed=seed)
                result = train(model, inputs["train"], inputs["val"], tc, ckpt, hashes)
                if result.diverged and result.manifest.best_epoch == 0:
                    raise NonFiniteError(result.manifest.diagnostic)
                m = evaluate(result.model, inputs["test"], inputs["point"], stacked["point"].ground_truth,
                             inputs["contextual"], stacked["contextual"].ground_truth,
                             config.threshold, config.presence_floor)
                result.manifest.summary = m
                if ckpt is not None:
                    result.manifest.save(Path(str(ckpt) + ".manifest.json"))
                logger.info("%s seed %d: %s (%d epochs, %.0fs)", name, seed,
                            {k: round(v, 4) for k, v in m.items()}, result.manifest.stopped_epoch, result.manifest.seconds)
                metrics.append(m)
                row.runs.append({"seed": seed, **m, "epochs": result.manifest.stopped_epoch,
                                 "best_epoch": result.manifest.best_epoch, "status": result.manifest.status})
            except Exception as exc:  # a failed run must not sink the table
                logger.exception("%s seed %d failed", name, seed)
                row.runs.append({"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        if not metrics:
            row.failure = "; ".join(r["error"] for r in row.runs if "error" in r)
        else:
            for key in ("reconstruction_error", "point_accuracy", "contextual_accuracy", "point_fpr", "contextual_fpr"):
                vals = [m[key] for m in metrics if not math.isnan(m[key])]
                setattr(row, key, float(np.median(vals)) if vals else math.nan)
            if len(metrics) < len(config.seeds):
                row.failure = f"{len(config.seeds) - len(metrics)} of {len(config.seeds)} seeds failed"
        rows.append(row)
    summary = EvalSummary(rows)
    if out_path is not None:
        (out_path / "summary.json").write_text(summary.to_json() + "\n", encoding="utf-8")
        (out_path / "table.txt").write_text(summary.table() + "\n", encoding="utf-8")
    return summary


# -- acceptance orderings ---------------------------------------------------


@dataclass(frozen=True)
class Criterion:
    name: str
    passed: bool
    detail: str


def ordering_criteria(summary: EvalSummary) -> list[Criterion]:
    """The comparative checks on a suite table; rows that were not run are skipped."""
    out: list[Criterion] = []

    def have(*names: str) -> bool:
        return all(n in summary and not summary.row(n).failed for n in names)

    if have("full"):
        f = summary.row("full")
        out.append(Criterion("reconstruction", f.reconstruction_error <= 0.05,
                             f"full error {f.reconstruction_error:.4f} <= 0.05"))
        out.append(Criterion("point accuracy", f.point_accuracy >= 85 and f.point_fpr <= 0.10,
                             f"full point acc {f.point_accuracy:.1f} >= 85, FPR {f.point_fpr:.3f} <= 0.10"))
        out.append(Criterion("contextual accuracy", f.contextual_accuracy >= 75,
                             f"full contextual acc {f.contextual_accuracy:.1f} >= 75"))
    if have("full", "wo-skip"):
        f, s = summary.row("full"), summary.row("wo-skip")
        gap = s.reconstruction_error - f.reconstruction_error
        out.append(Criterion("skip reconstruction gap", gap >= 0.10, f"wo-skip error exceeds full by {gap:.4f} >= 0.10"))
        drop = f.point_accuracy - s.point_accuracy
        out.append(Criterion("skip point drop", drop >= 30, f"wo-skip point acc {drop:.1f} points below full >= 30"))
    if have("full", "wo-gps-time"):
        f, g = summary.row("full"), summary.row("wo-gps-time")
        d = abs(f.point_accuracy - g.point_accuracy)
        out.append(Criterion("context-free point anomalies", d <= 5, f"|full - wo-gps-time| point acc {d:.1f} <= 5"))
        gap = f.contextual_accuracy - g.contextual_accuracy
        out.append(Criterion("context gap", gap >= 20, f"full - wo-gps-time contextual acc {gap:.1f} >= 20"))
        for name in ("wo-time", "wo-gps"):
            if have(name):
                v = summary.row(name).contextual_accuracy
                out.append(Criterion(f"{name} between", g.contextual_accuracy < v < f.contextual_accuracy,
                                     f"{g.contextual_accuracy:.1f} < {name} {v:.1f} < {f.contextual_accuracy:.1f}"))
    if have("full", "wo-frame", "wo-time", "wo-gps"):
        f = summary.row("full").contextual_accuracy
        w = summary.row("wo-frame").contextual_accuracy
        lo = min(summary.row("wo-time").contextual_accuracy, summary.row("wo-gps").contextual_accuracy)
        out.append(Criterion("wo-frame placement", lo < w < f, f"{lo:.1f} < wo-frame {w:.1f} < {f:.1f}"))
    if have("full", "wo-skip-c"):
        f, c = summary.row("full"), summary.row("wo-skip-c")
        dc = f.contextual_accuracy - c.contextual_accuracy
        dp = f.point_accuracy - c.point_accuracy
        out.append(Criterion("context skip", dc > dp, f"wo-skip-c contextual drop {dc:.1f} > point drop {dp:.1f}"))
    if have("full", "autoencoder"):
        gap = summary.row("full").contextual_accuracy - summary.row("autoencoder").contextual_accuracy
        out.append(Criterion("baseline gap", gap >= 20, f"full - autoencoder contextual acc {gap:.1f} >= 20"))
    return out


# -- latency ----------------------------------------------------------------


@dataclass(frozen=True)
class Timing:
    mean_ms: float
    std_ms: float
    min_ms: float
    n_runs: int


def timing_probe(model: CADNet, n_runs: int = 100, warmup: int = 5, seed: int = 0) -> Timing:
    """Wall-clock statistics of single-sample deterministic forward passes."""
    if n_runs < 1:
        raise UsageError("timing_probe needs n_runs >= 1")
    cfg = model.config
    rng = derive_rng(seed, "timing")
    dtype = model.params.dtype
    inp = Inputs(
        x=(rng.random((1, cfg.S, cfg.S, cfg.C)) < 0.02).astype(dtype) * 0.9,
        time=rng.random((1, 2)).astype(dtype),
        gps=rng.random((1, 2)).astype(dtype),
        frame=rng.standard_normal((1, cfg.F)).astype(dtype),
    )
    for _ in range(warmup):
        model.forward(Tape(), inp)
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        model.forward(Tape(), inp)
        times.append((time.perf_counter() - t0) * 1000.0)
    model.params.release()
    a = np.asarray(times)
    return Timing(float(a.mean()), float(a.std()), float(a.min()), n_runs)
