"""Command-line entry point: ``cadnet {generate,train,infer,eval,ablate,gradcheck}``.

Every subcommand checks its flags and inputs before writing anything. Exit
codes: 0 success, 1 a check failed (ablation ordering, gradient check, or
records that could not be scored), 2 bad usage or unreadable input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from cadnet.errors import CadnetError, ConfigurationError, ParseError
from cadnet.grid import header_for, header_from_json, load_dataset, sample_from_json, save_dataset, stack
from cadnet.harness import (
    SUITE_ROWS,
    SUITE_TRAIN,
    SuiteConfig,
    TrainConfig,
    build_suite_data,
    dataset_hash,
    evaluate,
    ordering_criteria,
    run_experiment_suite,
    train,
)
from cadnet.model import VARIANTS, CADNet, ModelConfig, load_checkpoint, make_inputs, toy_config, variant_config
from cadnet.scoring import DEFAULT_THRESHOLD, score
from cadnet.world import load_rulebook, load_scenario

logger = logging.getLogger("cadnet")

SPLITS = ("train", "val", "test", "point", "contextual")
DATA_MANIFEST = "manifest.json"
MODEL_VARIANTS = tuple(VARIANTS) + ("autoencoder",)


class CliError(Exception):
    """Bad flags or inputs detected before any side effect; exit code 2."""


# -- configuration ----------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must hold a JSON object")
    unknown = set(raw) - {"model", "train", "suite", "scenario", "rulebook"}
    if unknown:
        raise CliError(f"config {path}: unknown sections {sorted(unknown)}")
    return raw


def _train_config(cfg: dict, base: TrainConfig, seed: int | None) -> TrainConfig:
    merged = {**base.to_dict(), **cfg.get("train", {})}
    if seed is not None:
        merged["seed"] = seed
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as exc:
        raise CliError(f"bad train config: {exc}") from exc


def _suite_config(cfg: dict, args: argparse.Namespace) -> SuiteConfig:
    raw = dict(cfg.get("suite", {}))
    for key in ("n_normal", "n_point", "n_contextual"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    if getattr(args, "rows", None):
        raw["rows"] = args.rows
    if getattr(args, "seeds", None):
        raw["seeds"] = args.seeds
    elif "seeds" not in raw and getattr(args, "seed", None) is not None:
        raw["seeds"] = [args.seed + i for i in range(3)]
    if getattr(args, "seed", None) is not None:
        raw["data_seed"] = args.seed
    if getattr(args, "threshold", None) is not None:
        raw["threshold"] = args.threshold
    train_cfg = _train_config(cfg, SUITE_TRAIN, None)
    try:
        for key in ("rows", "seeds", "split"):
            if key in raw:
                raw[key] = tuple(raw[key])
        suite = SuiteConfig(**{k: v for k, v in raw.items() if k != "train"}, train=train_cfg)
    except TypeError as exc:
        raise CliError(f"bad suite config: {exc}") from exc
    for key in ("n_normal", "n_point", "n_contextual"):
        if getattr(suite, key) < 0:
            raise CliError(f"{key} must be non-negative")
    return suite


def _world(args: argparse.Namespace, cfg: dict):
    scen = args.scenario or cfg.get("scenario")
    rules = args.rulebook or cfg.get("rulebook")
    try:
        return load_scenario(scen), load_rulebook(rules)
    except OSError as exc:
        raise CliError(f"cannot read scenario/rulebook: {exc}") from exc


def _need_seed(args: argparse.Namespace) -> int:
    if getattr(args, "seed", None) is None:
        raise CliError(f"{args.command} requires --seed")
    return args.seed


def _writable_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise CliError(f"{path} exists and is not a directory")
    parent = p if p.exists() else p.parent
    while not parent.exists():
        parent = parent.parent
    if not parent.is_dir():
        raise CliError(f"cannot create {path}")
    return p


def _writable_file(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        raise CliError(f"{path} is a directory")
    if not p.parent.exists():
        raise CliError(f"directory {p.parent} does not exist")
    return p


def _data_dir(path: str, names: Sequence[str]) -> Path:
    p = Path(path)
    missing = [n for n in names if not (p / f"{n}.jsonl").is_file()]
    if missing:
        raise CliError(f"{path} lacks {', '.join(f'{n}.jsonl' for n in missing)}")
    return p


def _read_manifest(data_dir: Path) -> dict:
    path = data_dir / DATA_MANIFEST
    if not path.is_file():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from exc


# -- subcommands ------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    seed = _need_seed(args)
    cfg = _load_config(args.config)
    suite = _suite_config(cfg, args)
    spec, rulebook = _world(args, cfg)
    out = _writable_dir(args.out)
    if suite.n_normal == 0 and (suite.n_point or suite.n_contextual):
        raise CliError("anomaly sets are injected into the test split; they need n_normal > 0")
    if suite.n_normal == 0:
        data = {k: [] for k in SPLITS}
    else:
        built = build_suite_data(spec, rulebook, suite)
        data = {k: getattr(built, k) for k in SPLITS}
    out.mkdir(parents=True, exist_ok=True)
    classes = spec.classes.names
    header = header_for([], classes)
    header = replace(header, S=spec.S, C=spec.C, F=spec.F)
    for name in SPLITS:
        save_dataset(out / f"{name}.jsonl", data[name], header)
    manifest = {
        "seed": seed,
        "scenario": spec.name,
        "gps_bounds": list(spec.gps_bounds()),
        "S": spec.S,
        "C": spec.C,
        "F": spec.F,
        "classes": list(classes),
        "counts": {k: len(v) for k, v in data.items()},
        "suite": {"n_normal": suite.n_normal, "n_point": suite.n_point, "n_contextual": suite.n_contextual,
                  "rarity_threshold": suite.rarity_threshold, "split": list(suite.split)},
        "hashes": {k: dataset_hash(v) for k, v in data.items()},
    }
    (out / DATA_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote %s", ", ".join(f"{k}={len(v)}" for k, v in data.items()))
    return 0


def _base_model_config(cfg: dict, manifest: dict, S: int, C: int, F: int) -> ModelConfig:
    bounds = manifest.get("gps_bounds")
    base = ModelConfig(S=S, C=C, F=F, gps_bounds=tuple(bounds) if bounds else ModelConfig().gps_bounds)
    overrides = cfg.get("model", {})
    if overrides:
        try:
            base = ModelConfig.from_dict({**base.to_dict(), **overrides})
        except (TypeError, KeyError) as exc:
            raise CliError(f"bad model config: {exc}") from exc
    return base


def cmd_train(args: argparse.Namespace) -> int:
    seed = _need_seed(args)
    cfg = _load_config(args.config)
    tc = _train_config(cfg, SUITE_TRAIN, seed)
    if args.epochs is not None:
        tc = replace(tc, max_epochs=args.epochs)
    data_dir = _data_dir(args.data, ("train", "val"))
    out = _writable_file(args.out)
    manifest = _read_manifest(data_dir)
    h_train, train_set = load_dataset(data_dir / "train.jsonl")
    _, val_set = load_dataset(data_dir / "val.jsonl")
    if not train_set or not val_set:
        raise CliError("training needs non-empty train.jsonl and val.jsonl")
    mc = variant_config(args.variant, _base_model_config(cfg, manifest, h_train.S, h_train.C, h_train.F))
    if not mc.variational:
        tc = replace(tc, kl_weight=0.0)
    hashes = {"train": dataset_hash(train_set), "val": dataset_hash(val_set)}
    for name, want in (manifest.get("hashes") or {}).items():
        if name in hashes and hashes[name] != want:
            raise CliError(f"{name}.jsonl does not match the hash recorded in {DATA_MANIFEST}")
    result = train(CADNet(mc, seed=seed), train_set, val_set, tc, out, hashes)
    m = result.manifest
    logger.info("best epoch %d of %d, val loss %.4f", m.best_epoch, m.stopped_epoch,
                min(m.val_loss) if m.val_loss else float("nan"))
    if result.diverged:
        logger.error("%s", m.diagnostic)
        return 1
    return 0


def _open_out(path: str | None) -> IO[str]:
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8", newline="\n")


def cmd_infer(args: argparse.Namespace) -> int:
    if not 0.0 <= args.threshold:
        raise CliError("--threshold must be non-negative")
    inp_path = Path(args.input)
    if not inp_path.is_file():
        raise CliError(f"{args.input} not found")
    if args.out not in (None, "-"):
        _writable_file(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    bad = 0
    with open(inp_path, encoding="utf-8") as src:
        header = header_from_json(src.readline())
        out = _open_out(args.out)
        try:
            for lineno, line in enumerate(src, start=2):
                if not line.strip():
                    continue
                try:
                    sample = sample_from_json(line, header, lineno)
                    if (sample.grid.S, sample.grid.C, sample.context.frame_activation.shape[0]) != (cfg.S, cfg.C, cfg.F):
                        raise ConfigurationError(
                            f"sample shape {sample.grid.S}x{sample.grid.S}x{sample.grid.C}, F="
                            f"{sample.context.frame_activation.shape[0]} does not fit model "
                            f"{cfg.S}x{cfg.S}x{cfg.C}, F={cfg.F}")
                    inp = make_inputs(stack([sample]), cfg, model.params.dtype)
                    xhat = model.reconstruct(inp)[0]
                    rep = score(inp.x[0], xhat, threshold=args.threshold, sample_id=sample.id)
                    out.write(json.dumps(rep.to_dict(header.classes)) + "\n")
                except (ParseError, ConfigurationError) as exc:
                    bad += 1
                    out.write(json.dumps({"line": lineno, "error": str(exc)}) + "\n")
                    logger.warning("line %d: %s", lineno, exc)
        finally:
            if out is not sys.stdout:
                out.close()
    return 1 if bad else 0


def cmd_eval(args: argparse.Namespace) -> int:
    data_dir = _data_dir(args.data, ("test", "point", "contextual"))
    model, _ = load_checkpoint(args.checkpoint)
    sets = {k: load_dataset(data_dir / f"{k}.jsonl")[1] for k in ("test", "point", "contextual")}
    if not sets["test"]:
        raise CliError("test.jsonl is empty")
    inputs = {k: make_inputs(stack(v), model.config) if v else None for k, v in sets.items()}
    gt = {k: [s.ground_truth for s in v] for k, v in sets.items()}
    metrics = evaluate(model, inputs["test"], inputs["point"], gt["point"], inputs["contextual"], gt["contextual"],
                       args.threshold)
    print(json.dumps({k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in metrics.items()},
                     indent=2, sort_keys=True))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    _need_seed(args)
    cfg = _load_config(args.config)
    suite = _suite_config(cfg, args)
    spec, rulebook = _world(args, cfg)
    out = _writable_dir(args.out)
    if suite.n_normal == 0:
        raise CliError("the ablation suite needs n_normal > 0")
    summary = run_experiment_suite(spec, rulebook, suite, out)
    print(summary.table())
    criteria = ordering_criteria(summary)
    for c in criteria:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    (out / "criteria.json").write_text(
        json.dumps([{"name": c.name, "passed": c.passed, "detail": c.detail} for c in criteria], indent=2) + "\n",
        encoding="utf-8")
    failed = any(r.failed for r in summary.rows) or not all(c.passed for c in criteria)
    return 1 if failed else 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from cadnet.model import check_gradients

    seed = args.seed if args.seed is not None else 0
    result = check_gradients(toy_config(args.variant), seed=seed, tol=args.tol)
    print(f"{args.variant}: {result.pass_fraction:.4%} of gradient entries within relative error {args.tol:g}")
    for pc in result.params:
        if not pc.passed:
            print(f"  {pc.name}: {pc.n_failed}/{pc.n_checked} failed, max rel error {pc.max_rel_error:.2e}")
    return 0 if result.pass_fraction >= args.min_pass else 1


# -- parser -----------------------------------------------------------------


def _csv(kind):
    def parse(text: str):
        try:
            return tuple(kind(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse


def _rows(text: str) -> tuple[str, ...]:
    rows = _csv(str)(text)
    unknown = [r for r in rows if r not in SUITE_ROWS]
    if unknown or not rows:
        raise argparse.ArgumentTypeError(f"rows must be a comma list from {', '.join(SUITE_ROWS)}")
    return rows


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (generate/train/ablate)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with model/train/suite overrides")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cadnet", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def world_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", help="scenario JSON (default: bundled scenario)")
        p.add_argument("--rulebook", help="rulebook JSON (default: bundled rulebook)")
        p.add_argument("--n-normal", dest="n_normal", type=int)
        p.add_argument("--n-point", dest="n_point", type=int)
        p.add_argument("--n-contextual", dest="n_contextual", type=int)

    p = sub.add_parser("generate", parents=[common], help="write train/val/test and anomaly sets")
    world_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--data", required=True, help="directory written by generate")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", default="full", choices=MODEL_VARIANTS)
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="score a dataset file, one JSON report per record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="dataset file (.jsonl)")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", help="report file (default: stdout)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="reconstruction error and anomaly accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory written by generate")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation table; exit 1 if an ordering fails")
    world_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", type=_rows, help="comma list of rows (default: all)")
    p.add_argument("--seeds", type=_csv(int), help="comma list of model seeds (default: seed, seed+1, seed+2)")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a toy model")
    p.add_argument("--variant", default="full", choices=MODEL_VARIANTS)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--min-pass", dest="min_pass", type=float, default=0.999)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in (("seed", None), ("config", None), ("verbose", 0)):
        if not hasattr(args, key):
            setattr(args, key, default)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cadnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CadnetError, OSError) as exc:
        print(f"cadnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
