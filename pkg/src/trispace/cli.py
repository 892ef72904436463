"""``trispace`` command line.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 runtime failure (for example a diverging encoder).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(raw: str, default):
    """Parse an override string into the type of the field's default."""
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, (list, tuple, dict)) or default is None:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = [_scalar(x.strip()) for x in raw.split(",")]
        if isinstance(default, (list, tuple)) and not isinstance(value, list):
            value = [value]
        return tuple(value) if isinstance(default, tuple) and isinstance(value, list) else value
    return raw


def _parse_overrides(tokens: list[str], config_cls) -> dict:
    """Turn ``--key value`` pairs into a dict, rejecting keys the config does not define."""
    defaults = {f.name: f for f in fields(config_cls)}
    inst = config_cls()
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"missing value for {tok}")
            raw = tokens[i + 1]
            i += 2
        if key not in defaults:
            raise UsageError(f"unknown option --{key.replace('_', '-')}")
        try:
            out[key] = _coerce(raw, getattr(inst, key))
        except ValueError as exc:
            raise UsageError(f"bad value for --{key.replace('_', '-')}: {exc}") from exc
    return out


def _load_config(path, overrides: dict, config_cls, seed_field: str | None = "seed"):
    from .pipeline import ConfigError

    data = {}
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a flat JSON object")
    data.update(overrides)
    if seed_field and seed_field not in data and os.environ.get("TRISPACE_SEED"):
        try:
            data[seed_field] = int(os.environ["TRISPACE_SEED"])
        except ValueError as exc:
            raise ConfigError("TRISPACE_SEED must be an integer") from exc
    known = {f.name for f in fields(config_cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = config_cls(**data)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def _config_help(config_cls) -> str:
    inst = config_cls()
    names = ", ".join(f"--{f.name.replace('_', '-')} ({getattr(inst, f.name)!r})" for f in fields(config_cls))
    return f"any config field can be overridden with --key value: {names}"


# ---------------------------------------------------------------- commands


def cmd_generate(args, extra):
    from .synthgen import SynthConfig, generate, write_dataset

    cfg = _load_config(args.config, _parse_overrides(extra, SynthConfig), SynthConfig)
    trajs = generate(cfg)
    points, labels = write_dataset(trajs, args.out)
    print(f"wrote {len(trajs)} trajectories to {points} and {labels}")


def _experiment_config(args, extra):
    from .pipeline import ExperimentConfig

    return _load_config(args.config, _parse_overrides(extra, ExperimentConfig), ExperimentConfig)


def cmd_train(args, extra):
    from .pipeline import load_dataset, run_experiment

    cfg = _experiment_config(args, extra)
    res = run_experiment(cfg, load_dataset(args.data), args.out)
    print(res.metrics.format_table())
    print(f"run directory: {res.run_dir}")


def cmd_predict(args, extra):
    from .pipeline import load_dataset, load_run, predict, write_predictions

    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    run = load_run(args.model)
    ids, pred_norm, pred_sec = predict(run, load_dataset(args.data))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        write_predictions(ids, pred_norm, pred_sec, fh)
    print(f"wrote {len(ids)} predictions to {args.out}")


def cmd_evaluate(args, extra):
    from .pipeline import evaluate_files, load_run

    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    label_norm = load_run(args.model).model.label_norm if args.model else None
    with open(args.pred, newline="") as p, open(args.labels, newline="") as l:
        rep = evaluate_files(p, l, label_norm)
    print(rep.format_table())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            rep.to_csv(fh)


def cmd_ablate(args, extra):
    from .pipeline import ablate, load_dataset
    from .synthgen import SynthConfig, generate

    cfg = _experiment_config(args, extra)
    if args.data:
        trajs = load_dataset(args.data)
        data_for_seed = lambda seed: trajs  # noqa: E731
    else:
        n = args.synthetic
        data_for_seed = lambda seed: generate(SynthConfig(n_trajectories=n, seed=seed, cap=cfg.cap))  # noqa: E731
    result = ablate(cfg, data_for_seed, args.out)
    print(f"{'variant':<16}{'mean test MAE':>16}{'std':>12}")
    for name, (mean, std) in result["summary"].items():
        print(f"{name:<16}{mean:>16.6g}{std:>12.3g}")


def cmd_transfer(args, extra):
    from .pipeline import domain_transfer, load_dataset

    cfg = _experiment_config(args, extra)
    train = [r for r in args.train_regions.split(",") if r]
    test = [r for r in args.test_regions.split(",") if r]
    res = domain_transfer(cfg, load_dataset(args.data), train, test, args.out)
    print(res.metrics.format_table())
    print(f"run directory: {res.run_dir}")


def cmd_inspect_graph(args, extra):
    from .pipeline import resolve_run_dir

    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    path = resolve_run_dir(args.model) / "graph.csv"
    if not path.exists():
        from .trajio import DataError

        raise DataError(f"{path.parent} has no relation graph (feature diffusion was disabled)")
    text = path.read_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import ExperimentConfig
    from .synthgen import SynthConfig

    parser = _Parser(prog="trispace", description="Truck arrival-time estimation from GPS trajectories.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    exp_help = _config_help(ExperimentConfig)

    p = sub.add_parser("generate", help="write a synthetic dataset", epilog=_config_help(SynthConfig))
    p.add_argument("--config", help="flat JSON synthetic-data config")
    p.add_argument("--out", required=True, help="output directory for points.csv and labels.csv")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit all stages and write a run directory", epilog=exp_help)
    p.add_argument("--data", required=True, help="directory with points.csv and labels.csv")
    p.add_argument("--out", required=True, help="parent directory for the run")
    p.add_argument("--config", help="flat JSON experiment config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score trajectories with a trained run")
    p.add_argument("--model", required=True, help="run directory (or its parent)")
    p.add_argument("--data", required=True, help="directory with points.csv")
    p.add_argument("--out", required=True, help="predictions CSV to write")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics of a predictions file against labels")
    p.add_argument("--pred", required=True, help="predictions CSV (or a label file)")
    p.add_argument("--labels", required=True, help="labels CSV")
    p.add_argument("--model", help="run directory, adds metrics on normalized labels")
    p.add_argument("--out", help="also write the metrics CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare full model with its ablations over seeds", epilog=exp_help)
    p.add_argument("--data", help="dataset directory; synthetic data per seed when omitted")
    p.add_argument("--synthetic", type=int, default=500, help="synthetic trajectories per seed (default 500)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat JSON experiment config")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("transfer", help="train on some regions, test on others", epilog=exp_help)
    p.add_argument("--data", required=True, help="dataset directory (labels need a region column)")
    p.add_argument("--train-regions", required=True, help="comma-separated region names")
    p.add_argument("--test-regions", required=True, help="comma-separated region names")
    p.add_argument("--out", required=True, help="parent directory for the run")
    p.add_argument("--config", help="flat JSON experiment config")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("inspect-graph", help="dump the relation graph edge list of a run")
    p.add_argument("--model", required=True, help="run directory (or its parent)")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_inspect_graph)
    return parser


def main(argv=None) -> int:
    from .learn import TrainingDiverged
    from .pipeline import StageError
    from .trajio import DataError

    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args, extra)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, TrainingDiverged):
            return EXIT_RUNTIME
        return EXIT_DATA if isinstance(exc.cause, ValueError) else EXIT_RUNTIME
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # last-resort mapping for the documented exit code
        logging.getLogger(__name__).debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
