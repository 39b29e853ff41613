"""Command-line entry point: gen-data, train, eval, dump-attention, sweep.

Every command writes its outputs plus one ``manifest.json`` into ``--out``.
Outputs are byte-identical across repeated runs with the same inputs; only the
manifest's timestamps and wall-clock fields change.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import Batch, GenConfig, generate_dataset, read_dataset, split_dataset, write_dataset
from .model import ABLATIONS, ARCHS, Model, ModelConfig, build_model, count_params, match_params
from .schema import FeatureSchema, default_schema
from .training import TrainConfig, dump_attention, evaluate, scaling_sweep, train

log = logging.getLogger("mdlrec")


class CliError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _read_json(path: str | None, what: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} file {p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"{what} file {p} must hold a JSON object")
    return raw


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: list[dict], path: Path) -> None:
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fields])


class Run:
    """Output directory bookkeeping: overwrite guard, output list and the manifest."""

    def __init__(self, args, names: list[str]):
        if args.out is None:
            raise CliError("--out is required")
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.paths = {n: self.out / n for n in names}
        clash = [str(p) for p in list(self.paths.values()) + [self.out / "manifest.json"] if p.exists()]
        if clash and not args.force:
            raise CliError(f"refusing to overwrite {clash[0]} (pass --force)")
        self.args = args
        self.started = _now()
        self.t0 = time.perf_counter()

    def __getitem__(self, name: str) -> Path:
        return self.paths[name]

    def finish(self, config: dict, seeds: dict, inputs: dict, schema_hash: str | None, extra: dict | None = None):
        missing = [str(p) for p in self.paths.values() if not p.exists()]
        if missing:
            raise CliError(f"outputs were not written: {missing}")
        manifest = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config": config,
            "seeds": seeds,
            "inputs": inputs,
            "outputs": {k: str(v) for k, v in self.paths.items()},
            "schema_hash": schema_hash,
            "version": __version__,
            "started": self.started,
            "finished": _now(),
            "wall_seconds": round(time.perf_counter() - self.t0, 3),
        }
        if extra:
            manifest.update(extra)
        _dump_json(manifest, self.out / "manifest.json")


def _load_batch(path: str | None, flag: str) -> Batch:
    if path is None:
        raise CliError(f"{flag} is required")
    if not Path(path).is_file():
        raise CliError(f"dataset not found: {path}")
    instances = read_dataset(path)
    if not instances:
        raise CliError(f"dataset {path} is empty")
    return Batch.from_instances(instances)


def _load_schema(path: str | None) -> FeatureSchema:
    if path is None:
        raise CliError("--schema is required")
    if not Path(path).is_file():
        raise CliError(f"schema file not found: {path}")
    return FeatureSchema.load(path)


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> None:
    raw = _read_json(args.config, "GenConfig")
    if args.seed is not None:
        raw["seed"] = args.seed
    gen = GenConfig.from_dict(raw)
    run = Run(args, ["data.jsonl", "train.jsonl", "eval.jsonl", "schema.json", "gen_config.json"])
    data = generate_dataset(gen)
    train_set, eval_set = split_dataset(data, args.eval_fraction, gen.seed)
    write_dataset(data, run["data.jsonl"])
    write_dataset(train_set, run["train.jsonl"])
    write_dataset(eval_set, run["eval.jsonl"])
    default_schema(gen).save(run["schema.json"])
    _dump_json(gen.to_dict(), run["gen_config.json"])
    labels = np.array([x.labels for x in data], dtype=float)
    groups = len({x.group for x in data})
    print(f"instances {len(data)}  groups {groups}  train {len(train_set)}  eval {len(eval_set)}")
    print("positive rates " + "  ".join(f"task{n}={r:.4f}" for n, r in enumerate(labels.mean(axis=0))))
    run.finish({"gen": gen.to_dict(), "eval_fraction": args.eval_fraction}, {"data": gen.seed}, {},
               default_schema(gen).hash())


def _model_config(args, raw: dict, schema: FeatureSchema) -> ModelConfig:
    cfg = dict(raw.get("model", {}))
    if args.arch is not None:
        cfg["arch"] = args.arch
    if args.ablate:
        cfg["ablations"] = list(args.ablate)
    if args.d is not None:
        cfg["d"] = args.d
    if args.layers is not None:
        cfg["layers"] = args.layers
    config = ModelConfig.from_dict(cfg)
    config.validate(schema)
    if args.match_params and config.arch != "mdl":
        target = count_params(ModelConfig(d=config.d, layers=config.layers, heads=config.heads,
                                          ffn_ratio=config.ffn_ratio), schema)
        config = match_params(config, schema, target)
    return config


def _train_config(args, raw: dict) -> TrainConfig:
    tc = TrainConfig.from_dict(dict(raw.get("train", {})))
    if args.seed is not None:
        tc.seed = args.seed
    return tc


def cmd_train(args) -> None:
    raw = _read_json(args.config, "run config")
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise CliError(f"run config has unknown keys {sorted(unknown)} (expected 'model' and 'train')")
    schema = _load_schema(args.schema)
    config = _model_config(args, raw, schema)
    tc = _train_config(args, raw)
    train_data = _load_batch(args.data, "--data")
    eval_data = _load_batch(args.eval_data, "--eval-data") if args.eval_data else None
    run = Run(args, ["model.mdl", "model.mdl.json", "history.csv", "metrics.json", "loss.png"])
    model = build_model(config, schema, tc.seed)
    log.info("built %s with %d parameters", config.arch, model.n_params)
    result = train(model, train_data, eval_data, tc)
    model.save(run["model.mdl"])
    write_csv(result.history, run["history.csv"])
    metrics = {k: v for k, v in result.metrics.items() if k != "train_seconds"}
    _dump_json(metrics, run["metrics.json"])
    from .plotting import plot_loss
    plot_loss(result.history, run["loss.png"])
    if eval_data is not None:
        print(f"mean QAUC {metrics['mean_qauc']:.4f}  params {model.n_params}")
    run.finish({"model": config.to_dict(), "train": asdict(tc)}, {"init": tc.seed, "shuffle": tc.seed},
               {"data": args.data, "eval_data": args.eval_data, "schema": args.schema}, schema.hash(),
               {"train_seconds": round(result.seconds, 3), "n_params": model.n_params})


def _load_model(args) -> Model:
    if args.model is None:
        raise CliError("--model is required")
    if not Path(args.model).is_file():
        raise CliError(f"model archive not found: {args.model}")
    schema = _load_schema(args.schema) if args.schema else None
    return Model.load(args.model, schema)


def cmd_eval(args) -> None:
    model = _load_model(args)
    data = _load_batch(args.data, "--data")
    model.schema.check_batch(data)
    run = Run(args, ["metrics.json"])
    metrics = evaluate(model, data)
    metrics["n_params"] = model.n_params
    _dump_json(metrics, run["metrics.json"])
    print(f"mean QAUC {metrics['mean_qauc']:.4f}")
    run.finish({"model": model.config.to_dict()}, {}, {"model": args.model, "data": args.data},
               model.schema.hash())


def cmd_dump_attention(args) -> None:
    model = _load_model(args)
    if model.config.arch != "mdl":
        raise CliError(f"dump-attention needs an 'mdl' model; {args.model} is {model.config.arch!r}")
    data = _load_batch(args.data, "--data")
    model.schema.check_batch(data)
    run = Run(args, ["attention.csv", "attention.png"])
    rows = dump_attention(model, data)
    write_csv(rows, run["attention.csv"])
    from .plotting import plot_attention
    scn = [s for s, _ in model.schema.scenarios] + (["global"] if model.config.global_token else [])
    plot_attention(rows, run["attention.png"], [g for g, _ in model.schema.groups],
                   {"task": [t for t, _ in model.schema.tasks], "scenario": scn})
    run.finish({"model": model.config.to_dict()}, {}, {"model": args.model, "data": args.data},
               model.schema.hash())


def cmd_sweep(args) -> None:
    raw = _read_json(args.config, "sweep config")
    if not raw.get("grid"):
        raise CliError("sweep config needs a non-empty 'grid' list of model settings")
    schema = _load_schema(args.schema)
    base = dict(raw.get("model", {}))
    grid = []
    for point in raw["grid"]:
        cfg = ModelConfig.from_dict({**base, **point})
        cfg.validate(schema)
        grid.append(cfg)
    tc = TrainConfig.from_dict(dict(raw.get("train", {})))
    seeds = [int(s) for s in raw.get("seeds", [0])]
    if args.seed is not None:
        seeds = [args.seed]
    train_data = _load_batch(args.data, "--data")
    eval_data = _load_batch(args.eval_data, "--eval-data")
    run = Run(args, ["sweep.csv", "sweep.png"])
    rows = scaling_sweep(grid, schema, train_data, eval_data, tc, seeds)
    write_csv(rows, run["sweep.csv"])
    from .plotting import plot_sweep
    plot_sweep(rows, run["sweep.png"])
    for r in rows:
        print(f"d={r['d']} L={r['layers']} seed={r['seed']} params={r['params']} mean QAUC {r['mean_qauc']:.4f}")
    run.finish({"grid": [c.to_dict() for c in grid], "train": asdict(tc)}, {"seeds": seeds},
               {"data": args.data, "eval_data": args.eval_data, "schema": args.schema}, schema.hash())


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdlrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help):
        p.add_argument("--config", help=config_help)
        p.add_argument("--schema", help="feature schema JSON")
        p.add_argument("--data", help="dataset JSONL")
        p.add_argument("--eval-data", help="evaluation dataset JSONL")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the seed(s) in the config")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and its train/eval split")
    common(p, "GenConfig JSON (defaults used when omitted)")
    p.add_argument("--eval-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write archive, history and metrics")
    common(p, "JSON with optional 'model' (ModelConfig) and 'train' (TrainConfig) objects")
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, help="repeatable")
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--match-params", action="store_true",
                   help="size a baseline's hidden width to the MDL parameter count at the same d and layers")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "evaluate a model archive"),
                             ("dump-attention", cmd_dump_attention, "export attention distributions")):
        p = sub.add_parser(name, help=text)
        common(p, "unused")
        p.add_argument("--model", help="model archive written by train")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="scaling sweep over (d, layers)")
    common(p, "JSON with 'grid' (list of model settings), optional 'model', 'train' and 'seeds'")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mdlrec {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
