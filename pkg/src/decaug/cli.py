"""Command-line front end: gen-data, train, sweep, evaluate, saliency, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import analysis, datagen, mnist
from .config import ConfigError, ExperimentSpec, load_config, load_preset, parse_value, run_id, sweep_cells
from .config import with_overrides
from .model import load_checkpoint
from .trainer import TrainingDiverged, evaluate, train

log = logging.getLogger("decaug")

ENV_OUTPUT_DIR = "DECAUG_OUTPUT_DIR"
ENV_THREADS = "DECAUG_NUM_THREADS"


def build_bundle(spec: ExperimentSpec, seed: int) -> datagen.DatasetBundle:
    ds = spec.dataset
    if ds.kind == "two_factor":
        return datagen.build_two_factor(ds.two_factor, seed)
    images, digits = mnist.load(ds.source_dir, ds.source_split)
    return datagen.build_colored_mnist(images, digits, ds.train_envs, ds.test_env, seed)


def _model_cfg(spec: ExperimentSpec, bundle: datagen.DatasetBundle, seed: int):
    return spec.model_config(bundle.input_dim, bundle.num_categories, bundle.num_contexts, seed)


def run_one(spec: ExperimentSpec, seed: int, out_root: Path, label: str | None = None, force: bool = False) -> dict:
    """Train one (config, seed) cell under ``out_root/runs/<id>``; skip finished runs."""
    rid = run_id(spec, seed)
    run_dir = out_root / "runs" / rid
    record_path = run_dir / "record.json"
    if record_path.exists() and not force:
        log.info("skipping %s (already complete)", rid)
        return json.loads(record_path.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(spec.dump())
    bundle = build_bundle(spec, seed)
    mc = _model_cfg(spec, bundle, seed)
    _, record = train(
        bundle, mc, spec.train_config(seed),
        metrics_path=run_dir / "metrics.jsonl",
        checkpoint_path=run_dir / "checkpoint",
        checkpoint_every=spec.checkpoint_every,
    )
    out = {"run_id": rid, "label": label or spec.name, "name": spec.name, **record.to_dict()}
    record_path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    log.info("%s: test acc %.4f", rid, record.test_accuracy)
    return out


def _run_cell(args):
    spec, seed, out_root, label, force = args
    _set_threads()
    return run_one(spec, seed, Path(out_root), label, force)


def _set_threads() -> None:
    n = os.environ.get(ENV_THREADS)
    if n:
        torch.set_num_threads(int(n))


def _spec_from_args(args) -> ExperimentSpec:
    if args.config and args.preset:
        raise ConfigError("config", "give either --config or --preset, not both")
    if args.config:
        spec = load_config(args.config)
    elif args.preset:
        spec = load_preset(args.preset)
    else:
        raise ConfigError("config", "one of --config or --preset is required")
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected key=value")
        overrides[key] = parse_value(value)
    if overrides:
        spec = with_overrides(spec, overrides)
    if getattr(args, "seeds", None):
        spec.seeds = [int(s) for s in args.seeds.split(",")]
    return spec


def _out_root(args, spec: ExperimentSpec | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(ENV_OUTPUT_DIR):
        return Path(os.environ[ENV_OUTPUT_DIR])
    return Path(spec.output_dir if spec else "out")


def cmd_gen_data(args) -> int:
    spec = _spec_from_args(args)
    seed = args.seed if args.seed is not None else spec.seeds[0]
    bundle = build_bundle(spec, seed)
    target = Path(args.dest) if args.dest else _out_root(args, spec) / "data" / f"{spec.name}-s{seed}"
    datagen.save_bundle(bundle, target)
    print(f"wrote {target} ({sum(len(e) for e in bundle.environments)} examples)")
    return 0


def _execute(cells, seeds, out_root: Path, workers: int, force: bool) -> list[dict]:
    jobs = [(spec, seed, str(out_root), label, force) for label, spec in cells for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    if args.seed is not None:
        spec.seeds = [args.seed]
    out_root = _out_root(args, spec)
    results = _execute([(spec.name, spec)], spec.seeds, out_root, 1, args.force)
    for r in results:
        print(f"{r['run_id']}: train {r['train_accuracy']} test {r['test_accuracy']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    for item in args.axis or []:
        name, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(item, "axis must look like name=v1,v2,...")
        spec.sweep[name] = [parse_value(v) for v in values.split(",")]
    if not spec.sweep:
        raise ConfigError("sweep", "no sweep axes given")
    spec = with_overrides(spec, {})  # re-validate the axes
    cells = sweep_cells(spec)
    out_root = _out_root(args, spec)
    results = _execute(cells, spec.seeds, out_root, args.workers, args.force)
    print(f"{len(results)} runs ({len(cells)} cells x {len(spec.seeds)} seeds)")
    labels = [label for label, _ in cells]
    aggs = [analysis.aggregate([r["test_accuracy"] for r in results if r["label"] == lb], lb) for lb in labels]
    print(analysis.render_table(aggs), end="")
    return 0


def _load_run(run_dir: Path):
    spec = load_config(run_dir / "config.snapshot")
    record = json.loads((run_dir / "record.json").read_text()) if (run_dir / "record.json").exists() else {}
    params = load_checkpoint(run_dir / "checkpoint")
    return spec, record, params


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    spec, record, params = _load_run(run_dir)
    seed = record.get("seed", spec.seeds[0])
    bundle = datagen.load_bundle(args.data) if args.data else build_bundle(spec, seed)
    predict_with = "concat" if spec.train.weights.concat_enabled or spec.train.method != "decaug" else "category"
    for env in bundle.environments:
        print(f"{env.name}\t{evaluate(params, env, predict_with):.4f}")
    return 0


def cmd_saliency(args) -> int:
    run_dir = Path(args.run)
    spec, record, params = _load_run(run_dir)
    if params.config.architecture != "decaug":
        raise ConfigError("run", "saliency needs a two-branch (decaug) model")
    seed = record.get("seed", spec.seeds[0])
    bundle = build_bundle(spec, seed)
    env = bundle.test_env
    idx = np.arange(min(args.n, len(env)))
    x = env.inputs[idx]
    cat = analysis.saliency(params, x, env.y[idx], "category")
    ctx = analysis.saliency(params, x, env.c[idx], "context")
    out = Path(args.dest) if args.dest else run_dir / "saliency.png"
    analysis.save_saliency_grid(out, x, cat, ctx, bundle.input_shape)
    print(f"wrote {out}")
    return 0


def collect_records(root: Path) -> list[dict]:
    return [json.loads(p.read_text()) for p in sorted((root / "runs").glob("*/record.json"))]


def cmd_report(args) -> int:
    root = Path(args.dir) if args.dir else _out_root(args)
    records = collect_records(root)
    if not records:
        print(f"error: no run records found under {root}", file=sys.stderr)
        return 1
    labels = sorted({r["label"] for r in records})
    aggs = [analysis.aggregate([r["test_accuracy"] for r in records if r["label"] == lb], lb) for lb in labels]
    report_dir = root / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_summary_csv(aggs, report_dir / "summary.csv")
    text = analysis.render_table(aggs)
    (report_dir / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decaug", description="Decomposed-feature OoD training experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def spec_args(sp):
        sp.add_argument("--config", help="YAML experiment file")
        sp.add_argument("--preset", help="name of a shipped preset")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
        sp.add_argument("--out", help=f"output root (default: ${ENV_OUTPUT_DIR} or the config's output_dir)")

    sp = sub.add_parser("gen-data", help="generate and save a dataset bundle")
    spec_args(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dest", help="bundle directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train every seed of a config")
    spec_args(sp)
    sp.add_argument("--seed", type=int, help="run only this seed")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--force", action="store_true", help="rerun completed runs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="run a grid of configs x seeds")
    spec_args(sp)
    sp.add_argument("--axis", action="append", metavar="NAME=V1,V2", help="sweep axis")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("evaluate", help="accuracy of a finished run on every environment")
    sp.add_argument("--run", required=True, help="run directory")
    sp.add_argument("--data", help="saved bundle directory (default: regenerate from the snapshot)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("saliency", help="export a saliency grid for a finished run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--dest")
    sp.set_defaults(func=cmd_saliency)

    sp = sub.add_parser("report", help="aggregate run records into summary tables")
    sp.add_argument("--dir", help="output root holding runs/")
    sp.add_argument("--out", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_report)
    return p


def run_command(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _set_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, TrainingDiverged, mnist.MNISTUnavailable, datagen.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
