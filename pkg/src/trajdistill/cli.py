"""Batch command line: buffer -> distill -> eval -> report.

Every stage reads the same INI config and writes into an output directory.
Exit codes: 0 success, 2 bad inputs (config, file formats, shapes), 3
runtime failure (divergence, numeric trouble, broken state).
"""

from __future__ import annotations

import argparse
import json
import os
import pickle
import sys
import time

import numpy as np

from . import report as report_mod
from .config import RunConfig, parse_config
from .data import init_synthetic, load_dataset, load_synthetic, save_synthetic
from .engine import Distiller
from .evaluation import evaluate
from .exceptions import (
    ConfigError,
    DegenerateTrajectoryError,
    DimensionError,
    EngineError,
    FormatError,
    IngestionError,
    InitError,
    PartitionError,
    PolicyError,
    ScheduleError,
    SpecError,
)
from .metrics import MetricsWriter
from .models import ModelSpec
from .trajectories import build_buffer, load_buffer, save_buffer

_USAGE_ERRORS = (
    ConfigError,
    FormatError,
    IngestionError,
    SpecError,
    PolicyError,
    PartitionError,
    InitError,
    ScheduleError,
    DimensionError,
)


def _load_train(cfg: RunConfig):
    d = cfg["dataset"]
    return load_dataset(d["train_path"], d["format"], image_shape=cfg.image_shape)


def _load_test(cfg: RunConfig, train):
    d = cfg["dataset"]
    if not d["test_path"]:
        raise ConfigError("dataset.test_path is required for this command")
    return load_dataset(d["test_path"], d["format"], image_shape=cfg.image_shape,
                        stats=train.stats)


def _model_spec(cfg: RunConfig, dataset, arch: str | None = None) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(
        arch=arch or m["arch"], depth=m["depth"], width=m["width"],
        input_shape=tuple(int(v) for v in dataset.images.shape[1:]),
        classes=dataset.classes,
    )


def _out_dir(cfg: RunConfig) -> str:
    out = cfg["run"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_buffer(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    out = _out_dir(cfg)
    train = _load_train(cfg)
    spec = _model_spec(cfg, train)
    t0 = time.monotonic()
    buf = build_buffer(train.images, train.labels, spec, cfg.train_hyper(),
                       experts=cfg["buffer"]["experts"], seed=cfg["run"]["seed"],
                       threads=cfg["run"]["threads"])
    wall = time.monotonic() - t0
    path = os.path.join(out, "trajectories.tjb")
    save_buffer(buf, path)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump({
            "command": "buffer",
            "config_hash": cfg.config_hash,
            "wall_time_s": round(wall, 3),
            "experts": buf.experts,
            "steps": buf.steps,
            "param_count": int(buf.snapshots.shape[2]),
            "final_accuracies": [float(a) for a in buf.final_accs],
            "trajectories": path,
        }, f, indent=2)
        f.write("\n")
    print(f"wrote {path}: {buf.experts} experts x {buf.steps} steps, "
          f"mean final accuracy {np.mean(buf.final_accs):.4f}")
    return 0


def cmd_distill(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    out = _out_dir(cfg)
    dcfg = cfg.distill_config()
    buf = load_buffer(args.trajectories)
    train = _load_train(cfg)
    syn0 = init_synthetic(train, dcfg.ipc, dcfg.init, seed=cfg["run"]["seed"],
                          config_hash=cfg.config_hash)
    distiller = Distiller(buf, syn0, dcfg, policy=cfg.augment_policy(),
                          seed=cfg["run"]["seed"])

    metrics_path = os.path.join(out, "metrics.csv")
    ckpt_path = os.path.join(out, "checkpoint.pkl")
    syn_path = os.path.join(out, "synthetic.synd")

    if args.resume:
        if not os.path.exists(ckpt_path):
            raise ConfigError(f"--resume: no checkpoint at {ckpt_path}")
        with open(ckpt_path, "rb") as f:
            ckpt = pickle.load(f)
        if ckpt.get("config_hash") != cfg.config_hash:
            raise ConfigError(
                f"--resume: checkpoint was written by config "
                f"{ckpt.get('config_hash')}, this config is {cfg.config_hash}"
            )
        distiller.load_state(ckpt["state"])
        writer = MetricsWriter(metrics_path, cfg.config_hash,
                               resume_rows=ckpt["rows"])
    else:
        writer = MetricsWriter(metrics_path, cfg.config_hash)

    def checkpoint(rows: int) -> None:
        blob = {"config_hash": cfg.config_hash, "rows": rows,
                "state": distiller.state()}
        tmp = ckpt_path + ".tmp"
        with open(tmp, "wb") as f:
            pickle.dump(blob, f)
        os.replace(tmp, ckpt_path)

    def on_record(rec) -> None:
        writer.write(rec)
        if dcfg.checkpoint_every and rec.iteration % dcfg.checkpoint_every == 0:
            checkpoint(rec.iteration)
        if dcfg.save_every and rec.iteration % dcfg.save_every == 0:
            save_synthetic(distiller.current_synthetic(), syn_path)

    distiller.run(on_record=on_record)
    save_synthetic(distiller.current_synthetic(), syn_path)
    checkpoint(distiller.iteration)
    print(f"distilled {distiller.iteration} iterations; wrote {syn_path} "
          f"and {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    out = _out_dir(cfg)
    syn = load_synthetic(args.synthetic)
    train = _load_train(cfg)
    test = _load_test(cfg, train)
    e = cfg["eval"]
    policy = cfg.augment_policy()
    seed = cfg["run"]["seed"]

    report_rows = []
    summaries = []
    for arch in cfg.eval_archs():
        spec = _model_spec(cfg, test, arch=arch)
        res = evaluate(syn, test, spec, runs=e["runs"], epochs=e["epochs"],
                       lr=e["lr"], momentum=e["momentum"],
                       batch_size=e["batch_size"], policy=policy, seed=seed,
                       threads=cfg["run"]["threads"])
        for run, acc in zip(res.seeds, res.accuracies):
            report_rows.append((arch, run, seed, acc))
        summaries.append((arch, res.runs, res.mean, res.std))
        print(f"{arch}: {res.mean:.4f} +/- {res.std:.4f} over {res.runs} runs"
              + (f" ({len(res.failures)} diverged)" if res.failures else ""))

    report_path = os.path.join(out, "report.csv")
    with open(report_path, "w") as f:
        f.write(f"# config_hash={cfg.config_hash}\n")
        f.write("arch,run,seed,accuracy\n")
        for arch, run, sd, acc in report_rows:
            f.write(f"{arch},{run},{sd},{repr(float(acc))}\n")
    summary_path = os.path.join(out, "summary.csv")
    with open(summary_path, "w") as f:
        f.write(f"# config_hash={cfg.config_hash}\n")
        f.write("arch,runs,mean_accuracy,std_accuracy\n")
        for arch, runs, mean, std in summaries:
            f.write(f"{arch},{runs},{repr(float(mean))},{repr(float(std))}\n")
    print(f"wrote {report_path} and {summary_path}")
    return 0


def cmd_report(args) -> int:
    rows = report_mod.aggregate(args.metrics, args.out)
    print(f"aggregated {len(args.metrics)} file(s) over {len(rows)} iterations "
          f"into {os.path.join(args.out, 'aggregate.csv')}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["run.seed"] = str(args.seed)
    if getattr(args, "threads", None) is not None:
        out["run.threads"] = str(args.threads)
    if getattr(args, "out", None) is not None:
        out["run.out_dir"] = args.out
    return out


def _add_common(p) -> None:
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=int, default=None, help="override run.seed")
    p.add_argument("--threads", type=int, default=None, help="override run.threads")
    p.add_argument("--out", default=None, help="override run.out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajdistill",
        description="trajectory-matching dataset distillation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("buffer", help="train experts and record trajectories")
    _add_common(p)
    p.set_defaults(fn=cmd_buffer)

    p = sub.add_parser("distill", help="learn a synthetic set from a buffer")
    p.add_argument("trajectories", help="trajectory buffer file (.tjb)")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output directory")
    _add_common(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="train fresh nets on a synthetic set")
    p.add_argument("synthetic", help="synthetic set file (.synd)")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="aggregate metrics CSVs and plot")
    p.add_argument("metrics", nargs="+", help="metrics.csv files to combine")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DegenerateTrajectoryError, EngineError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
