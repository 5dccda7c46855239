"""``mdunet`` command line: synth, train, eval, predict, inspect, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 invalid config or
arguments, 3 data errors (unreadable containers, modality mismatch), 4
divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import Case, MDTError, load_dataset, save_case, save_dataset, synth_dataset
from .network import ConfigError, NetworkConfig, build_network, connectivity_graph, network_parameter_count, shape_table
from .train import DivergenceError, TrainConfig, evaluate, load_checkpoint, predict_case, save_checkpoint, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
CONFIG_KEYS = ("network", "train", "seed", "data", "val", "out")


class DataError(Exception):
    pass


# --- config ----------------------------------------------------------------------


def load_config(path) -> tuple[NetworkConfig, TrainConfig, int]:
    """Parse a run config; ``MDU_SEED`` in the environment wins over any seed in the file."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"not valid JSON: {e}") from None
    return resolve_config(raw)


def resolve_config(raw: dict) -> tuple[NetworkConfig, TrainConfig, int]:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    for key in raw:
        if key not in CONFIG_KEYS:
            raise ConfigError(key, f"unknown key (expected some of {list(CONFIG_KEYS)})")
    for key in ("network", "train"):
        if not isinstance(raw.get(key, {}), dict):
            raise ConfigError(key, "must be an object")
    net_d = dict(raw.get("network", {}))
    train_d = dict(raw.get("train", {}))
    seed = raw.get("seed", train_d.get("seed", net_d.get("seed", 0)))
    env = os.environ.get("MDU_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError("MDU_SEED", f"must be an integer, got {env!r}") from None
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", f"must be an int, got {seed!r}")
    net_d["seed"] = train_d["seed"] = seed
    return NetworkConfig.from_dict(net_d), TrainConfig.from_dict(train_d), seed


def run_manifest(net: NetworkConfig, tc: TrainConfig, seed: int, data, val, out) -> dict:
    return {
        "network": net.to_dict(),
        "train": tc.to_dict(),
        "seed": seed,
        "data": str(data),
        "val": None if val is None else str(val),
        "out": str(out),
    }


def _load(directory) -> list[Case]:
    try:
        return load_dataset(directory)
    except (MDTError, FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from None


def _check_modalities(cases, net: NetworkConfig) -> None:
    for c in cases:
        if tuple(c.modalities) != tuple(net.modalities):
            raise DataError(f"case {c.case_id}: modalities {list(c.modalities)} but the network expects {list(net.modalities)}")
        H, W = c.shape[1:]
        if (H, W) != tuple(net.input_spatial):
            raise DataError(f"case {c.case_id}: slices are {H}x{W}, network expects {net.input_spatial}")


# --- commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cases = synth_dataset(
        args.seed,
        args.cases,
        size=tuple(args.size),
        depth=args.depth,
        num_modalities=args.modalities,
        conjunctive=not args.independent,
        id_offset=args.id_offset,
    )
    save_dataset(args.out, cases)
    print(f"wrote {len(cases)} cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    net_cfg, tc, seed = load_config(args.config)
    train_cases = _load(args.data)
    val_cases = _load(args.val) if args.val else None
    _check_modalities(train_cases + (val_cases or []), net_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = run_manifest(net_cfg, tc, seed, args.data, args.val, out)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def report(rec):
        if not args.quiet:
            print(f"epoch {rec.epoch:4d}  loss {rec.loss:.5f}  lr {rec.lr:.1e}  val dsc {rec.val_dsc:.3f}", flush=True)

    net = build_network(net_cfg)
    net, log = train(net, train_cases, tc, val_cases, checkpoint_dir=out, on_epoch=report)
    (out / "log.csv").write_text(log.to_csv())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "wall_time_s"])
    for r in log.records:
        w.writerow([r.epoch, f"{r.wall_time:.3f}"])
    (out / "timing.csv").write_text(buf.getvalue())
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except ConfigError:
        raise
    except (MDTError, ValueError, KeyError) as e:
        raise DataError(f"checkpoint {path}: {e}") from None


def cmd_eval(args) -> int:
    net = _checkpoint(args.checkpoint)
    cases = _load(args.data)
    _check_modalities(cases, net.config)
    missing = [c.case_id for c in cases if c.mask is None]
    if missing:
        raise DataError(f"cases without reference masks: {missing}")
    report = evaluate(net, cases)
    summary = report.summary()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return EXIT_OK


def write_pgm(path, mask: np.ndarray) -> None:
    h, w = mask.shape
    img = (np.asarray(mask, dtype=np.uint8) * 255).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img)


def cmd_predict(args) -> int:
    net = _checkpoint(args.checkpoint)
    cases = _load(args.data)
    _check_modalities(cases, net.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in cases:
        pred = predict_case(net, c)
        save_case(out / f"{c.case_id}_pred.mdt", Case(c.case_id, {}, pred, c.spacing))
        if args.pgm:
            for d, sl in enumerate(pred):
                write_pgm(out / f"{c.case_id}_s{d:03d}.pgm", sl)
    print(f"wrote predictions for {len(cases)} cases to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    net_cfg, _, _ = load_config(args.config)
    table = shape_table(net_cfg)
    graph = connectivity_graph(net_cfg)
    count = network_parameter_count(net_cfg)
    text = table.to_text()
    print(text, end="")
    print(f"\nParameters: {count}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "shapes.txt").write_text(text)
        (out / "shapes.csv").write_text(table.to_csv())
        (out / "connectivity.txt").write_text(graph.to_text())
        (out / "params.txt").write_text(f"{count}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = list(args.op or [])
    for name in ops:
        if name not in gradcheck.OP_CASES:
            raise ConfigError("--op", f"unknown op {name!r}; choose from {sorted(gradcheck.OP_CASES)}")
    if args.all or not (ops or args.full_network_small):
        ops = sorted(gradcheck.OP_CASES)
    results = [gradcheck.check_op(name, args.instances, args.seed) for name in ops]
    if args.full_network_small or args.all:
        results.append(gradcheck.check_network_small(args.seed, fusion=args.fusion))
    for r in results:
        print(r.line(), flush=True)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# --- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdunet", description="Multi-stream dense U-Net for multi-modal lesion segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic multi-modal cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--cases", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--depth", type=int, default=1, help="slices per case")
    s.add_argument("--modalities", type=int, default=2)
    s.add_argument("--id-offset", type=int, default=0)
    s.add_argument("--independent", action="store_true", help="lesion visible in every modality on its own")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a network from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--val", help="held-out cases for per-epoch validation")
    s.add_argument("--out", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on labelled cases")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="write predicted masks")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pgm", action="store_true", help="also write one PGM image per slice")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("inspect", help="shape table, connectivity and parameter count")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--op", action="append", help="op name (repeatable)")
    s.add_argument("--full-network-small", action="store_true")
    s.add_argument("--all", action="store_true", help="every op plus the small network")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fusion", default="hyperdense", choices=("early", "late", "hyperdense"))
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
