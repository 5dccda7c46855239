"""Train hyperdense and early fusion on the synthetic conjunctive cohort.

    python3 scripts/toy_experiment.py [--epochs 30] [--out results/toy]
"""

import argparse
from pathlib import Path

from mdunet.experiments import ToyExperiment, moving_average, run_toy


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fusions", nargs="+", default=["hyperdense", "early"])
    p.add_argument("--out", type=Path)
    args = p.parse_args()

    exp = ToyExperiment(seed=args.seed, epochs=args.epochs, decay_epoch=args.epochs)
    finals = {}
    for fusion in args.fusions:
        print(f"== {fusion}")
        log = run_toy(exp, fusion, on_epoch=lambda r: print(
            f"{r.epoch:3d}  loss {r.loss:.4f}  val dsc {r.val_dsc:.3f}  mhd {r.val_mhd:6.2f}  vs {r.val_vs:.3f}  {r.wall_time:5.1f}s",
            flush=True,
        ))
        ma = moving_average(log.losses)[:10]
        print(f"5-epoch MA loss over epochs 1-10 strictly decreasing: {all(b < a for a, b in zip(ma, ma[1:]))}")
        finals[fusion] = log.records[-1].val_dsc
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / f"{fusion}_log.csv").write_text(log.to_csv(with_time=True))
    print()
    for fusion, d in finals.items():
        print(f"{fusion:<12} final val DSC {d:.3f}")


if __name__ == "__main__":
    main()
