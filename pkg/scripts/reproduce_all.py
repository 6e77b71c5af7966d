#!/usr/bin/env python3
"""Run the full desk-scale experiment battery end to end.

Trains every benchmark config in scripts/configs, then runs the headline
evaluation, the FKPP zero-shot cardinality sweep, the steady-state effort
scan for both effort penalties, and the mean-field gradient-consistency
ladder. Results land under --out (default: runs/).

Expect a few hours on a laptop-class CPU; individual pieces can be run by
hand with the `swarmpde` CLI instead (see README).
"""
import argparse
import subprocess
import sys
from pathlib import Path

HERE = Path(__file__).parent
CONFIGS = HERE / "configs"

TRAIN = ["heat1d", "fkpp1d", "fkpp1d_high_effort", "ks1d", "density2d",
         "heat2d", "heat2d_obstacles"]


def run(args):
    print("+", " ".join(str(a) for a in args), flush=True)
    subprocess.run([sys.executable, "-m", "swarmpde", *map(str, args)], check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--skip-2d", action="store_true",
                    help="skip the slower heat2d / obstacle runs")
    args = ap.parse_args()
    out = Path(args.out)

    names = [n for n in TRAIN if not (args.skip_2d and n.startswith("heat2d"))]
    for name in names:
        run(["train", "--config", CONFIGS / f"{name}.cfg",
             "--out", out / name, "--workers", args.workers])
        run(["eval", "--config", CONFIGS / f"{name}.cfg",
             "--checkpoint", out / name / "checkpoint.bin", "--out", out / name])

    run(["sweep", "--config", CONFIGS / "fkpp1d.cfg",
         "--checkpoint", out / "fkpp1d" / "checkpoint.bin",
         "--m", "20,30,60,90,150", "--plot-data", "--out", out / "fkpp1d"])
    for name in ("fkpp1d", "fkpp1d_high_effort"):
        run(["scan", "--config", CONFIGS / f"{name}.cfg",
             "--checkpoint", out / name / "checkpoint.bin",
             "--m", "10,20,40,80", "--plot-data", "--out", out / name])
    run(["gradcheck", "--config", CONFIGS / "heat1d.cfg",
         "--m-ladder", "8,16,32,64,128", "--out", out / "gradcheck"])
    run(["ablate", "--config", CONFIGS / "fkpp1d.cfg", "--kind", "physics",
         "--checkpoint", out / "fkpp1d" / "checkpoint.bin",
         "--override", "nu=0.0", "--override", "rho=8.0",
         "--out", out / "fkpp1d"])
    print("done; outputs under", out)


if __name__ == "__main__":
    main()
