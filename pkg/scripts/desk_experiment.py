#!/usr/bin/env python3
"""End-to-end desk-scale experiment on the synthetic dataset.

Trains the small pyramid with one-hot labels, distills a fresh student from
the resulting checkpoint with soft labels, trains a mixed-depth variant, and
slices the loss landscape around the trained weights. Artifacts (checkpoints,
metrics CSVs, landscape CSV) land in runs/desk/. Takes a couple of minutes.
"""
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from sret.cli import main as sret_main


def run(label: str, args: list[str]) -> None:
    print(f"\n=== {label}: sret {' '.join(args)}")
    code = sret_main(args)
    if code != 0:
        raise SystemExit(f"{label} failed with exit code {code}")


def main() -> int:
    out = ROOT / "runs" / "desk"
    common = ["--preset", "sret_desk", "--classes", "4", "--samples", "256",
              "--batch-size", "32", "--warmup", "3", "--label-smoothing", "0.0"]

    run("baseline", ["train", *common, "--seed", "0", "--epochs", "30",
                     "--out", str(out / "baseline")])
    run("soft distillation", ["train", *common, "--seed", "1", "--epochs", "15",
                              "--distill", str(out / "baseline" / "checkpoint.ckpt"),
                              "--out", str(out / "distilled")])
    run("mixed depth", ["train", *common, "--seed", "2", "--epochs", "15",
                        "--mixed-depth", "--out", str(out / "mixed_depth")])
    run("landscape", ["landscape",
                      "--checkpoint", str(out / "baseline" / "checkpoint.ckpt"),
                      "--radius", "1.0", "--grid", "11", "--seed", "0",
                      "--classes", "4", "--samples", "256",
                      "--out", str(out / "landscape.csv")])
    print(f"\nartifacts in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
