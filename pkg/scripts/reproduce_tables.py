#!/usr/bin/env python3
"""Reproduce the published complexity numbers symbolically.

Prints parameter totals for the four reference architectures, the MAC totals
for the group-schedule ablation rows at 224x224, and the exact cost-ratio
grid of the grouped-attention equivalence. Everything is closed-form; no
tensors are executed. Runs in a few seconds.
"""
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from sret.accounting import count_macs, count_params, verify_theorem1
from sret.model import GroupSchedule, build_model, preset


def main() -> int:
    print("parameter totals (published targets in parentheses)")
    for name, target in [("deit_t", 5.7), ("sret_t", 4.76), ("sret_tl", 4.99), ("sret_s", 20.9)]:
        model = build_model(preset(name), np.random.default_rng(0))
        count = count_params(model)
        print(f"  {name:8s} {count / 1e6:7.3f} M  ({target} M, {100 * abs(count / 1e6 - target) / target:.2f}% off)")

    print("\nnaive recursion leaves the baseline parameter count untouched")
    for recs in (1, 2, 3):
        cfg = replace(
            preset("deit_t"), recursions_per_block=recs,
            group_schedule=GroupSchedule([[1] * recs]),
        )
        count = count_params(build_model(cfg, np.random.default_rng(0)))
        print(f"  deit_t x{recs} applications: {count:,} params, {12 * recs} block applications")

    print("\nMACs at 224x224 for the tiny pyramid under different group schedules")
    rows = [
        ("[[1, 1], [1, 1], [1, 1]]", [[1, 1], [1, 1], [1, 1]]),
        ("[[8, 8], [4, 4], [1, 1]]", [[8, 8], [4, 4], [1, 1]]),
        ("[[16, 2], [4, 2], [1, 1]]", [[16, 2], [4, 2], [1, 1]]),
        ("[[8, 2], [4, 1], [1, 1]]", [[8, 2], [4, 1], [1, 1]]),
    ]
    for label, stages in rows:
        cfg = replace(preset("sret_t"), group_schedule=GroupSchedule(stages))
        report = count_macs(cfg)
        print(f"  {label:28s} {report.total_macs / 1e9:.3f} B  "
              f"(attention core {report.attention_core_macs / 1e9:.3f} B)")

    print("\ncost ratio of N recursions of G-way sliced attention vs one global attention")
    grid = (1, 2, 4, 8)
    print("        " + "".join(f"G={g:<6}" for g in grid))
    for n in grid:
        cells = "".join(f"{str(verify_theorem1(196, 64, n, g).ratio):<8}" for g in grid)
        print(f"  N={n:<3} {cells}")
    print("  (ratio == N/G everywhere; N == G reproduces the global cost exactly)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
