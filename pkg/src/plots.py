#!/usr/bin/env python3
"""
結果繪圖
只從 CSV 讀資料，每個指標輸出一張 log-log 圖
"""

import logging
import os
import sys
from typing import List

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

from harness import read_csv  # noqa: E402


logger = logging.getLogger("Plots")


def plot_results(csv_path: str, out_dir: str) -> List[str]:
    rows = read_csv(csv_path)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(csv_path))[0]

    metrics = []
    for row in rows:
        if row["metric"] not in metrics:
            metrics.append(row["metric"])

    paths = []
    for metric in metrics:
        points = sorted((r["T"], r["estimate"], r["ci95"]) for r in rows if r["metric"] == metric)
        Ts = [p[0] for p in points]
        values = [p[1] for p in points]
        errors = [p[2] for p in points]

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.errorbar(Ts, values, yerr=errors, marker="o", capsize=3, label=metric)
        ax.set_xscale("log", base=2)
        if all(v > 0 for v in values):
            ax.set_yscale("log")
        else:
            logger.debug(f"{metric} 含非正值，y 軸改用線性刻度")
        ax.set_xlabel("T")
        ax.set_ylabel(metric)
        ax.set_title(f"{stem}: {metric}")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(loc="best")

        path = os.path.join(out_dir, f"{stem}_{metric.lower()}.png")
        fig.savefig(path, bbox_inches="tight", dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


def main():
    if len(sys.argv) < 2:
        print("用法: plots.py RESULTS.csv [OUT_DIR]", file=sys.stderr)
        sys.exit(2)
    out_dir = sys.argv[2] if len(sys.argv) > 2 else os.path.dirname(sys.argv[1]) or "."
    for path in plot_results(sys.argv[1], out_dir):
        print(path)


if __name__ == "__main__":
    main()
