#!/usr/bin/env python3
"""Per-shift curves from a report breakdown.

Draws one line per (condition, head) across the shifts of a suite, averaged over
seeds: rotation angle on the x axis for the rotation suite, one tick per
corruption and severity for the corruption suite.
"""

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from pq_multilabel.data_io import read_csv  # noqa: E402


class ShiftCurveVisualizer:
    def __init__(self, breakdown_file, output_dir="output"):
        self.breakdown_file = Path(breakdown_file)
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

        self.meta, self.rows = read_csv(self.breakdown_file)

        self.colors = {
            "clean": "#2E7D32",
            "noisy_single": "#B71C1C",
            "human_multi": "#F9A825",
            "pq_multi": "#1565C0",
        }
        self.line_styles = {"vanilla": "-", "mc_dropout": "--", "duq": ":"}

    def curves(self, suite, metric):
        """Mean ``metric`` per shift for every (condition, head), in file order."""
        values = defaultdict(lambda: defaultdict(list))
        shifts = []
        for row in self.rows:
            if row["suite"] != suite:
                continue
            if row["shift"] not in shifts:
                shifts.append(row["shift"])
            key = (row["condition"], row["head"])
            values[key][row["shift"]].append(float(row[metric]))
        curves = {
            key: [float(np.mean(per_shift[s])) for s in shifts]
            for key, per_shift in values.items()
        }
        return shifts, curves

    def plot(self, suite="rotation", metric="entropy", output=None):
        shifts, curves = self.curves(suite, metric)
        if not shifts:
            raise ValueError(f"no {suite} rows in {self.breakdown_file}")

        fig, ax = plt.subplots(1, 1, figsize=(max(6, len(shifts) * 0.35), 4.5))
        x = np.arange(len(shifts))
        for (condition, head), ys in sorted(curves.items()):
            ax.plot(
                x,
                ys,
                self.line_styles.get(head, "-"),
                color=self.colors.get(condition, "black"),
                marker="o",
                markersize=3,
                label=f"{condition} / {head}",
            )

        if suite == "rotation":
            labels = [s.removeprefix("rotation_") for s in shifts]
            ax.set_xlabel("rotation angle (degrees)")
        else:
            labels = shifts
            ax.set_xlabel("corruption and severity")
        ax.set_xticks(x)
        rotation = 0 if suite == "rotation" else 90
        ax.set_xticklabels(labels, rotation=rotation, fontsize=8)
        ax.set_ylabel("entropy (bits)" if metric == "entropy" else "accuracy")
        ax.set_title(f"{suite.capitalize()} suite: {metric} per shift")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, ncol=2)
        plt.tight_layout()

        path = Path(output) if output else self.output_dir / f"{suite}_{metric}.png"
        plt.savefig(path, dpi=150, bbox_inches="tight", facecolor="white")
        plt.close(fig)
        return path


def main():
    """Main function to run the visualizer."""
    import argparse

    parser = argparse.ArgumentParser(description="Plot per-shift curves")
    parser.add_argument("--breakdown", default="runs/breakdown.csv")
    parser.add_argument("--output", default="output/plots")
    parser.add_argument(
        "--suite", default="rotation", choices=["rotation", "corruption"]
    )
    parser.add_argument("--metric", default="entropy", choices=["entropy", "accuracy"])
    args = parser.parse_args()

    visualizer = ShiftCurveVisualizer(args.breakdown, args.output)
    print(f"Saved plot to {visualizer.plot(args.suite, args.metric)}")


if __name__ == "__main__":
    main()
