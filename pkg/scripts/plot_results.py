"""Plot accuracy-vs-shots curves and head-weight histograms from a run directory.

    python scripts/plot_results.py runs/<plan hash> [--out figures]
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_curves(run: Path, out: Path):
    curves = pd.read_csv(run / "curves.csv")
    for target, df in curves.groupby("target"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode, d in df.groupby("mode"):
            d = d.sort_values("shots")
            ax.errorbar(d["shots"], d["mean_accuracy"], yerr=d["standard_error"], marker="o", capsize=3, label=mode)
        ax.set_xscale("log")
        ax.set_xlabel("labeled windows per class")
        ax.set_ylabel("test accuracy")
        ax.set_title(target)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"curve_{target.replace('@', '__')}.png", dpi=120)
        plt.close(fig)


def plot_histograms(run: Path, out: Path):
    for path in sorted((run / "histograms").glob("*.csv")):
        df = pd.read_csv(path)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for head, d in df.groupby("head"):
            centers = (d["bin_left"] + d["bin_right"]) / 2
            ax.plot(centers, d["occurrence"], label=f"head {head}")
        ax.set_xlabel("weight value")
        ax.set_ylabel("normalized occurrence")
        ax.set_title(path.stem)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"hist_{path.stem}.png", dpi=120)
        plt.close(fig)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("run", type=Path)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()
    out = args.out or args.run / "figures"
    out.mkdir(parents=True, exist_ok=True)
    plot_curves(args.run, out)
    if (args.run / "histograms").exists():
        plot_histograms(args.run, out)
    print(f"figures written to {out}")


if __name__ == "__main__":
    main()
