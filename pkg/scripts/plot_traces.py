"""Plot BNS loss traces (CSV: batch,iter,loss) from one or more distillation runs.

    python scripts/plot_traces.py artifacts/bns_trace_genie.csv artifacts/bns_trace_zeroq.csv -o traces.png
"""
import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.pipeline.artifacts import read_trace_csv


def mean_trace(path: Path) -> np.ndarray:
    rows = read_trace_csv(path)
    batches = sorted({b for b, _, _ in rows})
    iters = max(i for _, i, _ in rows) + 1
    grid = np.full((len(batches), iters), np.nan)
    index = {b: k for k, b in enumerate(batches)}
    for b, i, loss in rows:
        grid[index[b], i] = loss
    return np.nanmean(grid, axis=0)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("traces", nargs="+", type=Path)
    parser.add_argument("-o", "--output", type=Path, default=Path("bns_traces.png"))
    parser.add_argument("--log", action="store_true", help="Log-scale loss axis")
    args = parser.parse_args()
    
    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.traces:
        trace = mean_trace(path)
        ax.plot(np.arange(len(trace)), trace, label=path.stem.replace("bns_trace_", ""))
    ax.set_xlabel("iteration")
    ax.set_ylabel("BNS loss (mean over batches)")
    if args.log:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(args.output)


if __name__ == "__main__":
    main()
