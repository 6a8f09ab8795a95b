#!/usr/bin/env python3
"""Render a stage-1 training history CSV as a loss/accuracy figure."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.encoder import HISTORY_COLUMNS  # noqa: E402

LOSS_COLUMNS = ["l_intra", "l_inter", "l_ce", "l_total"]


def load_history(path: Path) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [column for column in HISTORY_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"{path}: history is missing columns {missing}")
    return frame


def build_figure(frame: pd.DataFrame, title: str) -> go.Figure:
    fig = make_subplots(rows=1, cols=2, subplot_titles=("losses", "train accuracy"))
    for column in LOSS_COLUMNS:
        fig.add_trace(go.Scatter(x=frame["epoch"], y=frame[column], mode="lines", name=column), row=1, col=1)
    fig.add_trace(go.Scatter(x=frame["epoch"], y=frame["train_acc"], mode="lines", name="train_acc"), row=1, col=2)
    fig.update_layout(template="plotly_dark", title=title)
    return fig


def _matplotlib_fallback(frame: pd.DataFrame, title: str, png_path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (left, right) = plt.subplots(1, 2, figsize=(11, 4))
    for column in LOSS_COLUMNS:
        left.plot(frame["epoch"], frame[column], label=column)
    left.set_xlabel("epoch")
    left.legend()
    right.plot(frame["epoch"], frame["train_acc"], color="#8b5cf6")
    right.set_xlabel("epoch")
    right.set_ylim(0.0, 1.05)
    fig.suptitle(f"{title} (fallback)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=200)
    plt.close(fig)


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Plot a training history CSV.")
    parser.add_argument("--history", required=True, help="history CSV written by train-encoder or pipeline")
    parser.add_argument("--out", required=True, help="output PNG path")
    parser.add_argument("--title", default="Stage-1 training", help="figure title (default: Stage-1 training)")
    args = parser.parse_args(argv)

    frame = load_history(Path(args.history))
    png_path = Path(args.out)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        build_figure(frame, args.title).write_image(str(png_path))
    except Exception:  # pragma: no cover - kaleido missing a browser on headless hosts
        _matplotlib_fallback(frame, args.title, png_path)
    print("Wrote figure:", png_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
