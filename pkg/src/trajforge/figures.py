"""Matplotlib figures accompanying an evaluation report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import TrajectoryDataset
from .metrics import BinningConfig, distribution_pairs

_TITLES = {
    "distance": "Daily travel distance (km)",
    "gradius": "Radius of gyration (km)",
    "duration": "Visit duration (slots)",
    "dailyloc": "Visits per day",
    "grank": "Global location rank profile",
    "irank": "Individual location rank profile",
}


def render_report_figures(
    real: TrajectoryDataset,
    gen: TrajectoryDataset,
    out_dir: str | Path,
    cfg: BinningConfig = BinningConfig(),
) -> list[Path]:
    """One figure per distribution pair, real vs generated; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (rh, gh) in distribution_pairs(real, gen, cfg).items():
        fig, ax = plt.subplots(figsize=(5, 3.2))
        x = np.arange(len(rh.probs))
        width = 0.42
        ax.bar(x - width / 2, rh.probs, width, label="real", color="#4878a8")
        ax.bar(x + width / 2, gh.probs, width, label="generated", color="#d1605e")
        ax.set_title(_TITLES.get(name, name))
        ax.set_ylabel("probability")
        ax.set_xlabel("bin" if name in ("distance", "gradius") else "value")
        ax.legend(frameon=False)
        fig.tight_layout()
        path = out_dir / f"{name}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
