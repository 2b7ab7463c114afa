"""Line charts of evaluation results: one SVG per (task, attack, objective)."""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import ResultRow  # noqa: E402

logger = logging.getLogger(__name__)

# fixed hash salt and no date metadata keep SVG bytes deterministic
matplotlib.rcParams["svg.hashsalt"] = "commdefense"


def plot(rows: list[ResultRow], outdir) -> list[Path]:
    """Mean timesteps vs attack probability, one series per framework."""
    if not rows:
        logger.warning("no result rows to plot")
        return []
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[ResultRow]] = defaultdict(list)
    for r in rows:
        groups[(r.task, r.attack, r.objective)].append(r)
    paths = []
    for (task, attack, objective), members in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        by_framework: dict[str, list[ResultRow]] = defaultdict(list)
        for r in members:
            by_framework[r.framework].append(r)
        for framework in sorted(by_framework):
            pts = by_framework[framework]
            p_values = sorted({r.p for r in pts})
            means, bands = [], []
            for p in p_values:
                here = [r for r in pts if r.p == p]
                m = np.array([r.mean_timesteps for r in here])
                means.append(m.mean())
                if len(here) > 1:
                    bands.append(m.std(ddof=1) / np.sqrt(len(m)))
                else:
                    bands.append(here[0].stderr)
            means = np.array(means)
            bands = np.array(bands)
            ax.plot(p_values, means, marker="o", label=framework)
            ax.fill_between(p_values, means - bands, means + bands, alpha=0.2)
        ax.set_xlabel("attack probability")
        ax.set_ylabel("mean timesteps")
        ax.set_title(f"{task}: {attack} ({objective})")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / f"{task}_{attack}_{objective}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
