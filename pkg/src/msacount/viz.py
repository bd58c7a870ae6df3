"""PNG renderings of head sizes (jet colours, red = largest in the image)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .annotations import ImageRecord  # noqa: E402


def plot_head_sizes(record: ImageRecord, path: str | Path) -> None:
    from .metrics import load_image

    etas = np.array([h.eta for h in record.heads], dtype=float)
    fig, ax = plt.subplots(figsize=(record.width / 100, record.height / 100), dpi=100)
    try:
        ax.imshow(load_image(record))
    except OSError:
        ax.set_xlim(0, record.width)
        ax.set_ylim(record.height, 0)
    if len(etas):
        # each image normalised on its own smallest / largest head
        lo, hi = etas.min(), etas.max()
        norm = (etas - lo) / (hi - lo) if hi > lo else np.zeros_like(etas)
        ax.scatter([h.x for h in record.heads], [h.y for h in record.heads], c=norm, cmap="jet",
                   vmin=0, vmax=1, s=12, edgecolors="none")
    ax.set_axis_off()
    fig.subplots_adjust(0, 0, 1, 1)
    fig.savefig(path)
    plt.close(fig)
