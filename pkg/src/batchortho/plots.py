"""Line plots rebuilt from metric CSV files only."""
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no creation time or software version in the PNG, so reruns are byte-identical
_PNG_META = {"Software": None}


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_metrics(csv_paths, out_png, phase="val", labels=None):
    """Loss and error rate against epoch, one series per CSV."""
    fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(9, 3.5))
    for i, path in enumerate(csv_paths):
        rows = [r for r in read_metrics(path) if r["phase"] == phase]
        epochs = [int(r["epoch"]) for r in rows]
        label = labels[i] if labels else Path(path).parent.name
        ax_loss.plot(epochs, [float(r["loss"]) for r in rows], marker="o", label=label)
        ax_err.plot(epochs, [100 * float(r["error_rate"]) for r in rows], marker="o", label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel(f"{phase} loss")
    ax_err.set_xlabel("epoch")
    ax_err.set_ylabel(f"{phase} error (%)")
    ax_err.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out_png, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return out_png
