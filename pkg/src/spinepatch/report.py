"""Side-by-side comparison of the two patching methods, as JSON, markdown and figures."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InvalidArgumentError  # noqa: E402
from .tiling import class_counts  # noqa: E402

METHODS = ("segpatch", "tiling")
SPLITS = ("test", "train")
_COLUMNS = ("method", "split", "n", "accuracy", "sensitivity", "specificity",
            "present", "absent", "present_fraction")
_COLORS = {"segpatch": "#4c72b0", "tiling": "#dd8452"}
# PNG metadata without the library version keeps figures byte-stable
_PNG_META = {"Software": None}


def _require(metrics, method: str) -> dict:
    if not metrics:
        raise InvalidArgumentError(f"missing metrics for {method}; run `train --method {method}` first")
    for split in SPLITS:
        if split not in metrics or "accuracy" not in metrics[split]:
            raise InvalidArgumentError(f"{method} metrics have no {split} accuracy")
    return metrics


def compare_report(manifest, metrics_tiling: dict, metrics_segpatch: dict) -> dict:
    """Rows sorted by method then split, plus ``gap = segpatch test acc - tiling test acc``."""
    metrics = {"tiling": _require(metrics_tiling, "tiling"),
               "segpatch": _require(metrics_segpatch, "segpatch")}
    rows = []
    balance = {}
    for method in METHODS:
        for split in SPLITS:
            patches = [p for p in manifest.patches_for(method) if p.split == split]
            counts = class_counts(patches)
            m = metrics[method][split]
            rows.append({
                "method": method,
                "split": split,
                "n": m["n"],
                "accuracy": m["accuracy"],
                "sensitivity": m["sensitivity"],
                "specificity": m["specificity"],
                "present": counts["present"],
                "absent": counts["absent"],
                "present_fraction": counts["present_fraction"],
            })
        balance[method] = class_counts(manifest.patches_for(method))
    gap = metrics["segpatch"]["test"]["accuracy"] - metrics["tiling"]["test"]["accuracy"]
    return {"rows": rows, "class_balance": balance, "gap": gap}


def _cell(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def markdown_table(report: dict) -> str:
    lines = ["| " + " | ".join(_COLUMNS) + " |",
             "|" + "|".join("---" for _ in _COLUMNS) + "|"]
    for row in report["rows"]:
        lines.append("| " + " | ".join(_cell(row[c]) for c in _COLUMNS) + " |")
    lines.append("")
    lines.append(f"Test accuracy gap (segpatch - tiling): {report['gap']:+.4f}")
    return "\n".join(lines) + "\n"


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- figures

def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_accuracy(report: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.38
    x = np.arange(len(SPLITS))
    for k, method in enumerate(METHODS):
        acc = [next(r["accuracy"] for r in report["rows"] if r["method"] == method and r["split"] == s)
               for s in SPLITS]
        ax.bar(x + (k - 0.5) * width, acc, width, label=method, color=_COLORS[method])
    ax.set_xticks(x)
    ax.set_xticklabels(SPLITS)
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    ax.legend(frameon=False, loc="lower right")
    ax.set_title(f"test gap {report['gap']:+.3f}")
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_class_balance(report: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = list(METHODS)
    present = [report["class_balance"][m]["present"] for m in methods]
    absent = [report["class_balance"][m]["absent"] for m in methods]
    ax.bar(methods, absent, color="#bbbbbb", label="absent")
    ax.bar(methods, present, bottom=absent, color="#c44e52", label="present")
    for i, m in enumerate(methods):
        frac = report["class_balance"][m]["present_fraction"]
        ax.text(i, absent[i] + present[i], f"{frac:.1%}", ha="center", va="bottom")
    ax.set_ylabel("patches")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_training_curves(histories: dict, path) -> Path:
    """``histories`` maps method name to a list of EpochLog-like rows."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3.5))
    for method in sorted(histories):
        rows = histories[method]
        epochs = [h.epoch for h in rows]
        ax_loss.plot(epochs, [h.loss for h in rows], label=method, color=_COLORS.get(method))
        ax_acc.plot(epochs, [h.train_acc for h in rows], label=method, color=_COLORS.get(method))
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("training accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, Path(path))


def plot_saliency(patch_img, saliency: np.ndarray, path, title: str = "") -> Path:
    fig, (ax_img, ax_map) = plt.subplots(1, 2, figsize=(7, 3.5))
    ax_img.imshow(patch_img, cmap="gray", vmin=0, vmax=255)
    ax_img.set_axis_off()
    lim = float(np.max(np.abs(saliency))) or 1.0
    im = ax_map.imshow(saliency, cmap="RdBu_r", vmin=-lim, vmax=lim)
    ax_map.set_axis_off()
    fig.colorbar(im, ax=ax_map, fraction=0.046, label="drop in p(present)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, Path(path))


def write_report(report: dict, out_dir, histories=None) -> dict:
    """Write compare.json, compare.md and figures under ``out_dir``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "compare.json", "markdown": out / "compare.md"}
    paths["json"].write_text(dumps_report(report), encoding="utf-8")
    paths["markdown"].write_text(markdown_table(report), encoding="utf-8")
    paths["accuracy_png"] = plot_accuracy(report, out / "accuracy.png")
    paths["balance_png"] = plot_class_balance(report, out / "class_balance.png")
    if histories:
        paths["curves_png"] = plot_training_curves(histories, out / "training_curves.png")
    return {k: str(v) for k, v in paths.items()}
