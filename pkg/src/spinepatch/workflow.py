"""Glue between the manifest, the patch generators and the classifier.

Patch pixels are always re-cut from the source scans, so training does not
depend on the crop files written by the patchers.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .annotations import DatasetManifest
from .classifier import TrainConfig, evaluate, extract_features, normalise, train
from .errors import TrainingError
from .raster import crop, load_image, pixel_window
from .runner import run_per_scan

log = logging.getLogger(__name__)

# Per-method training presets. The tiling baseline keeps the stronger
# learning rate, lower momentum and class-weighted loss used for the highly
# imbalanced tile set.
TILING_PRESET = {"loss": "weighted_cross_entropy", "learning_rate": 0.01, "momentum": 0.7}
SEGPATCH_PRESET = {"loss": "cross_entropy", "learning_rate": 0.002, "momentum": 0.9}


@dataclass
class PatchSet:
    patch_ids: list
    images: list
    features: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _scan_patches(image_path, patches):
    img = load_image(image_path)
    out = []
    for p in patches:
        patch = normalise(crop(img, pixel_window(p.crop)))
        out.append((p.patch_id, patch, extract_features(patch), int(p.present)))
    return out


def load_patch_set(manifest: DatasetManifest, method: str, split=None, jobs: int = 1) -> PatchSet:
    """Normalised patch images and features for ``method`` (optionally one split).

    Work fans out per scan; the result keeps the manifest's patch order.
    """
    by_scan = {}
    for p in manifest.patches_for(method):
        if split is None or p.split == split:
            by_scan.setdefault(p.scan_id, []).append(p)
    tasks = [(manifest.resolve(manifest.scan(sid).image_path), ps) for sid, ps in by_scan.items()]
    results, failures = run_per_scan(_scan_patches, tasks, jobs)
    if failures:
        raise OSError("; ".join(msg for _, msg in failures))
    rows = [r for chunk in results for r in chunk]
    return PatchSet(
        patch_ids=[r[0] for r in rows],
        images=[r[1] for r in rows],
        features=np.array([r[2] for r in rows]).reshape(len(rows), -1),
        labels=np.array([r[3] for r in rows], dtype=int),
    )


def train_method(manifest: DatasetManifest, method: str, cfg: TrainConfig, jobs: int = 1):
    """Train on the ``train`` split and score both splits.

    Returns ``(model, history, metrics)``; ``metrics`` carries the config and
    per-split results.
    """
    train_set = load_patch_set(manifest, method, "train", jobs)
    if len(train_set) == 0:
        raise TrainingError(f"no {method} patches in the train split; run the patcher and split first")
    log.info("%s: training on %d patches (%d present)", method, len(train_set), int(train_set.labels.sum()))
    model, history = train(train_set.images, train_set.labels, cfg, features=train_set.features)
    metrics = {"method": method, "config": asdict(cfg),
               "train": evaluate(model, train_set.features, train_set.labels)}
    test_set = load_patch_set(manifest, method, "test", jobs)
    if len(test_set):
        metrics["test"] = evaluate(model, test_set.features, test_set.labels)
    return model, history, metrics


def evaluate_method(manifest: DatasetManifest, method: str, model, jobs: int = 1) -> dict:
    out = {"method": method}
    for split in ("train", "test"):
        ps = load_patch_set(manifest, method, split, jobs)
        if len(ps):
            out[split] = evaluate(model, ps.features, ps.labels)
    return out


def find_patch(manifest: DatasetManifest, method: str, patch_id: str):
    for p in manifest.patches_for(method):
        if p.patch_id == patch_id:
            return p
    return None


def patch_image(manifest: DatasetManifest, patch) -> np.ndarray:
    img = load_image(manifest.resolve(manifest.scan(patch.scan_id).image_path))
    return crop(img, pixel_window(patch.crop))


def corpus_scale(manifest: DatasetManifest, reference_width: float = 1462.0) -> float:
    """Resolution of a corpus relative to full-size cervical films.

    The tiling baseline uses 224 px tiles on full-size films; on a corpus
    rendered at a different resolution the tile is rescaled so it covers the
    same anatomy.
    """
    widths = [s.width for s in manifest.scans if s.region == "cervical"]
    if not widths:
        return 1.0
    return float(np.median(widths)) / reference_width


def models_dir(out_dir) -> Path:
    return Path(out_dir) / "models"
