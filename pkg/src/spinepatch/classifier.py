"""Logistic-regression patch classifier with the usual training protocol.

Patches are normalised to 224x224, turned into a 288-value feature vector
and scored by a linear model. Training is mini-batch SGD with classical
momentum and a step learning-rate schedule, with on-the-fly rotation and
random histogram equalisation. Everything is a deterministic function of
the data and the config's seed.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, TrainingError
from .raster import as_gray, equalize_histogram, resize_bilinear, rotate

INPUT_SIZE = 224
GRID = 16
EDGE_BINS = 16
EDGE_RANGE = 0.5
STRIP = INPUT_SIZE // 8
N_FEATURES = GRID * GRID + EDGE_BINS + 16
LOSSES = ("cross_entropy", "weighted_cross_entropy", "focal")
MODEL_HEADER = "spinepatch-logreg v1"
P_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    momentum: float = 0.9
    scheduler_step: int = 7
    scheduler_gamma: float = 0.1
    epochs: int = 50
    batch_size: int = 8
    loss: str = "cross_entropy"
    focal_gamma: float = 2.0
    rotation_max_deg: float = 30.0
    equalize_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidArgumentError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.equalize_prob <= 1:
            raise InvalidArgumentError(f"equalize_prob must be in [0, 1], got {self.equalize_prob}")
        if self.loss not in LOSSES:
            raise InvalidArgumentError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.scheduler_step < 1:
            raise InvalidArgumentError("epochs, batch_size and scheduler_step must be positive")
        if not 0 <= self.rotation_max_deg <= 180:
            raise InvalidArgumentError(f"rotation_max_deg must be in [0, 180], got {self.rotation_max_deg}")
        if self.focal_gamma < 0:
            raise InvalidArgumentError(f"focal_gamma must be non-negative, got {self.focal_gamma}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.learning_rate * self.scheduler_gamma ** ((epoch - 1) // self.scheduler_step)


@dataclass
class Model:
    weights: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    bias: float = 0.0

    def logits(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.bias

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.logits(np.atleast_2d(X)))

    @property
    def params(self) -> np.ndarray:
        return np.append(self.weights, self.bias)

    @classmethod
    def from_params(cls, theta) -> "Model":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-1].copy(), float(theta[-1]))

    def dumps(self) -> str:
        lines = [MODEL_HEADER, f"features {len(self.weights)}"]
        lines += [f"{v:.17e}" for v in self.weights]
        lines.append(f"bias {self.bias:.17e}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Model":
        lines = text.strip().splitlines()
        if not lines or lines[0] != MODEL_HEADER:
            raise InvalidArgumentError("not a spinepatch model file")
        n = int(lines[1].split()[1])
        if len(lines) != n + 3:
            raise InvalidArgumentError(f"model file should hold {n} weights and a bias")
        weights = np.array([float(v) for v in lines[2:2 + n]])
        bias = float(lines[-1].split()[1])
        if not (np.all(np.isfinite(weights)) and math.isfinite(bias)):
            raise InvalidArgumentError("model has non-finite parameters")
        return cls(weights, bias)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="ascii")

    @classmethod
    def load(cls, path) -> "Model":
        return cls.loads(Path(path).read_text(encoding="ascii"))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


# --------------------------------------------------------------------------- features

def normalise(img) -> np.ndarray:
    img = as_gray(img)
    if img.shape != (INPUT_SIZE, INPUT_SIZE):
        img = resize_bilinear(img, INPUT_SIZE, INPUT_SIZE)
    return img


def edge_magnitude(f: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude with edge replication."""
    p = np.pad(f, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    return np.sqrt(gx * gx + gy * gy)


def extract_features(img) -> np.ndarray:
    """288 values: 16x16 block means, 16-bin edge histogram, 16 border-strip means.

    Intensities are scaled to [0, 1]. The edge histogram holds the fraction
    of pixels per gradient-magnitude bin over ``[0, 0.5]`` (the top bin also
    takes anything larger). Border strips are 28 px deep; each side is split
    into four equal segments, ordered top, bottom, left, right.
    """
    f = normalise(img).astype(np.float64) / 255.0
    cell = INPUT_SIZE // GRID
    blocks = f.reshape(GRID, cell, GRID, cell).mean(axis=(1, 3)).ravel()

    mag = edge_magnitude(f)
    idx = np.minimum((mag * (EDGE_BINS / EDGE_RANGE)).astype(np.intp), EDGE_BINS - 1)
    hist = np.bincount(idx.ravel(), minlength=EDGE_BINS) / mag.size

    seg = INPUT_SIZE // 4
    strips = []
    for side in (f[:STRIP, :], f[-STRIP:, :]):
        strips += [side[:, k * seg:(k + 1) * seg].mean() for k in range(4)]
    for side in (f[:, :STRIP], f[:, -STRIP:]):
        strips += [side[k * seg:(k + 1) * seg, :].mean() for k in range(4)]
    return np.concatenate([blocks, hist, np.array(strips)])


def augment(img, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random equalisation (probability ``equalize_prob``) then a uniform random rotation.

    Exactly two draws per call, angle first, so replaying a generator state
    replays the output.
    """
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    equalize = rng.random() < cfg.equalize_prob
    out = as_gray(img)
    if equalize:
        out = equalize_histogram(out)
    return rotate(out, angle) if angle != 0 else out.copy()


# --------------------------------------------------------------------------- losses

def class_weights_for(y) -> np.ndarray:
    """Per-class weights ``N / (2 * N_c)``; equal classes give weight 1 each."""
    y = np.asarray(y).astype(int)
    counts = np.bincount(y, minlength=2).astype(float)
    if np.any(counts == 0):
        raise TrainingError("both classes must be present to weight them")
    return len(y) / (2.0 * counts)


def loss_and_grad(model: Model, batch, cfg: TrainConfig, class_weights=None):
    """Mean loss over the batch and its exact gradient (weights then bias)."""
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise InvalidArgumentError("empty batch")
    n = len(y)
    p = _sigmoid(model.logits(X))
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)

    if cfg.loss == "focal":
        pt = np.where(y == 1, p, 1 - p)
        log_pt = np.log(np.where(y == 1, pc, 1 - pc))
        sign = np.where(y == 1, 1.0, -1.0)
        g = cfg.focal_gamma
        one_minus = 1 - pt
        per = -(one_minus ** g) * log_pt
        # d/dz of -(1-pt)^g log pt, using dpt/dz = sign * pt * (1 - pt)
        log_term = g * (one_minus ** g) * pt * log_pt if g != 0 else 0.0
        dz = sign * (log_term - one_minus ** (g + 1))
    else:
        per = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
        dz = p - y
        if cfg.loss == "weighted_cross_entropy":
            if class_weights is None:
                raise InvalidArgumentError("weighted_cross_entropy needs class_weights")
            w = np.where(y == 1, class_weights[1], class_weights[0])
            per = per * w
            dz = dz * w
    grad = np.append(X.T @ dz, dz.sum()) / n
    return float(per.sum() / n), grad


# --------------------------------------------------------------------------- training

@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float


def _standardiser(F: np.ndarray):
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd < 1e-8] = 1.0
    return mu, sd


def train(images, labels, cfg: TrainConfig, features=None) -> tuple[Model, list[EpochLog]]:
    """Fit a model to ``images`` (uint8 arrays of any size) and 0/1 ``labels``.

    Features are standardised with statistics from the un-augmented training
    images; the returned model has the standardisation folded into its
    weights so it scores raw feature vectors. ``features`` may carry the
    precomputed un-augmented features of ``images``.
    """
    y = np.asarray(labels, dtype=float)
    if len(y) == 0 or len(np.unique(y)) < 2:
        raise TrainingError("training data must contain both present and absent patches")
    imgs = [normalise(im) for im in images]
    base = np.array([extract_features(im) for im in imgs]) if features is None else np.asarray(features)
    mu, sd = _standardiser(base)
    cw = class_weights_for(y) if cfg.loss == "weighted_cross_entropy" else None

    rng = np.random.default_rng(cfg.seed)
    theta = np.zeros(N_FEATURES + 1)
    velocity = np.zeros_like(theta)
    augmenting = cfg.rotation_max_deg > 0 or cfg.equalize_prob > 0
    history = []
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        if augmenting:
            F = np.array([extract_features(augment(imgs[i], cfg, rng)) for i in order])
        else:
            F = base[order]
        Z = (F - mu) / sd
        ys = y[order]
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            xb = Z[start:start + cfg.batch_size]
            yb = ys[start:start + cfg.batch_size]
            model = Model.from_params(theta)
            loss, grad = loss_and_grad(model, (xb, yb), cfg, cw)
            correct += int(np.sum((model.predict_proba(xb) >= 0.5) == (yb == 1)))
            total += loss * len(yb)
            velocity = cfg.momentum * velocity - lr * grad
            theta = theta + velocity
        history.append(EpochLog(epoch, lr, total / n, correct / n))
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"parameters diverged at epoch {epoch}")
    w = theta[:-1] / sd
    b = float(theta[-1] - np.sum(theta[:-1] * mu / sd))
    return Model(w, b), history


def history_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "loss", "train_acc"])
    for h in history:
        writer.writerow([h.epoch, f"{h.lr:.10g}", f"{h.loss:.10f}", f"{h.train_acc:.6f}"])
    return buf.getvalue()


# --------------------------------------------------------------------------- evaluation

def evaluate(model: Model, features, labels, threshold: float = 0.5) -> dict:
    y = np.asarray(labels).astype(int)
    if len(y) == 0:
        raise InvalidArgumentError("cannot evaluate on an empty set")
    pred = (model.predict_proba(np.asarray(features)) >= threshold).astype(int)
    return metrics_from_predictions(pred, y)


def metrics_from_predictions(pred, y) -> dict:
    pred = np.asarray(pred).astype(int)
    y = np.asarray(y).astype(int)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return {
        "n": len(y),
        "accuracy": (tp + tn) / len(y),
        "sensitivity": tp / (tp + fn) if tp + fn else None,
        "specificity": tn / (tn + fp) if tn + fp else None,
        "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    }


def occlusion_saliency(model: Model, patch_img, window: int, stride: int) -> np.ndarray:
    """Drop in p(present) when each window is painted with the patch mean.

    The patch is first normalised to 224x224; the map is
    ``floor((224 - window) / stride) + 1`` on a side.
    """
    if window < 1 or stride < 1:
        raise InvalidArgumentError("window and stride must be positive")
    if window > INPUT_SIZE:
        raise InvalidArgumentError(f"window {window} is larger than the {INPUT_SIZE}px patch")
    img = normalise(patch_img)
    fill = np.uint8(np.clip(np.rint(img.mean()), 0, 255))
    base = model.predict_proba(extract_features(img))[0]
    side = (INPUT_SIZE - window) // stride + 1
    out = np.zeros((side, side))
    for i in range(side):
        for j in range(side):
            occluded = img.copy()
            occluded[i * stride:i * stride + window, j * stride:j * stride + window] = fill
            out[i, j] = base - model.predict_proba(extract_features(occluded))[0]
    return out
