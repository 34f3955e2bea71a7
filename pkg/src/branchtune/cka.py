"""Linear centered-kernel-alignment scores between activation matrices.

Feature matrices are n samples by d features.  Columns are mean-centered,
similarity is measured between the n x n Gram matrices, and the score is
invariant to orthogonal rotations of feature space and to isotropic
scaling.  Scores are computed in float64 and clamped to [0, 1].

Layer-level profiles compare two models tap by tap; the
stability/plasticity profile of a training stage scores the current
model against its predecessor on old-task data (stability) and against
a jointly trained reference on new-task data (plasticity).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Model


class UndefinedScoreError(ValueError):
    """Exactly one side has constant features; the score has no value."""


def center(x: np.ndarray) -> np.ndarray:
    """Subtract the column means; every column of the result has mean 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an n x d feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature matrix contains NaN or Inf")
    return x - x.mean(axis=0, keepdims=True)


def gram(x_centered: np.ndarray) -> np.ndarray:
    """Linear kernel matrix of a centered feature matrix."""
    return x_centered @ x_centered.T


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear CKA between two feature matrices over the same n samples.

    Returns 1.0 when both sides are constant (both Gram matrices vanish);
    raises UndefinedScoreError when exactly one side is constant.  With
    n = 2 any pair of non-constant inputs scores 1.0 because all centered
    2-sample Gram matrices are proportional.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError(f"expected n x d matrices, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    kx = gram(center(x))
    ky = gram(center(y))
    if np.array_equal(kx, ky):  # identical representations score exactly 1
        return 1.0
    nx = float(np.linalg.norm(kx))
    ny = float(np.linalg.norm(ky))
    if nx == 0.0 and ny == 0.0:
        return 1.0
    if nx == 0.0 or ny == 0.0:
        raise UndefinedScoreError(
            "one side has constant features; similarity is undefined")
    score = float(np.sum(kx * ky)) / (nx * ny)
    if not (-1e-6 <= score <= 1 + 1e-6):
        raise ValueError(f"score {score} outside numeric slack")
    return min(1.0, max(0.0, score))


def reduce_activation(act: np.ndarray, mode: str = "spatial_mean") -> np.ndarray:
    """Flatten a tap activation to n x d.

    ``spatial_mean`` averages NCHW maps over space to n x C;
    ``flatten`` keeps every spatial position as its own feature.
    Already-flat activations pass through unchanged.
    """
    act = np.asarray(act)
    if act.ndim == 2:
        return act
    if act.ndim != 4:
        raise ValueError(f"expected NCHW or flat activations, got {act.shape}")
    if mode == "spatial_mean":
        return act.mean(axis=(2, 3))
    if mode == "flatten":
        return act.reshape(act.shape[0], -1)
    raise ValueError(f"unknown reduction {mode!r}")


def _captured(model: Model, images: np.ndarray) -> dict[str, np.ndarray]:
    _, _, taps = model.forward(images, train=False, capture=True)
    return taps


def pairwise_layer_cka(model_a: Model, model_b: Model, images: np.ndarray,
                       reduce: str = "spatial_mean") -> list[tuple[str, float]]:
    """Per-tap CKA between two models evaluated on the same images."""
    taps_a = _captured(model_a, images)
    taps_b = _captured(model_b, images)
    if list(taps_a.keys()) != list(taps_b.keys()):
        raise ValueError(
            f"models expose different taps: {list(taps_a)} vs {list(taps_b)}")
    return [(name,
             cka(reduce_activation(taps_a[name], reduce),
                 reduce_activation(taps_b[name], reduce)))
            for name in taps_a]


@dataclass(frozen=True)
class CkaProfileEntry:
    layer: str
    stability: float
    plasticity: float  # NaN when no joint reference was trained


@dataclass(frozen=True)
class CkaProfile:
    """Layer-wise stability/plasticity scores for one training stage."""

    stage: int
    entries: tuple[CkaProfileEntry, ...]

    def mean_stability(self) -> float:
        return float(np.mean([e.stability for e in self.entries]))

    def mean_plasticity(self) -> float:
        vals = [e.plasticity for e in self.entries
                if not math.isnan(e.plasticity)]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer_index", "layer_name",
                             "stability", "plasticity"])
            for idx, e in enumerate(self.entries):
                plast = "" if math.isnan(e.plasticity) else repr(e.plasticity)
                writer.writerow([idx, e.layer, repr(e.stability), plast])

    @classmethod
    def read_csv(cls, path, stage: int = 0) -> "CkaProfile":
        entries = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                plast = float(row["plasticity"]) if row["plasticity"] else float("nan")
                entries.append(CkaProfileEntry(row["layer_name"],
                                               float(row["stability"]), plast))
        return cls(stage=stage, entries=tuple(entries))


def stability_plasticity(prev_model: Model, cur_model: Model,
                         joint_model: Model | None,
                         old_images: np.ndarray, new_images: np.ndarray,
                         stage: int,
                         reduce: str = "spatial_mean") -> CkaProfile:
    """Score one stage transition layer by layer.

    Stability compares the current model to its predecessor on data from
    earlier tasks; plasticity compares it to the jointly trained
    reference on the new task's data (NaN per layer when ``joint_model``
    is None).
    """
    stab = pairwise_layer_cka(prev_model, cur_model, old_images, reduce)
    if joint_model is not None:
        plast = pairwise_layer_cka(joint_model, cur_model, new_images, reduce)
        plast_by_name = dict(plast)
    else:
        plast_by_name = {name: float("nan") for name, _ in stab}
    entries = tuple(CkaProfileEntry(name, s, plast_by_name[name])
                    for name, s in stab)
    return CkaProfile(stage=stage, entries=entries)
