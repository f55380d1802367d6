"""Gaussian label maps, background maps and class prototypes from support images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import GRID_FACTOR

AMPLITUDE = "amplitude"
PROBABILITY = "probability"


def gaussian_map(center, sigma, shape, mode=AMPLITUDE) -> np.ndarray:
    """Isotropic Gaussian on a grid, in grid units.

    ``amplitude`` scales the peak to 1, ``probability`` scales the sum to 1.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    gh, gw = shape
    cy, cx = center
    if not (0 <= cy <= gh - 1 and 0 <= cx <= gw - 1):
        raise ValueError(f"center {center} outside grid {shape}")
    ii = np.arange(gh)[:, None]
    jj = np.arange(gw)[None, :]
    g = np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2.0 * sigma * sigma))
    if mode == AMPLITUDE:
        return g / g.max()
    if mode == PROBABILITY:
        return g / g.sum()
    raise ValueError(f"unknown mode {mode!r}")


def background_map(object_maps, shape=None) -> np.ndarray:
    """clamp(1 - sum of amplitude maps, 0); all-ones when there are no objects."""
    maps = [np.asarray(m) for m in object_maps]
    if not maps:
        if shape is None:
            raise ValueError("background_map needs a shape when no object maps are given")
        return np.ones(shape)
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"object maps have mixed shapes {sorted(shapes)}")
    return np.maximum(1.0 - np.sum(maps, axis=0), 0.0)


def image_to_grid(y, x):
    """Pixel coordinate -> continuous feature-grid coordinate."""
    return y / GRID_FACTOR, x / GRID_FACTOR


def label_map(y, x, sigma_px, grid_shape, mode=AMPLITUDE) -> np.ndarray:
    """Gaussian for a pixel-space annotation; sigma is given in image pixels."""
    return gaussian_map(image_to_grid(y, x), sigma_px / GRID_FACTOR, grid_shape, mode)


def _normalized(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weight map must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weight map is all zero (object with empty support)")
    return w / total


def pool_by_map(features: Tensor, weights) -> Tensor:
    gh, gw, d = features.shape
    w = _normalized(weights)
    if w.shape != (gh, gw):
        raise ad.ShapeError(f"pool_by_map: map {w.shape} does not match features {features.shape}")
    return ad.matmul(w.reshape(1, gh * gw), features.reshape(gh * gw, d)).reshape(d)


@dataclass
class PrototypeBank:
    raw: Tensor       # (C + 1, D); row C is background
    embedded: Tensor  # (C + 1, E)

    @property
    def num_classes(self) -> int:
        return self.raw.shape[0] - 1


def embed_prototypes(raw: Tensor, params: dict) -> PrototypeBank:
    emb = ad.matmul(raw, params["embed.proto.w"]) + params["embed.proto.b"]
    return PrototypeBank(raw=raw, embedded=emb)


def support_weight_rows(labels, sigma_px, grid_shape):
    """Stack of normalized weight maps for one support image.

    Returns (rows, classes): one row per labeled object followed by the
    background row; ``classes`` holds the object class of each object row.
    """
    amps = [label_map(y, x, sigma_px, grid_shape) for y, x, _ in labels]
    bg = background_map(amps, shape=grid_shape)
    rows = [_normalized(m).reshape(-1) for m in amps]
    rows.append(_normalized(bg).reshape(-1))
    return np.stack(rows), [c for _, _, c in labels]


def average_pooled(pooled: list, classes: list, num_classes: int) -> Tensor:
    """Class-wise mean of pooled vectors, background rows averaged into row C.

    ``pooled`` holds one (n_i, D) tensor per support image, ``classes`` the
    matching object classes (or the string "bg") in the same row order.
    """
    if not pooled:
        raise ValueError("no support images")
    stacked = ad.concat(pooled, axis=0)
    counts = np.zeros(num_classes + 1)
    avg = np.zeros((num_classes + 1, stacked.shape[0]))
    for r, c in enumerate(classes):
        k = num_classes if c == "bg" else int(c)
        avg[k, r] = 1.0
        counts[k] += 1
    missing = [c for c in range(num_classes) if counts[c] == 0]
    if missing:
        raise ValueError(f"class {missing[0]} has no support instances")
    return ad.matmul(avg / counts[:, None], stacked)


def build_prototypes(support, sigma_px, num_classes, params) -> PrototypeBank:
    """Label-guided prototypes.

    support: sequence of (feature map (gh, gw, D), labels) with labels as
    (y, x, class) in image pixels and episode-local classes 0..C-1.
    """
    pooled, classes = [], []
    for fmap, labels in support:
        gh, gw, d = fmap.shape
        rows, cls = support_weight_rows(labels, sigma_px, (gh, gw))
        pooled.append(ad.matmul(rows, fmap.reshape(gh * gw, d)))
        classes.extend(cls + ["bg"])
    return embed_prototypes(average_pooled(pooled, classes, num_classes), params)
