"""Four-stage convolutional feature extractor with coordinate encoding."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_WIDTHS = (16, 32, 64, 64)
GRID_FACTOR = 4


def init_backbone(rng: np.random.Generator, widths=DEFAULT_WIDTHS, in_channels=3) -> dict:
    params = {}
    cin = in_channels
    for s, cout in enumerate(widths, start=1):
        scale = np.sqrt(1.0 / (9 * cin))
        params[f"backbone.conv{s}.w"] = Tensor(rng.normal(0.0, scale, (3, 3, cin, cout)), True)
        params[f"backbone.conv{s}.b"] = Tensor(np.zeros(cout), True)
        cin = cout
    return params


def stage_widths(params: dict) -> list:
    widths = []
    s = 1
    while f"backbone.conv{s}.w" in params:
        widths.append(params[f"backbone.conv{s}.w"].shape[3])
        s += 1
    return widths


def feature_dim(widths, height, width, use_coords=True) -> int:
    d = int(np.sum(widths))
    if use_coords:
        d += height // GRID_FACTOR + width // GRID_FACTOR
    return d


def coordinate_channels(gh: int, gw: int) -> np.ndarray:
    """(gh, gw, gh + gw) one-hot row block followed by one-hot column block."""
    out = np.zeros((gh, gw, gh + gw))
    rows = np.arange(gh)[:, None]
    cols = np.arange(gw)[None, :]
    out[rows, cols, rows] = 1.0
    out[rows, cols, gh + cols] = 1.0
    return out


def _check_size(h, w, n_stages):
    need = max(2 ** n_stages, 2 * GRID_FACTOR)
    if h % need or w % need:
        raise ValueError(f"image size {h}x{w} must be divisible by {need}")


def _forward_batch(x: np.ndarray, params: dict, use_coords: bool) -> Tensor:
    n, h, w, _ = x.shape
    n_stages = len(stage_widths(params))
    _check_size(h, w, n_stages)
    gh, gw = h // GRID_FACTOR, w // GRID_FACTOR
    act = Tensor(x)
    stages = []
    for s in range(1, n_stages + 1):
        z = ad.conv2d(act, params[f"backbone.conv{s}.w"], stride=2, padding=1)
        act = ad.tanh(z + params[f"backbone.conv{s}.b"])
        stages.append(ad.upsample_nearest(act, (gh, gw)))
    if use_coords:
        coords = np.broadcast_to(coordinate_channels(gh, gw), (n, gh, gw, gh + gw))
        stages.append(Tensor(coords))
    return ad.concat(stages, axis=-1)


def _as_float(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def extract_features(image, params: dict, use_coords=True) -> Tensor:
    """Feature map of shape (H/4, W/4, D) for one H x W x 3 image.

    uint8 images are rescaled to [0, 1]; float images are taken as is.
    """
    x = _as_float(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {x.shape}")
    fm = _forward_batch(x[None], params, use_coords)
    return fm.reshape(fm.shape[1:])


def shared_forward(images, params: dict, use_coords=True) -> list:
    """Run every image through the same backbone in one batch."""
    if len(images) == 0:
        return []
    arrays = [_as_float(im) for im in images]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shared_forward needs equally sized images, got {sorted(shapes)}")
    fm = _forward_batch(np.stack(arrays), params, use_coords)
    return [fm[i] for i in range(len(arrays))]
