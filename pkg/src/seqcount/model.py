"""Model configuration, parameter initialisation and the per-task forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ShapeError, no_grad
from .backbone import DEFAULT_WIDTHS, GRID_FACTOR, feature_dim, init_backbone, shared_forward
from .decoder import DecoderDims, attention_prototypes, decode_infer, decode_train, init_decoder
from .episodes import sort_labels
from .prototypes import PROBABILITY, background_map, build_prototypes, label_map


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    widths: tuple = DEFAULT_WIDTHS
    attn_dim: int = 64
    hidden: int = 128
    input_dim: int = 96
    embed_dim: int = 64
    max_ways: int = 10
    use_coords: bool = True
    guide: bool = True
    sigma: float = 8.0
    stop_step: bool = True

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.widths, self.image_size, self.image_size, self.use_coords)

    @property
    def grid(self) -> tuple:
        g = self.image_size // GRID_FACTOR
        return g, g

    def decoder_dims(self) -> DecoderDims:
        return DecoderDims(self.feature_dim, self.attn_dim, self.hidden, self.input_dim,
                           self.embed_dim, self.max_ways)

    def to_dict(self) -> dict:
        return asdict(self)


MICRO = ModelConfig(image_size=32, widths=(4, 4, 8, 8), attn_dim=8, hidden=8, input_dim=8, embed_dim=8)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng([int(seed), 1])
    params = init_backbone(rng, cfg.widths)
    params.update(init_decoder(rng, cfg.decoder_dims()))
    for name, p in params.items():
        p.name = name
    return params


def param_shapes(cfg: ModelConfig) -> dict:
    return {k: v.shape for k, v in init_params(cfg, 0).items()}


def check_compatible(arrays: dict, cfg: ModelConfig) -> None:
    """Raise ShapeError naming the first tensor that does not fit ``cfg``."""
    for name, shape in param_shapes(cfg).items():
        if name not in arrays:
            raise ShapeError(f"checkpoint lacks tensor {name!r}")
        if tuple(arrays[name].shape) != tuple(shape):
            raise ShapeError(f"tensor {name!r} has shape {tuple(arrays[name].shape)}, "
                             f"model expects {tuple(shape)}")


def task_features(params, cfg: ModelConfig, task):
    """Feature maps of the support images and the query image (shared weights)."""
    images = list(task.support_images) + [task.query_image]
    fmaps = shared_forward(images, params, cfg.use_coords)
    return fmaps[:-1], fmaps[-1]


def task_prototypes(params, cfg: ModelConfig, task, support_maps):
    support = list(zip(support_maps, [lab for _, lab in task.support]))
    if cfg.guide:
        return build_prototypes(support, cfg.sigma, task.ways, params)
    return attention_prototypes(support, task.ways, params)


def attention_targets(labels, cfg: ModelConfig, num_classes: int):
    """Teacher-forcing targets for ordered query labels.

    Returns (maps, classes): probability-mode Gaussians per object, plus a
    final normalized background map with class ``num_classes`` when the
    model is trained to emit a stop step.
    """
    maps = [label_map(y, x, cfg.sigma, cfg.grid, PROBABILITY) for y, x, _ in labels]
    classes = [int(c) for _, _, c in labels]
    if cfg.stop_step:
        amps = [label_map(y, x, cfg.sigma, cfg.grid) for y, x, _ in labels]
        bg = background_map(amps, shape=cfg.grid)
        maps.append(bg / bg.sum() if bg.sum() > 0 else np.full(cfg.grid, 1.0 / bg.size))
        classes.append(num_classes)
    return maps, classes


def forward_task(params, cfg: ModelConfig, task):
    """Teacher-forced decode of the task's query; returns (steps, targets, classes)."""
    support_maps, query_map = task_features(params, cfg, task)
    bank = task_prototypes(params, cfg, task, support_maps)
    targets, classes = attention_targets(sort_labels(task.query), cfg, task.ways)
    steps = decode_train(query_map, bank, params, len(classes))
    return steps, targets, classes


def predict(params, cfg: ModelConfig, task, t_max: int = 32) -> list:
    with no_grad():
        support_maps, query_map = task_features(params, cfg, task)
        bank = task_prototypes(params, cfg, task, support_maps)
        return decode_infer(query_map, bank, params, t_max)
