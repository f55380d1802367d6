"""Episodic training: decaying dual loss, Adam, plateau schedule, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .episodes import META_TRAIN, EpisodeTask, TaskConfig, sample_task
from .metrics import class_counts, counting_errors
from .model import ModelConfig, check_compatible, forward_task, init_params, predict

log = logging.getLogger(__name__)

KL_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 4e-5
    plateau_window: int = 40
    lr_factor: float = 0.5
    episodes_per_epoch: int = 100
    epochs: int = 200
    lambda1_0: float = 10.0
    gamma: float = 0.98
    lambda_floor: float = 0.1
    lambda2: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0
    validation_tasks: int = 50
    t_max: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("lr0", "lr_factor", "episodes_per_epoch", "lambda1_0", "lambda_floor",
                     "lambda2", "eps", "plateau_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float
    lambda2: float
    epoch: int = 0


def lambda_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> LossWeights:
    """Exponentially decaying localization weight with a floor; constant CE weight."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    l1 = max(cfg.lambda1_0 * cfg.gamma ** epoch, cfg.lambda_floor)
    return LossWeights(l1, cfg.lambda2, epoch)


def plateau_scheduler(history, cfg: TrainConfig = TrainConfig()) -> float:
    """Learning rate after the given per-epoch validation MAE history.

    The rate is multiplied by ``lr_factor`` each time ``plateau_window``
    consecutive epochs pass without a new best; the counter restarts on a
    new best and after every reduction.
    """
    lr = cfg.lr0
    best = math.inf
    stale = 0
    for value in history:
        if value < best:
            best = value
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau_window:
                lr *= cfg.lr_factor
                stale = 0
    return lr


# ---------------------------------------------------------------------- loss

def smooth_target(target) -> np.ndarray:
    g = np.asarray(target, dtype=np.float64).reshape(-1) + KL_EPS
    return g / g.sum()


def loss_terms(alphas, targets, scores, labels, log_alphas=None, log_scores=None):
    """Summed KL(alpha_t || G_t) and CE(y_t || c_t) over all steps, as Tensors."""
    n = len(alphas)
    if not (len(targets) == n and len(scores) == n and len(labels) == n):
        raise ValueError(f"sequence lengths differ: alphas {n}, targets {len(targets)}, "
                         f"scores {len(scores)}, labels {len(labels)}")
    if log_alphas is not None and len(log_alphas) != n:
        raise ValueError("log_alphas length differs from alphas")
    kl_terms, ce_terms = [], []
    for t in range(n):
        alpha = ad.constant(alphas[t]).reshape(-1)
        if log_alphas is not None:
            log_alpha = ad.constant(log_alphas[t]).reshape(-1)
        else:
            log_alpha = ad.log(alpha)
        log_g = np.log(smooth_target(targets[t]))
        kl_terms.append(ad.sum(alpha * (log_alpha - log_g)))
        y = int(labels[t])
        if log_scores is not None:
            ce_terms.append(-ad.constant(log_scores[t])[y])
        else:
            c = ad.constant(scores[t])
            if c.value[y] == 0:
                raise ValueError(f"step {t}: score of the target class is exactly zero")
            ce_terms.append(-ad.log(c[y]))
    kl = ad.sum(ad.concat([k.reshape(1) for k in kl_terms], axis=0))
    ce = ad.sum(ad.concat([c.reshape(1) for c in ce_terms], axis=0))
    return kl, ce


def episode_loss(alphas, targets, scores, labels, weights: LossWeights,
                 log_alphas=None, log_scores=None) -> Tensor:
    """lambda1 * sum_t KL(alpha_t || G_t) + lambda2 * sum_t CE(y_t || c_t).

    The targets get additive smoothing (1e-8) and renormalization before
    their log is taken.  Precomputed log-probabilities may be passed to
    avoid taking log of an underflowed probability.
    """
    kl, ce = loss_terms(alphas, targets, scores, labels, log_alphas, log_scores)
    return kl * weights.lambda1 + ce * weights.lambda2


def task_loss(params, model_cfg: ModelConfig, task: EpisodeTask, weights: LossWeights):
    """Full forward pass for one task; returns (loss, kl, ce) Tensors."""
    steps, targets, classes = forward_task(params, model_cfg, task)
    kl, ce = loss_terms([s.alpha for s in steps], targets, [s.scores for s in steps], classes,
                        [s.log_alpha for s in steps], [s.log_scores for s in steps])
    return kl * weights.lambda1 + ce * weights.lambda2, kl, ce


# ---------------------------------------------------------------------- Adam

def adam_step(params: dict, grads: dict, moments: dict, step_index: int, lr: float,
              cfg: TrainConfig = TrainConfig()):
    """One bias-corrected Adam update on plain arrays.

    ``moments`` maps "m" and "v" to dicts keyed like ``params``.  Returns
    new (params, moments); inputs are not modified.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    new_p, new_m, new_v = {}, {}, {}
    b1, b2 = cfg.beta1, cfg.beta2
    for name, theta in params.items():
        g = grads.get(name)
        g = np.zeros_like(theta) if g is None else np.asarray(g)
        m = moments["m"].get(name, np.zeros_like(theta))
        v = moments["v"].get(name, np.zeros_like(theta))
        if g.shape != theta.shape or m.shape != theta.shape or v.shape != theta.shape:
            raise ad.ShapeError(f"adam_step: shape mismatch for {name!r}: param {theta.shape}, "
                                f"grad {g.shape}, moments {m.shape}/{v.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step_index)
        v_hat = v / (1 - b2 ** step_index)
        new_p[name] = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[name], new_v[name] = m, v
    return new_p, {"m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper applying :func:`adam_step` to named Tensors in place."""

    def __init__(self, params: dict, cfg: TrainConfig = TrainConfig()):
        self.params = params
        self.cfg = cfg
        self.step_index = 0
        self.moments = {"m": {k: np.zeros(p.shape) for k, p in params.items()},
                        "v": {k: np.zeros(p.shape) for k, p in params.items()}}

    def step(self, lr: float):
        grads = {k: p.grad for k, p in self.params.items()}
        if self.cfg.clip_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
            if norm > self.cfg.clip_norm:
                grads = {k: None if g is None else g * (self.cfg.clip_norm / norm) for k, g in grads.items()}
        self.step_index += 1
        values = {k: p.value for k, p in self.params.items()}
        new_values, self.moments = adam_step(values, grads, self.moments, self.step_index, lr, self.cfg)
        for k, p in self.params.items():
            p.value = new_values[k]
            p.grad = None


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"SQCK"
CKPT_VERSION = 1
META_PREFIXES = ("adam.", "train.", "model.")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    epoch: int
    tensors: dict  # name -> ndarray

    def params(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith(META_PREFIXES)}

    def moments(self) -> dict:
        return {
            "m": {k[len("adam.m."):]: v for k, v in self.tensors.items() if k.startswith("adam.m.")},
            "v": {k[len("adam.v."):]: v for k, v in self.tensors.items() if k.startswith("adam.v.")},
        }


def save_checkpoint(path, params: dict, optimizer: Adam | None = None, epoch: int = 0,
                    extra: dict | None = None) -> None:
    entries = {k: (p.value if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64))
               for k, p in params.items()}
    if optimizer is not None:
        for k in params:
            entries[f"adam.m.{k}"] = optimizer.moments["m"][k]
            entries[f"adam.v.{k}"] = optimizer.moments["v"][k]
        entries["adam.step"] = np.array([float(optimizer.step_index)])
    for k, v in (extra or {}).items():
        entries[k] = np.asarray(v, dtype=np.float64)
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<HII", CKPT_VERSION, int(epoch), len(entries))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, epoch, count = struct.unpack("<HII", take(10, "header"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        name = take(n, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size, name), dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(epoch, tensors)


def model_entries(cfg: ModelConfig) -> dict:
    """ModelConfig as checkpoint entries, so a checkpoint describes its own architecture."""
    out = {}
    for k, v in cfg.to_dict().items():
        out[f"model.{k}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
    return out


def model_config_of(ckpt: Checkpoint, default: ModelConfig | None = None) -> ModelConfig:
    """Rebuild the ModelConfig stored by :func:`model_entries`; ``default`` if absent."""
    stored = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    if not stored:
        if default is None:
            raise CheckpointError("checkpoint does not record its model configuration")
        return default
    kw = {}
    for f in fields(ModelConfig):
        if f.name not in stored:
            continue
        v = stored[f.name]
        if f.name == "widths":
            kw[f.name] = tuple(int(x) for x in v)
        elif isinstance(f.default, bool):
            kw[f.name] = bool(v[0])
        elif isinstance(f.default, int):
            kw[f.name] = int(v[0])
        else:
            kw[f.name] = float(v[0])
    return ModelConfig(**kw)


def restore(ckpt: Checkpoint, model_cfg: ModelConfig, optimizer_cfg: TrainConfig | None = None):
    """Rebuild (params, Adam or None) from a checkpoint, checking shapes."""
    arrays = ckpt.params()
    check_compatible(arrays, model_cfg)
    params = init_params(model_cfg, 0)
    for k, p in params.items():
        p.value = arrays[k].copy()
    opt = None
    if optimizer_cfg is not None and "adam.step" in ckpt.tensors:
        opt = Adam(params, optimizer_cfg)
        opt.step_index = int(ckpt.tensors["adam.step"][0])
        moments = ckpt.moments()
        for key in ("m", "v"):
            for k in params:
                if k not in moments[key]:
                    raise CheckpointError(f"checkpoint lacks optimizer moment adam.{key}.{k}")
                opt.moments[key][k] = moments[key][k].copy()
    return params, opt


# ------------------------------------------------------------------ training

class TrainingError(RuntimeError):
    pass


class EpisodePool:
    """Fixed list of tasks; episode (epoch, i) draws a task by a derived seed."""

    def __init__(self, tasks):
        if not tasks:
            raise ValueError("empty episode pool")
        self.tasks = list(tasks)

    def draw(self, seed: int, epoch: int, index: int) -> EpisodeTask:
        rng = np.random.default_rng([int(seed), 11, epoch, index])
        return self.tasks[int(rng.integers(len(self.tasks)))]


class TaskStream:
    """Tasks generated on the fly from meta-train classes."""

    def __init__(self, task_cfg: TaskConfig = TaskConfig()):
        self.task_cfg = task_cfg

    def draw(self, seed: int, epoch: int, index: int) -> EpisodeTask:
        rng = np.random.default_rng([int(seed), 13, epoch, index])
        return sample_task(rng, META_TRAIN, self.task_cfg)


@dataclass
class Dataset:
    train: object            # EpisodePool or TaskStream
    validation: list = field(default_factory=list)


def validation_mae(params, model_cfg: ModelConfig, tasks, t_max=32) -> float:
    pairs = []
    for task in tasks:
        preds = predict(params, model_cfg, task, t_max)
        pairs.append((class_counts(preds, task.ways), task.gt_counts()))
    return counting_errors(pairs)[0]


@dataclass
class TrainResult:
    params: dict
    optimizer: Adam
    history: list          # validation MAE per epoch
    log: list              # per-epoch metric records
    losses: list           # per-step total loss


def train(cfg: TrainConfig, model_cfg: ModelConfig, dataset: Dataset, out_dir=None,
          resume: str | None = None, epochs: int | None = None, on_step=None) -> TrainResult:
    """Run episodic training; writes checkpoint.sqck and metrics.jsonl to ``out_dir``."""
    n_epochs = cfg.epochs if epochs is None else epochs
    history: list = []
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        params, opt = restore(ckpt, model_cfg, cfg)
        if opt is None:
            raise CheckpointError(f"{resume}: no optimizer state, cannot resume")
        start = ckpt.epoch
        history = list(ckpt.tensors.get("train.val_mae", np.zeros(0)))
    else:
        params = init_params(model_cfg, cfg.seed)
        opt = Adam(params, cfg)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    records, losses = [], []
    for epoch in range(start, n_epochs):
        weights = lambda_schedule(epoch, cfg)
        lr = plateau_scheduler(history, cfg)
        kl_sum = ce_sum = loss_sum = 0.0
        for i in range(cfg.episodes_per_epoch):
            task = dataset.train.draw(cfg.seed, epoch, i)
            with Graph() as g:
                loss, kl, ce = task_loss(params, model_cfg, task, weights)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch} episode {i} "
                                        f"(seed {cfg.seed}); rerun with the same seed to reproduce")
                g.backward(loss)
            opt.step(lr)
            losses.append(value)
            loss_sum += value
            kl_sum += kl.item()
            ce_sum += ce.item()
            if on_step is not None:
                on_step(epoch, i, value)
        n = cfg.episodes_per_epoch
        if dataset.validation:
            val = validation_mae(params, model_cfg, dataset.validation, cfg.t_max)
        else:
            val = loss_sum / cfg.episodes_per_epoch  # schedule on training loss instead
        history.append(val)
        rec = {"epoch": epoch, "lr": lr, "lambda1": weights.lambda1, "loss": loss_sum / n,
               "kl": kl_sum / n, "ce": ce_sum / n, "val_mae": val}
        records.append(rec)
        log.info("epoch %d lr %.2e lambda1 %.3f loss %.4f kl %.4f ce %.4f val_mae %.4f",
                 epoch, lr, weights.lambda1, rec["loss"], rec["kl"], rec["ce"], val)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint.sqck"), params, opt, epoch + 1,
                            extra={"train.val_mae": np.array(history, dtype=np.float64),
                                   **model_entries(model_cfg)})
            with open(os.path.join(out_dir, "metrics.jsonl"), "a") as fh:
                fh.write(json.dumps(rec) + "\n")
    return TrainResult(params, opt, history, records, losses)


def config_dict(cfg) -> dict:
    return asdict(cfg)
