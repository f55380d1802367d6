"""Recurrent attention decoder that localizes and classifies one object per step.

At step t the decoder scores every feature cell against the previous hidden
state, pools the feature map with the resulting attention map, feeds the
pooled vector together with the previous class scores into an LSTM, and
scores the LSTM output against the embedded prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import GRID_FACTOR
from .prototypes import PrototypeBank, average_pooled, embed_prototypes

MAX_WAYS = 10


@dataclass(frozen=True)
class DecoderDims:
    feature_dim: int
    attn_dim: int = 64
    hidden: int = 128
    input_dim: int = 96
    embed_dim: int = 64
    max_ways: int = MAX_WAYS


def _glorot(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))


def init_decoder(rng: np.random.Generator, dims: DecoderDims) -> dict:
    d, a, hd, i, e = dims.feature_dim, dims.attn_dim, dims.hidden, dims.input_dim, dims.embed_dim
    slots = dims.max_ways + 1
    lstm_b = np.zeros(4 * hd)
    lstm_b[hd:2 * hd] = 1.0  # forget gate starts open
    raw = {
        "attn.W_f": _glorot(rng, d, a),
        "attn.W_h": _glorot(rng, hd, a),
        "attn.v": rng.normal(0.0, 1.0 / np.sqrt(a), a),
        "mix.W_k": _glorot(rng, d, i),
        "mix.W_c": _glorot(rng, slots, i),
        "lstm.W_x": _glorot(rng, i, 4 * hd),
        "lstm.W_h": _glorot(rng, hd, 4 * hd),
        "lstm.b": lstm_b,
        "embed.query.w": _glorot(rng, hd, e),
        "embed.query.b": np.zeros(e),
        "embed.proto.w": _glorot(rng, d, e),
        "embed.proto.b": np.zeros(e),
    }
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def slot_count(params) -> int:
    return params["mix.W_c"].shape[0]


def pad_matrix(num_classes: int, slots: int) -> np.ndarray:
    """(C+1, slots) map: class c -> slot c, background -> last slot."""
    if num_classes + 1 > slots:
        raise ValueError(f"{num_classes} ways exceed the decoder's {slots - 1}-way capacity")
    m = np.zeros((num_classes + 1, slots))
    m[np.arange(num_classes), np.arange(num_classes)] = 1.0
    m[num_classes, slots - 1] = 1.0
    return m


@dataclass
class DecoderState:
    h: Tensor
    cell: Tensor
    prev_scores: Tensor  # padded to the decoder's slot count


def initial_state(params: dict, num_classes: int) -> DecoderState:
    hd = params["attn.W_h"].shape[0]
    prev = pad_matrix(num_classes, slot_count(params)).sum(axis=0) / (num_classes + 1)
    return DecoderState(Tensor(np.zeros(hd)), Tensor(np.zeros(hd)), Tensor(prev))


@dataclass
class FeatureContext:
    """Per-image quantities reused across decoder steps."""

    grid: tuple
    flat: Tensor   # (gh*gw, D)
    proj: Tensor   # (gh*gw, A) = flat @ W_f

    @classmethod
    def build(cls, fmap: Tensor, params: dict) -> "FeatureContext":
        gh, gw, d = fmap.shape
        flat = fmap.reshape(gh * gw, d)
        if d != params["attn.W_f"].shape[0]:
            raise ad.ShapeError(f"feature dim {d} does not match attn.W_f {params['attn.W_f'].shape}")
        return cls((gh, gw), flat, ad.matmul(flat, params["attn.W_f"]))


def _context(f, params) -> FeatureContext:
    return f if isinstance(f, FeatureContext) else FeatureContext.build(f, params)


def attention_logits(ctx: FeatureContext, state: DecoderState, params) -> Tensor:
    hid = ad.matmul(state.h, params["attn.W_h"])
    return ad.matmul(ad.tanh(ctx.proj + hid), params["attn.v"])


def attention_step(f, state: DecoderState, params: dict) -> Tensor:
    """Attention map over the feature grid, softmax-normalized over all cells."""
    ctx = _context(f, params)
    return ad.softmax(attention_logits(ctx, state, params)).reshape(ctx.grid)


def pool_attention(f, alpha) -> Tensor:
    """Convex combination of cell features under the attention map."""
    alpha = ad.constant(alpha)
    if abs(float(alpha.value.sum()) - 1.0) > 1e-6 or np.any(alpha.value < 0):
        raise ValueError("attention map is not a probability grid")
    flat = f.flat if isinstance(f, FeatureContext) else f.reshape(-1, f.shape[-1])
    return ad.matmul(alpha.reshape(1, -1), flat).reshape(flat.shape[1])


def lstm_step(x: Tensor, h: Tensor, cell: Tensor, params: dict):
    hd = h.shape[0]
    z = ad.matmul(x, params["lstm.W_x"]) + ad.matmul(h, params["lstm.W_h"]) + params["lstm.b"]
    i = ad.sigmoid(z[0:hd])
    fg = ad.sigmoid(z[hd:2 * hd])
    g = ad.tanh(z[2 * hd:3 * hd])
    o = ad.sigmoid(z[3 * hd:4 * hd])
    new_cell = fg * cell + i * g
    return o * ad.tanh(new_cell), new_cell


@dataclass
class StepResult:
    alpha: Tensor       # (gh, gw)
    log_alpha: Tensor   # (gh * gw,)
    scores: Tensor      # (C + 1,)
    log_scores: Tensor  # (C + 1,)
    pooled: Tensor      # (D,)
    state: DecoderState


def advance(ctx: FeatureContext, state: DecoderState, params: dict):
    """Attention, pooling and LSTM update; returns (logits, alpha_flat, pooled, h, cell)."""
    e = attention_logits(ctx, state, params)
    alpha = ad.softmax(e)
    pooled = ad.matmul(alpha, ctx.flat)
    x = ad.matmul(pooled, params["mix.W_k"]) + ad.matmul(state.prev_scores, params["mix.W_c"])
    h, cell = lstm_step(x, state.h, state.cell, params)
    return e, alpha, pooled, h, cell


def decoder_step(f, state: DecoderState, bank: PrototypeBank, params: dict) -> StepResult:
    if bank is None or bank.embedded.shape[0] == 0:
        raise ValueError("empty prototype bank")
    ctx = _context(f, params)
    n_cls = bank.num_classes
    e, alpha, pooled, h, cell = advance(ctx, state, params)
    query = ad.matmul(h, params["embed.query.w"]) + params["embed.query.b"]
    logits = ad.matmul(bank.embedded, query)
    scores = ad.softmax(logits)
    padded = ad.matmul(scores, pad_matrix(n_cls, slot_count(params)))
    return StepResult(
        alpha=alpha.reshape(ctx.grid),
        log_alpha=ad.log_softmax(e),
        scores=scores,
        log_scores=ad.log_softmax(logits),
        pooled=pooled,
        state=DecoderState(h, cell, padded),
    )


def decode_train(f, bank: PrototypeBank, params: dict, steps: int) -> list:
    """Run ``steps`` decoder steps from the initial state; returns StepResults."""
    if steps < 1:
        raise ValueError("decode_train needs at least one step")
    ctx = _context(f, params)
    state = initial_state(params, bank.num_classes)
    out = []
    for _ in range(steps):
        res = decoder_step(ctx, state, bank, params)
        out.append(res)
        state = res.state
    return out


def decode_infer(f, bank: PrototypeBank, params: dict, t_max: int = 32) -> list:
    """Decode until the background class wins or ``t_max`` steps elapse.

    Returns [((y, x), class)] with points in image pixels.
    """
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    preds = []
    with ad.no_grad():
        ctx = _context(f, params)
        gw = ctx.grid[1]
        state = initial_state(params, bank.num_classes)
        for _ in range(t_max):
            res = decoder_step(ctx, state, bank, params)
            cls = int(np.argmax(res.scores.value))
            if cls == bank.num_classes:
                break
            cell = int(np.argmax(res.alpha.value))
            preds.append(((GRID_FACTOR * (cell // gw), GRID_FACTOR * (cell % gw)), cls))
            state = res.state
    return preds


def attention_prototypes(support, num_classes: int, params: dict) -> PrototypeBank:
    """Prototypes pooled by the decoder's own attention instead of label maps.

    Each support image is decoded with teacher forcing for n_s + 1 steps,
    feeding the previous ground-truth class as the score vector; the pooled
    vector of step t goes to the class of label t and the final step's to
    the background.
    """
    slots = slot_count(params)
    pad = pad_matrix(num_classes, slots)
    pooled, classes = [], []
    for fmap, labels in support:
        ctx = _context(fmap, params)
        state = initial_state(params, num_classes)
        seq = [int(c) for _, _, c in labels] + [num_classes]
        rows = []
        for cls in seq:
            _, _, k, h, cell = advance(ctx, state, params)
            rows.append(k.reshape(1, -1))
            state = DecoderState(h, cell, Tensor(pad[cls]))
        pooled.append(ad.concat(rows, axis=0))
        classes.extend(seq[:-1] + ["bg"])
    return embed_prototypes(average_pooled(pooled, classes, num_classes), params)
