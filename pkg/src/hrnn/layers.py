"""Model layers: code embeddings, RMS normalization, the gated complex
linear recurrence with its surrounding residual block, and the causal
pooling pair that changes the sample rate between stages.

Shapes follow one convention: activations are [batch, time, channels]; the
scan engine itself runs on [time, batch*channels] planes and the fold between
the two layouts is handled here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import scan as S
from . import tensor as tz

RMSNORM_EPS = 1e-6
GAIN_FLOOR = 1e-12  # keeps sqrt(1 - |a|^2) differentiable as |a| -> 1
DECAY_SHARPNESS = 8.0


# ---------------------------------------------------------------------------
# embeddings

EMBED_DROPOUT_RATE = 0.1


@dataclass
class EmbedParams:
    mode: str  # sinusoidal | linear_scaling | learned | learned_dropout
    proj_w: tz.Tensor | None = None  # [features, width] for feature modes
    proj_b: tz.Tensor | None = None
    table: tz.Tensor | None = None  # [vocab, width] for table modes


def code_value(codes) -> np.ndarray:
    """Map codes {0..255} onto the decode grid [-1, 1]."""
    return np.asarray(codes).astype(np.float64) / 127.5 - 1.0


def sinusoid_feature_table(vocab: int = 256, harmonics: int = 8) -> np.ndarray:
    """Fixed feature rows [sin(pi v 2^k), cos(pi v 2^k)] for k < harmonics.
    Computed in float64; all vocab rows are pairwise distinct."""
    v = code_value(np.arange(vocab))
    mult = np.pi * v[:, None] * (2.0 ** np.arange(harmonics))[None, :]
    return np.concatenate([np.sin(mult), np.cos(mult)], axis=1)


def linear_feature_table(vocab: int = 256) -> np.ndarray:
    return code_value(np.arange(vocab))[:, None]


def init_embed(rng: np.random.Generator, mode: str, width: int, vocab: int = 256) -> EmbedParams:
    if mode in ("learned", "learned_dropout"):
        table = rng.standard_normal((vocab, width)) / math.sqrt(width)
        return EmbedParams(mode, table=tz.Tensor(table, requires_grad=True))
    if mode == "sinusoidal":
        feats = 2 * 8
    elif mode == "linear_scaling":
        feats = 1
    else:
        raise ValueError(f"unknown embed mode {mode!r}")
    w = rng.standard_normal((feats, width)) / math.sqrt(feats)
    return EmbedParams(mode, proj_w=tz.Tensor(w, requires_grad=True),
                       proj_b=tz.Tensor(np.zeros(width), requires_grad=True))


def embed_codes(codes: np.ndarray, params: EmbedParams,
                dropout_rng: np.random.Generator | None = None) -> tz.Tensor:
    """codes [batch, time] uint8 -> activations [batch, time, width].

    dropout_rng enables the learned_dropout mode's training-time dropout;
    leave it None for evaluation and generation."""
    codes = np.asarray(codes)
    if params.mode in ("learned", "learned_dropout"):
        out = tz.lookup(params.table, codes)
        if params.mode == "learned_dropout" and dropout_rng is not None:
            keep = 1.0 - EMBED_DROPOUT_RATE
            mask = dropout_rng.random(out.shape) < keep
            # inverted scaling keeps the expected activation unchanged
            return tz.mul(out, tz.Tensor((mask / keep).astype(out.data.dtype)))
        return out
    if params.mode == "sinusoidal":
        table = sinusoid_feature_table()
    else:
        table = linear_feature_table()
    feats = tz.Tensor(table[codes])  # constant features, grads go to the projection
    return tz.add(tz.matmul(feats, params.proj_w), params.proj_b)


# ---------------------------------------------------------------------------
# normalization

def rmsnorm(x: tz.Tensor, gain: tz.Tensor, eps: float = RMSNORM_EPS) -> tz.Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the channel axis."""
    ms = tz.reduce_mean(tz.square(x), axis=-1, keepdims=True)
    return tz.mul(tz.div(x, tz.sqrt(tz.add(ms, eps))), gain)


# ---------------------------------------------------------------------------
# gated complex linear recurrence

@dataclass
class RecurrenceParams:
    """Per-channel recurrence: state[t] = a[t] * state[t-1] + b[t] with
    a[t] = exp((-DECAY_SHARPNESS * softplus(decay_raw) + i * rotation) * r[t])
    b[t] = sqrt(1 - |a[t]|^2) * (input_gate[t] * u[t])
    where both gates are diagonal sigmoids of the input u."""

    decay_raw: tz.Tensor  # [n], softplus keeps the decay rate positive
    rotation: tz.Tensor  # [n], phase advance per step at full recall
    recur_gate_scale: tz.Tensor  # [n]
    recur_gate_bias: tz.Tensor  # [n]
    input_gate_scale: tz.Tensor  # [n]
    input_gate_bias: tz.Tensor  # [n]


def init_recurrence(rng: np.random.Generator, rnn_dim: int,
                    mag_range=(0.9, 0.999), max_angle=math.pi / 2) -> RecurrenceParams:
    mag = rng.uniform(*mag_range, size=rnn_dim)
    # invert mag = exp(-DECAY_SHARPNESS * softplus(decay_raw)) at r = 1
    decay_raw = np.log(np.expm1(-np.log(mag) / DECAY_SHARPNESS))
    return RecurrenceParams(
        decay_raw=tz.Tensor(decay_raw, requires_grad=True),
        rotation=tz.Tensor(rng.uniform(0.0, max_angle, size=rnn_dim), requires_grad=True),
        recur_gate_scale=tz.Tensor(rng.standard_normal(rnn_dim), requires_grad=True),
        recur_gate_bias=tz.Tensor(np.zeros(rnn_dim), requires_grad=True),
        input_gate_scale=tz.Tensor(rng.standard_normal(rnn_dim), requires_grad=True),
        input_gate_bias=tz.Tensor(np.zeros(rnn_dim), requires_grad=True),
    )


def _fold_time_major(x: tz.Tensor, batch: int, steps: int, channels: int) -> tz.Tensor:
    return tz.reshape(tz.moveaxis(x, 0, 1), (steps, batch * channels))


def gated_complex_recurrence(u: tz.Tensor, params: RecurrenceParams,
                             variant: str = "sequential", workers: int = 1,
                             h0: tuple[tz.Tensor, tz.Tensor] | None = None) -> tz.Tensor:
    """u [batch, time, n] -> real state plane [batch, time, n].

    The recall gate r scales both the decay exponent and the phase, so a
    channel that ignores its input (r near 0) holds state with |a| near 1;
    the input normalization sqrt(1 - |a|^2) keeps state magnitude bounded."""
    batch, steps, channels = u.shape
    r = tz.sigmoid(tz.add(tz.mul(u, params.recur_gate_scale), params.recur_gate_bias))
    in_gate = tz.sigmoid(tz.add(tz.mul(u, params.input_gate_scale), params.input_gate_bias))

    log_mag = tz.mul(r, tz.mul(tz.softplus(params.decay_raw), -DECAY_SHARPNESS))
    angle = tz.mul(r, params.rotation)
    mag = tz.exp(log_mag)
    a_re = tz.mul(mag, tz.cos(angle))
    a_im = tz.mul(mag, tz.sin(angle))
    # 1 - |a|^2 = -expm1(2 log|a|), floored before the sqrt for grad safety
    gain = tz.sqrt(tz.maximum_scalar(tz.neg(tz.expm1(tz.mul(log_mag, 2.0))), GAIN_FLOOR))
    b_re = tz.mul(gain, tz.mul(in_gate, u))

    fold = lambda t: _fold_time_major(t, batch, steps, channels)
    b_im = tz.Tensor(np.zeros((steps, batch * channels), dtype=u.data.dtype))
    h0_re, h0_im = h0 if h0 is not None else (None, None)
    states = S.linear_recurrence(fold(a_re), fold(a_im), fold(b_re), b_im,
                                 h0_re, h0_im, variant=variant, workers=workers)
    real_plane = tz.reshape(tz.slice_axis(states, 0, 0, 1), (steps, batch, channels))
    return tz.moveaxis(real_plane, 0, 1)


# ---------------------------------------------------------------------------
# residual temporal block

@dataclass
class BlockParams:
    norm1_gain: tz.Tensor
    in_w: tz.Tensor
    in_b: tz.Tensor
    gate_w: tz.Tensor
    gate_b: tz.Tensor
    recur: RecurrenceParams
    out_w: tz.Tensor
    out_b: tz.Tensor
    norm2_gain: tz.Tensor
    mlp_in_w: tz.Tensor
    mlp_in_b: tz.Tensor
    mlp_gate_w: tz.Tensor
    mlp_gate_b: tz.Tensor
    mlp_out_w: tz.Tensor
    mlp_out_b: tz.Tensor


def _linear_init(rng, fan_in: int, fan_out: int, zero: bool = False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
    return (tz.Tensor(w, requires_grad=True),
            tz.Tensor(np.zeros(fan_out), requires_grad=True))


def init_block(rng: np.random.Generator, width: int, rnn_dim: int, mlp_expansion: int) -> BlockParams:
    hidden = mlp_expansion * width
    in_w, in_b = _linear_init(rng, width, rnn_dim)
    gate_w, gate_b = _linear_init(rng, width, rnn_dim)
    out_w, out_b = _linear_init(rng, rnn_dim, width, zero=True)  # residual starts as identity
    mlp_in_w, mlp_in_b = _linear_init(rng, width, hidden)
    mlp_gate_w, mlp_gate_b = _linear_init(rng, width, hidden)
    mlp_out_w, mlp_out_b = _linear_init(rng, hidden, width, zero=True)
    ones = tz.Tensor(np.ones(width), requires_grad=True)
    return BlockParams(
        norm1_gain=ones,
        in_w=in_w, in_b=in_b, gate_w=gate_w, gate_b=gate_b,
        recur=init_recurrence(rng, rnn_dim),
        out_w=out_w, out_b=out_b,
        norm2_gain=tz.Tensor(np.ones(width), requires_grad=True),
        mlp_in_w=mlp_in_w, mlp_in_b=mlp_in_b,
        mlp_gate_w=mlp_gate_w, mlp_gate_b=mlp_gate_b,
        mlp_out_w=mlp_out_w, mlp_out_b=mlp_out_b,
    )


def temporal_block(x: tz.Tensor, p: BlockParams, variant: str = "sequential",
                   workers: int = 1) -> tz.Tensor:
    """Pre-norm residual block: gated recurrence half, then gated MLP half."""
    z = rmsnorm(x, p.norm1_gain)
    u = tz.add(tz.matmul(z, p.in_w), p.in_b)
    g = tz.gelu(tz.add(tz.matmul(z, p.gate_w), p.gate_b))
    y = tz.mul(gated_complex_recurrence(u, p.recur, variant=variant, workers=workers), g)
    x = tz.add(x, tz.add(tz.matmul(y, p.out_w), p.out_b))

    z = rmsnorm(x, p.norm2_gain)
    val = tz.add(tz.matmul(z, p.mlp_in_w), p.mlp_in_b)
    mg = tz.gelu(tz.add(tz.matmul(z, p.mlp_gate_w), p.mlp_gate_b))
    return tz.add(x, tz.add(tz.matmul(tz.mul(val, mg), p.mlp_out_w), p.mlp_out_b))


# ---------------------------------------------------------------------------
# causal pooling

@dataclass
class PoolParams:
    factor: int
    groups: int
    weight: tz.Tensor  # down: [g, out_per_g, p, in_per_g]; up: [g, in_per_g, p, out_per_g]
    bias: tz.Tensor  # [width]


def init_downpool(rng: np.random.Generator, width: int, factor: int, groups: int) -> PoolParams:
    per = width // groups
    w = rng.standard_normal((groups, per, factor, per)) / math.sqrt(factor * per)
    return PoolParams(factor, groups, tz.Tensor(w, requires_grad=True),
                      tz.Tensor(np.zeros(width), requires_grad=True))


def init_uppool(rng: np.random.Generator, width: int, factor: int, groups: int) -> PoolParams:
    per = width // groups
    w = rng.standard_normal((groups, per, factor, per)) / math.sqrt(per)
    return PoolParams(factor, groups, tz.Tensor(w, requires_grad=True),
                      tz.Tensor(np.zeros(width), requires_grad=True))


def downpool(x: tz.Tensor, p: PoolParams) -> tz.Tensor:
    """[batch, time, width] -> [batch, time/factor, width]: non-overlapping
    frames of `factor` steps mixed by a grouped projection.  Frame f sees
    exactly samples f*factor .. (f+1)*factor - 1, so no lookahead."""
    batch, steps, width = x.shape
    factor, groups = p.factor, p.groups
    if steps % factor != 0:
        raise ValueError(f"downpool: time {steps} not divisible by factor {factor}")
    per = width // groups
    frames_shape = (batch, steps // factor, factor, groups, per)

    x_frames = x.data.reshape(frames_shape)
    w, b = p.weight, p.bias
    out = np.einsum("bfkgi,goki->bfgo", x_frames, w.data, optimize=True)
    out = out.reshape(batch, steps // factor, width) + b.data

    def bwd(g):
        gf = g.reshape(batch, steps // factor, groups, per)
        gx = np.einsum("bfgo,goki->bfkgi", gf, w.data, optimize=True).reshape(batch, steps, width)
        gw = np.einsum("bfkgi,bfgo->goki", x_frames, gf, optimize=True)
        gb = g.reshape(-1, width).sum(axis=0)
        return gx, gw, gb

    return tz.record_node(out, (x, w, b), bwd)


def uppool(z: tz.Tensor, p: PoolParams) -> tz.Tensor:
    """[batch, frames, width] -> [batch, frames*factor, width]: each frame
    expands to `factor` steps, shifted one whole frame into the future so
    output step t only depends on frames strictly before t/factor."""
    batch, frames, width = z.shape
    factor, groups = p.factor, p.groups
    per = width // groups
    w, b = p.weight, p.bias

    z_shift = np.concatenate([np.zeros_like(z.data[:, :1]), z.data[:, :-1]], axis=1)
    zg = z_shift.reshape(batch, frames, groups, per)
    out = np.einsum("bfgi,giko->bfkgo", zg, w.data, optimize=True)
    out = out.reshape(batch, frames * factor, width) + b.data

    def bwd(g):
        gf = g.reshape(batch, frames, factor, groups, per)
        gz_shift = np.einsum("bfkgo,giko->bfgi", gf, w.data, optimize=True).reshape(batch, frames, width)
        gz = np.concatenate([gz_shift[:, 1:], np.zeros_like(gz_shift[:, :1])], axis=1)
        gw = np.einsum("bfgi,bfkgo->giko", zg, gf, optimize=True)
        gb = g.reshape(-1, width).sum(axis=0)
        return gz, gw, gb

    return tz.record_node(out, (z, w, b), bwd)
