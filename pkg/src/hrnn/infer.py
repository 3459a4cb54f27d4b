"""Stateful one-sample-at-a-time execution of the pooled recurrent model.

The training path evaluates whole sequences with parallel scans; this module
reformulates the same network as a per-token step function with O(1) work and
memory per token.  Recurrent blocks carry their complex state across calls,
each downpool buffers fine steps until a coarse frame completes, and each
uppool queues the expanded output frame so one row is emitted per step.  On
top of the step function: ancestral sampling to PCM audio and a wall-clock
throughput benchmark.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from . import audio as A
from . import layers as L
from . import model as M

_INV_SQRT2 = 0.7071067811865476


# ---------------------------------------------------------------------------
# step state

@dataclass
class BlockState:
    """Complex recurrence carry for one temporal block."""

    h_re: np.ndarray  # [batch, rnn_dim]
    h_im: np.ndarray


@dataclass
class DownState:
    """Fine steps of the partially filled coarse frame (occupancy = count)."""

    buffer: np.ndarray  # [factor - 1, batch, width]
    count: int


@dataclass
class UpState:
    """Expanded output rows for the fine frame in progress, plus the coarse
    output they came from (one frame behind, so emission never looks ahead)."""

    queue: np.ndarray  # [factor, batch, width]
    carry: np.ndarray  # [batch, width]


@dataclass
class StepState:
    position: int
    down_blocks: list[list[BlockState]]
    inner_blocks: list[BlockState]
    up_blocks: list[list[BlockState]]
    downs: list[DownState]
    ups: list[UpState]
    emb_table: np.ndarray  # [vocab, width], constant derived from parameters

    @property
    def batch(self) -> int:
        return self.inner_blocks[0].h_re.shape[0]


def state_size(cfg: M.ModelConfig) -> int:
    """Dynamic scalars carried between steps, per generation stream: one
    complex vector per block, factor-1 pending rows per downpool, and
    factor+1 rows (queue plus carry) per uppool."""
    carries = cfg.num_blocks * 2 * cfg.rnn_dim
    down = sum(p - 1 for p in cfg.pooling_factors) * cfg.width
    up = sum(p + 1 for p in cfg.pooling_factors) * cfg.width
    return carries + down + up


def allocated_state_scalars(state: StepState) -> int:
    """Actually allocated carry/buffer/queue scalars per stream (the cached
    embedding table is a parameter derivative, not recurrent state)."""
    total = 0
    stages = state.down_blocks + [state.inner_blocks] + state.up_blocks
    for stage in stages:
        for b in stage:
            total += b.h_re.size + b.h_im.size
    for d in state.downs:
        total += d.buffer.size
    for u in state.ups:
        total += u.queue.size + u.carry.size
    return total // state.batch


def _full_embed_table(model: M.Model) -> np.ndarray:
    emb = L.embed_codes(np.arange(model.config.vocab)[None, :], model.embed)
    return np.ascontiguousarray(emb.data[0])


def init_state(model: M.Model, batch: int) -> StepState:
    """Zeroed carries and empty buffers; the first step call consumes the
    learned start vector instead of a previous code."""
    if batch < 1:
        raise ValueError(f"batch must be positive, got {batch}")
    cfg = model.config
    d, n = cfg.width, cfg.rnn_dim

    def stage_state():
        return [BlockState(np.zeros((batch, n), dtype=np.float32),
                           np.zeros((batch, n), dtype=np.float32))
                for _ in range(cfg.blocks_per_stage)]

    return StepState(
        position=0,
        down_blocks=[stage_state() for _ in cfg.pooling_factors],
        inner_blocks=stage_state(),
        up_blocks=[stage_state() for _ in cfg.pooling_factors],
        downs=[DownState(np.zeros((p - 1, batch, d), dtype=np.float32), 0)
               for p in cfg.pooling_factors],
        ups=[UpState(np.zeros((p, batch, d), dtype=np.float32),
                     np.zeros((batch, d), dtype=np.float32))
             for p in cfg.pooling_factors],
        emb_table=_full_embed_table(model),
    )


# ---------------------------------------------------------------------------
# one step of each layer, mirroring the parallel path's float32 arithmetic

def _rms(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    # 64-bit accumulation mirrors the training-path mean exactly
    ms = np.mean(np.square(x), axis=-1, keepdims=True, dtype=np.float64)
    return (x / np.sqrt(ms.astype(x.dtype) + L.RMSNORM_EPS)) * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def _block_step(p: L.BlockParams, s: BlockState, x: np.ndarray) -> np.ndarray:
    r_p = p.recur
    z = _rms(x, p.norm1_gain.data)
    u = z @ p.in_w.data + p.in_b.data
    g = _gelu(z @ p.gate_w.data + p.gate_b.data)

    r = expit(u * r_p.recur_gate_scale.data + r_p.recur_gate_bias.data)
    in_gate = expit(u * r_p.input_gate_scale.data + r_p.input_gate_bias.data)
    softplus_decay = np.logaddexp(np.zeros((), dtype=np.float32), r_p.decay_raw.data)
    log_mag = r * (softplus_decay * -L.DECAY_SHARPNESS)
    mag = np.exp(log_mag)
    angle = r * r_p.rotation.data
    a_re = mag * np.cos(angle)
    a_im = mag * np.sin(angle)
    gain = np.sqrt(np.maximum(-np.expm1(log_mag * 2.0), L.GAIN_FLOOR))
    b_re = gain * (in_gate * u)

    h_re = a_re * s.h_re - a_im * s.h_im + b_re
    h_im = a_re * s.h_im + a_im * s.h_re
    s.h_re, s.h_im = h_re, h_im

    x = x + ((h_re * g) @ p.out_w.data + p.out_b.data)
    z2 = _rms(x, p.norm2_gain.data)
    val = z2 @ p.mlp_in_w.data + p.mlp_in_b.data
    mg = _gelu(z2 @ p.mlp_gate_w.data + p.mlp_gate_b.data)
    return x + ((val * mg) @ p.mlp_out_w.data + p.mlp_out_b.data)


def _downpool_frame(pool: L.PoolParams, frames: np.ndarray) -> np.ndarray:
    # frames [factor, batch, width] -> [batch, width]
    factor, groups = pool.factor, pool.groups
    batch, width = frames.shape[1], frames.shape[2]
    fg = frames.reshape(factor, batch, groups, width // groups)
    out = np.einsum("kbgi,goki->bgo", fg, pool.weight.data, optimize=True)
    return out.reshape(batch, width) + pool.bias.data


def _uppool_frame(pool: L.PoolParams, coarse: np.ndarray) -> np.ndarray:
    # coarse [batch, width] -> [factor, batch, width] emission rows
    factor, groups = pool.factor, pool.groups
    batch, width = coarse.shape
    zg = coarse.reshape(batch, groups, width // groups)
    out = np.einsum("bgi,giko->kbgo", zg, pool.weight.data, optimize=True)
    return out.reshape(factor, batch, width) + pool.bias.data


def _pyramid_step(model: M.Model, state: StepState, level: int, x: np.ndarray) -> np.ndarray:
    if level == len(model.config.pooling_factors):
        for bp, bs in zip(model.inner, state.inner_blocks):
            x = _block_step(bp, bs, x)
        return x

    for bp, bs in zip(model.down_stages[level], state.down_blocks[level]):
        x = _block_step(bp, bs, x)
    skip = x

    down, up = state.downs[level], state.ups[level]
    factor = model.down_pools[level].factor
    phase = down.count
    if phase == 0:
        # new fine frame: expand the previous coarse output (zeros initially)
        up.queue = _uppool_frame(model.up_pools[level], up.carry)
    y = up.queue[phase] + skip

    if phase == factor - 1:
        frames = np.concatenate([down.buffer, x[None]], axis=0)
        down.count = 0
        coarse = _downpool_frame(model.down_pools[level], frames)
        up.carry = _pyramid_step(model, state, level + 1, coarse)
    else:
        down.buffer[phase] = x
        down.count = phase + 1

    for bp, bs in zip(model.up_stages[level], state.up_blocks[level]):
        y = _block_step(bp, bs, y)
    return y


def step(model: M.Model, state: StepState,
         prev_codes: np.ndarray | None) -> tuple[np.ndarray, StepState]:
    """Advance every level by one sample; returns next-code logits
    [batch, vocab].  Pass prev_codes=None for the very first step (the model
    starts from its learned start vector), the codes emitted at position t-1
    afterwards.  The state is updated in place and also returned."""
    cfg = model.config
    batch = state.batch
    if state.position == 0:
        if prev_codes is not None:
            raise ValueError("first step must not receive codes; the start vector is used")
        x = np.broadcast_to(model.start.data, (batch, cfg.width)).copy()
    else:
        if prev_codes is None:
            raise ValueError(f"step at position {state.position} requires previous codes")
        prev_codes = np.asarray(prev_codes)
        if prev_codes.shape != (batch,):
            raise ValueError(f"prev_codes shape {prev_codes.shape} != ({batch},)")
        if prev_codes.min() < 0 or prev_codes.max() >= cfg.vocab:
            raise ValueError("codes out of range for vocab")
        x = state.emb_table[prev_codes]

    y = _pyramid_step(model, state, 0, x)
    state.position += 1
    logits = y @ model.head_w.data + model.head_b.data
    return logits, state


# ---------------------------------------------------------------------------
# sampling

def sample_codes(logits: np.ndarray, temperature: float,
                 rng: np.random.Generator) -> np.ndarray:
    """One code per batch row: argmax at temperature 0, otherwise inverse-CDF
    sampling of softmax(logits / temperature) in float64."""
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0:
        return np.argmax(logits, axis=-1).astype(np.uint8)
    z = logits.astype(np.float64) / temperature
    z -= z.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[:, -1:]
    draws = rng.random(logits.shape[0])
    picks = [np.searchsorted(cdf[i], draws[i], side="right") for i in range(len(draws))]
    return np.minimum(picks, logits.shape[1] - 1).astype(np.uint8)


def _model_from_bundle(bundle: M.CheckpointBundle, use_ema: bool) -> M.Model:
    model = M.build(bundle.config, seed=bundle.seed)
    model.load_state(bundle.ema if use_ema else bundle.params)
    return model


def _run_generation(model: M.Model, batch: int, length: int, temperature: float,
                    rng: np.random.Generator) -> np.ndarray:
    state = init_state(model, batch)
    codes = np.empty((batch, length), dtype=np.uint8)
    prev = None
    for t in range(length):
        logits, state = step(model, state, prev)
        prev = sample_codes(logits, temperature, rng)
        codes[:, t] = prev
    return codes


def generate(bundle: M.CheckpointBundle, num_samples: int, length: int,
             temperature: float = 1.0, seed: int = 0, encoding: str = "mulaw",
             sample_rate: int = 16000, use_ema: bool = True) -> list[A.PcmAudio]:
    """Ancestral sampling: num_samples independent streams of `length` codes,
    decoded to PCM on the named 8-bit grid.  Deterministic given the seed.
    The checkpoint does not record which codec built its training data, so
    the caller supplies the encoding."""
    if length < 1:
        raise ValueError(f"length must be positive, got {length}")
    model = _model_from_bundle(bundle, use_ema)
    rng = np.random.Generator(np.random.PCG64(seed))
    codes = _run_generation(model, num_samples, length, temperature, rng)
    return [A.PcmAudio(A.decode(row, encoding).astype(np.float32), sample_rate)
            for row in codes]


def bench_throughput(bundle: M.CheckpointBundle, batch: int, length: int,
                     temperature: float = 1.0, seed: int = 0,
                     use_ema: bool = True) -> dict:
    """Wall-clock generation speed, model construction excluded, sampling
    included.  tokens = batch * length exactly."""
    model = _model_from_bundle(bundle, use_ema)
    rng = np.random.Generator(np.random.PCG64(seed))
    begin = time.perf_counter()
    _run_generation(model, batch, length, temperature, rng)
    seconds = time.perf_counter() - begin
    tokens = batch * length
    return {
        "tokens": tokens,
        "seconds": seconds,
        "tokens_per_s": tokens / seconds,
        "ktok_per_s": tokens / seconds / 1000.0,
    }
