"""Model assembly: a stack of recurrent blocks arranged around a causal
down/up pooling pyramid with additive skip connections, plus the checkpoint
container that serializes parameters and optimizer state.

Structure for pooling_factors (p_0 .. p_{L-1}) and k blocks per stage:

    embed -> [stage down_0, pool p_0] ... [stage down_{L-1}, pool p_{L-1}]
          -> stage inner
          -> [unpool p_{L-1} + skip, stage up_{L-1}] ... [unpool p_0 + skip, stage up_0]
          -> head

which is 2L + 1 stages of k blocks.  Every stage runs at the sample rate of
its level; the innermost runs prod(p) times slower than the signal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import layers as L
from . import tensor as tz

CHECKPOINT_MAGIC = b"HRCK"
CHECKPOINT_VERSION = 1

EMBED_MODES = ("sinusoidal", "linear_scaling", "learned", "learned_dropout")
SCAN_VARIANTS = ("sequential", "tree", "chunked")


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


class CheckpointError(ValueError):
    """Raised for malformed checkpoint bytes."""


@dataclass(frozen=True)
class ModelConfig:
    pooling_factors: tuple[int, ...] = (2, 4, 4, 5)
    blocks_per_stage: int = 4
    width: int = 128
    rnn_dim: int = 256
    conv_groups: int = 128
    mlp_expansion: int = 2
    embed_mode: str = "sinusoidal"
    vocab: int = 256
    scan_variant: str = "sequential"
    scan_workers: int = 1

    def validate(self) -> None:
        if any(int(p) < 2 for p in self.pooling_factors):
            raise ConfigError(f"pooling factors must be >= 2, got {self.pooling_factors}")
        for name in ("blocks_per_stage", "width", "rnn_dim", "conv_groups",
                     "mlp_expansion", "vocab", "scan_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.width % self.conv_groups != 0:
            raise ConfigError(f"width {self.width} not divisible by conv_groups {self.conv_groups}")
        if self.embed_mode not in EMBED_MODES:
            raise ConfigError(f"embed_mode must be one of {EMBED_MODES}, got {self.embed_mode!r}")
        if self.scan_variant not in SCAN_VARIANTS:
            raise ConfigError(f"scan_variant must be one of {SCAN_VARIANTS}, got {self.scan_variant!r}")

    @property
    def total_pooling(self) -> int:
        out = 1
        for p in self.pooling_factors:
            out *= p
        return out

    @property
    def num_stages(self) -> int:
        return 2 * len(self.pooling_factors) + 1

    @property
    def num_blocks(self) -> int:
        return self.num_stages * self.blocks_per_stage


# ---------------------------------------------------------------------------
# config text codec (used inside checkpoints and by the CLI config file)

def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(int(x)) for x in v)
    return str(v)


def _parse_value(ftype, raw: str, key: str):
    raw = raw.strip()
    if ftype == "tuple[int, ...]":
        if raw == "":
            return ()
        try:
            return tuple(int(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    if ftype == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if ftype == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw.replace("-", "_")  # enum-style strings accept hyphenated spellings


def config_to_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_from_items(items: dict[str, str]) -> ModelConfig:
    known = {f.name: f.type for f in fields(ModelConfig)}
    unknown = set(items) - set(known)
    if unknown:
        raise ConfigError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: _parse_value(known[k], v, k) for k, v in items.items()}
    cfg = ModelConfig(**kwargs)
    cfg.validate()
    return cfg


def config_from_text(text: str) -> ModelConfig:
    items = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {line!r}")
        key, _, value = line.partition("=")
        items[key.strip()] = value
    return config_from_items(items)


# ---------------------------------------------------------------------------
# parameter shape map (single source of truth for building and counting)

def _block_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, n, h = cfg.width, cfg.rnn_dim, cfg.mlp_expansion * cfg.width
    return [
        ("norm1_gain", (d,)),
        ("in_w", (d, n)), ("in_b", (n,)),
        ("gate_w", (d, n)), ("gate_b", (n,)),
        ("recur.decay_raw", (n,)), ("recur.rotation", (n,)),
        ("recur.recur_gate_scale", (n,)), ("recur.recur_gate_bias", (n,)),
        ("recur.input_gate_scale", (n,)), ("recur.input_gate_bias", (n,)),
        ("out_w", (n, d)), ("out_b", (d,)),
        ("norm2_gain", (d,)),
        ("mlp_in_w", (d, h)), ("mlp_in_b", (h,)),
        ("mlp_gate_w", (d, h)), ("mlp_gate_b", (h,)),
        ("mlp_out_w", (h, d)), ("mlp_out_b", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    cfg.validate()
    d, g = cfg.width, cfg.conv_groups
    per = d // g
    out: list[tuple[str, tuple[int, ...]]] = []
    if cfg.embed_mode in ("learned", "learned_dropout"):
        out.append(("embed.table", (cfg.vocab, d)))
    else:
        feats = 16 if cfg.embed_mode == "sinusoidal" else 1
        out.append(("embed.proj_w", (feats, d)))
        out.append(("embed.proj_b", (d,)))
    out.append(("start", (d,)))

    def stage(prefix):
        for k in range(cfg.blocks_per_stage):
            for name, shape in _block_shapes(cfg):
                out.append((f"{prefix}.block{k}.{name}", shape))

    for l, p in enumerate(cfg.pooling_factors):
        stage(f"down{l}")
        out.append((f"down{l}.pool.weight", (g, per, p, per)))
        out.append((f"down{l}.pool.bias", (d,)))
    stage("inner")
    for l in reversed(range(len(cfg.pooling_factors))):
        p = cfg.pooling_factors[l]
        out.append((f"up{l}.pool.weight", (g, per, p, per)))
        out.append((f"up{l}.pool.bias", (d,)))
        stage(f"up{l}")
    out.append(("head.w", (d, cfg.vocab)))
    out.append(("head.b", (cfg.vocab,)))
    return out


def count_params(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    """Total parameter count and per-component subtotals."""
    totals: dict[str, int] = {}
    grand = 0
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape)) if shape else 1
        group = name.split(".")[0]
        totals[group] = totals.get(group, 0) + size
        grand += size
    return grand, totals


# ---------------------------------------------------------------------------
# model construction

@dataclass
class Model:
    config: ModelConfig
    embed: L.EmbedParams
    start: tz.Tensor
    down_stages: list[list[L.BlockParams]]
    down_pools: list[L.PoolParams]
    inner: list[L.BlockParams]
    up_pools: list[L.PoolParams]  # indexed by level, up_pools[l] undoes factor p_l
    up_stages: list[list[L.BlockParams]]
    head_w: tz.Tensor
    head_b: tz.Tensor
    params: dict[str, tz.Tensor] = field(default_factory=dict)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place from a name -> array map."""
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}


def _block_leaf_map(p: L.BlockParams) -> list[tuple[str, tz.Tensor]]:
    r = p.recur
    return [
        ("norm1_gain", p.norm1_gain),
        ("in_w", p.in_w), ("in_b", p.in_b),
        ("gate_w", p.gate_w), ("gate_b", p.gate_b),
        ("recur.decay_raw", r.decay_raw), ("recur.rotation", r.rotation),
        ("recur.recur_gate_scale", r.recur_gate_scale), ("recur.recur_gate_bias", r.recur_gate_bias),
        ("recur.input_gate_scale", r.input_gate_scale), ("recur.input_gate_bias", r.input_gate_bias),
        ("out_w", p.out_w), ("out_b", p.out_b),
        ("norm2_gain", p.norm2_gain),
        ("mlp_in_w", p.mlp_in_w), ("mlp_in_b", p.mlp_in_b),
        ("mlp_gate_w", p.mlp_gate_w), ("mlp_gate_b", p.mlp_gate_b),
        ("mlp_out_w", p.mlp_out_w), ("mlp_out_b", p.mlp_out_b),
    ]


def build(cfg: ModelConfig, seed: int = 0) -> Model:
    """Create and initialize all parameters deterministically from the seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    registry: dict[str, tz.Tensor] = {}

    def register(name, tensor):
        registry[name] = tensor
        return tensor

    embed = L.init_embed(rng, cfg.embed_mode, cfg.width, cfg.vocab)
    if cfg.embed_mode in ("learned", "learned_dropout"):
        register("embed.table", embed.table)
    else:
        register("embed.proj_w", embed.proj_w)
        register("embed.proj_b", embed.proj_b)
    start = register("start", tz.Tensor(np.zeros(cfg.width), requires_grad=True))

    def make_stage(prefix):
        blocks = []
        for k in range(cfg.blocks_per_stage):
            b = L.init_block(rng, cfg.width, cfg.rnn_dim, cfg.mlp_expansion)
            for name, t in _block_leaf_map(b):
                register(f"{prefix}.block{k}.{name}", t)
            blocks.append(b)
        return blocks

    down_stages, down_pools = [], []
    for l, p in enumerate(cfg.pooling_factors):
        down_stages.append(make_stage(f"down{l}"))
        pool = L.init_downpool(rng, cfg.width, int(p), cfg.conv_groups)
        register(f"down{l}.pool.weight", pool.weight)
        register(f"down{l}.pool.bias", pool.bias)
        down_pools.append(pool)

    inner = make_stage("inner")

    levels = len(cfg.pooling_factors)
    up_pools: list[L.PoolParams | None] = [None] * levels
    up_stages: list[list[L.BlockParams] | None] = [None] * levels
    for l in reversed(range(levels)):
        pool = L.init_uppool(rng, cfg.width, int(cfg.pooling_factors[l]), cfg.conv_groups)
        register(f"up{l}.pool.weight", pool.weight)
        register(f"up{l}.pool.bias", pool.bias)
        up_pools[l] = pool
        up_stages[l] = make_stage(f"up{l}")

    head_w = register("head.w", tz.Tensor(np.zeros((cfg.width, cfg.vocab)), requires_grad=True))
    head_b = register("head.b", tz.Tensor(np.zeros(cfg.vocab), requires_grad=True))

    expected = param_shapes(cfg)
    got = [(name, t.data.shape) for name, t in registry.items()]
    if got != expected:
        raise AssertionError("parameter registry does not match the declared shape map")

    return Model(cfg, embed, start, down_stages, down_pools, inner,
                 up_pools, up_stages, head_w, head_b, registry)


# ---------------------------------------------------------------------------
# forward pass

def forward_logits(model: Model, codes: np.ndarray, variant: str | None = None,
                   workers: int | None = None,
                   embed_dropout_rng: np.random.Generator | None = None) -> tz.Tensor:
    """codes [batch, time] -> next-code logits [batch, time, vocab].

    Position t receives the embedding of codes[t-1] (a learned start vector
    at t = 0), so logits[t] is the prediction for codes[t] from history only.
    embed_dropout_rng drives learned_dropout training noise; None disables it.
    """
    cfg = model.config
    variant = cfg.scan_variant if variant is None else variant
    workers = cfg.scan_workers if workers is None else workers
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError(f"codes must be [batch, time], got shape {codes.shape}")
    batch, steps = codes.shape
    if steps % cfg.total_pooling != 0:
        raise ValueError(
            f"sequence length {steps} not divisible by total pooling {cfg.total_pooling}")
    if codes.min() < 0 or codes.max() >= cfg.vocab:
        raise ValueError("codes out of range for vocab")

    emb = L.embed_codes(codes, model.embed, dropout_rng=embed_dropout_rng)
    start = tz.broadcast_to(tz.reshape(model.start, (1, 1, cfg.width)), (batch, 1, cfg.width))
    x = tz.concat([start, tz.slice_axis(emb, 1, 0, steps - 1)], axis=1)

    skips = []
    for stage, pool in zip(model.down_stages, model.down_pools):
        for block in stage:
            x = L.temporal_block(x, block, variant=variant, workers=workers)
        skips.append(x)
        x = L.downpool(x, pool)
    for block in model.inner:
        x = L.temporal_block(x, block, variant=variant, workers=workers)
    for l in reversed(range(len(model.up_pools))):
        x = tz.add(L.uppool(x, model.up_pools[l]), skips[l])
        for block in model.up_stages[l]:
            x = L.temporal_block(x, block, variant=variant, workers=workers)

    return tz.add(tz.matmul(x, model.head_w), model.head_b)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class CheckpointBundle:
    config: ModelConfig
    step: int
    seed: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def save_checkpoint(bundle: CheckpointBundle) -> bytes:
    names = list(bundle.params)
    for section in (bundle.ema, bundle.m, bundle.v):
        if list(section) != names:
            raise CheckpointError("params, ema, m, v must share one name set and order")
    cfg_text = config_to_text(bundle.config).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<IQQI", CHECKPOINT_VERSION, bundle.step,
                                         bundle.seed, len(cfg_text)), cfg_text,
           struct.pack("<I", len(names))]
    for name in names:
        arr = bundle.params[name]
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for section in (bundle.params, bundle.ema, bundle.m, bundle.v):
        for name in names:
            out.append(np.ascontiguousarray(section[name], dtype="<f4").tobytes())
    return b"".join(out)


def load_checkpoint(data: bytes) -> CheckpointBundle:
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    at = 4
    try:
        version, step, seed, cfg_len = struct.unpack_from("<IQQI", data, at)
        at += struct.calcsize("<IQQI")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        cfg = config_from_text(data[at:at + cfg_len].decode())
        at += cfg_len
        (count,) = struct.unpack_from("<I", data, at)
        at += 4
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, at)
            at += 4
            name = data[at:at + name_len].decode()
            at += name_len
            (ndim,) = struct.unpack_from("<B", data, at)
            at += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, at)
            at += 8 * ndim
            shapes.append((name, tuple(int(s) for s in shape)))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint header: {exc}") from None

    if shapes != param_shapes(cfg):
        raise CheckpointError("checkpoint parameter table does not match its config")

    sections = []
    for _ in range(4):
        section = {}
        for name, shape in shapes:
            size = 4 * int(np.prod(shape)) if shape else 4
            blob = data[at:at + size]
            if len(blob) != size:
                raise CheckpointError("checkpoint data truncated")
            section[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
            at += size
        sections.append(section)
    if at != len(data):
        raise CheckpointError(f"{len(data) - at} trailing bytes after checkpoint payload")
    return CheckpointBundle(cfg, step, seed, *sections)


def new_bundle(cfg: ModelConfig, seed: int = 0) -> CheckpointBundle:
    """Fresh training state: initialized params, ema = params, zero moments."""
    m = build(cfg, seed=seed)
    params = m.state_arrays()
    zeros = {name: np.zeros_like(a) for name, a in params.items()}
    ema = {name: a.copy() for name, a in params.items()}
    return CheckpointBundle(cfg, 0, seed, params, ema, zeros,
                            {name: np.zeros_like(a) for name, a in params.items()})


def save_checkpoint_file(path, bundle: CheckpointBundle) -> None:
    from pathlib import Path

    Path(path).write_bytes(save_checkpoint(bundle))


def load_checkpoint_file(path) -> CheckpointBundle:
    from pathlib import Path

    return load_checkpoint(Path(path).read_bytes())
