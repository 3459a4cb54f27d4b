"""Training loop: decoupled-weight-decay Adam with linear warmup, shadow
weights (EMA) for evaluation, deterministic shuffling and resume, and a
plain-text metric log.

Determinism contract: everything downstream of (dataset bytes, configs) is
reproducible.  The epoch permutation is derived from (seed, epoch) alone, the
data position is derived from the step counter, gradient shards are reduced
in a fixed order, and optimizer state lives in the checkpoint, so a resumed
run continues bit-for-bit where the interrupted one would have gone.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tz
from .audio import QuantizedDataset
from .model import (CheckpointBundle, ConfigError, Model, ModelConfig, build,
                    config_from_items, forward_logits, new_bundle,
                    save_checkpoint_file)

LOG2_E = 1.4426950408889634  # nats -> bits


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 1000
    batch_size: int = 32
    epochs: int = 500
    ema_rate: float = 0.999
    grad_shards: int = 1
    grad_clip: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("warmup_steps", "batch_size", "epochs", "grad_shards"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2", "ema_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be non-negative")
        if self.batch_size % self.grad_shards != 0:
            raise ConfigError(
                f"batch_size {self.batch_size} not divisible by grad_shards {self.grad_shards}")


def train_config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


def train_config_from_items(items: dict[str, str]) -> TrainConfig:
    known = {f.name: f.type for f in fields(TrainConfig)}
    unknown = set(items) - set(known)
    if unknown:
        raise ConfigError(f"unknown train config key(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, raw in items.items():
        try:
            kwargs[key] = int(raw) if known[key] == "int" else float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def parse_config_file(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Flat key=value file covering both configs; keys are exactly the two
    dataclasses' field names, any unknown key is an error."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model_items, train_items = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: malformed config line {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in model_items or key in train_items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in model_keys:
            model_items[key] = value
        elif key in train_keys:
            train_items[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    return config_from_items(model_items), train_config_from_items(train_items)


# ---------------------------------------------------------------------------
# loss

def nll_loss(logits: tz.Tensor, targets: np.ndarray) -> tz.Tensor:
    """Mean negative log-likelihood of the targets in bits per code.
    A uniform predictor over 256 codes scores exactly 8."""
    lse = tz.logsumexp(logits, axis=-1)
    picked = tz.take_last(logits, np.asarray(targets))
    return tz.mul(tz.reduce_mean(tz.sub(lse, picked)), LOG2_E)


# ---------------------------------------------------------------------------
# optimizer

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero over warmup_steps, then constant."""
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def decay_mask(params: dict[str, tz.Tensor]) -> dict[str, bool]:
    """Weight decay applies only to matrices (ndim >= 2): projection and pool
    weights.  Biases, gains, and recurrence parameters are exempt."""
    return {name: t.data.ndim >= 2 for name, t in params.items()}


def adamw_step(params: dict[str, tz.Tensor], grads: dict[str, np.ndarray],
               m: dict[str, np.ndarray], v: dict[str, np.ndarray],
               step: int, lr: float, cfg: TrainConfig,
               mask: dict[str, bool] | None = None) -> None:
    """One decoupled-weight-decay Adam update, in place.  `step` is 1-based
    and drives bias correction."""
    mask = decay_mask(params) if mask is None else mask
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for name, p in params.items():
        g = grads[name]
        m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if mask[name] and cfg.weight_decay > 0.0:
            update = update + cfg.weight_decay * p.data
        p.data = p.data - lr * update


def ema_update(ema: dict[str, np.ndarray], params: dict[str, tz.Tensor], rate: float) -> None:
    for name, p in params.items():
        ema[name] = rate * ema[name] + (1.0 - rate) * p.data


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in grads:
        g = grads[name].astype(np.float64, copy=False)
        total += float((g * g).sum())
    return math.sqrt(total)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float, norm: float) -> None:
    if max_norm > 0.0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for name in grads:
            grads[name] = grads[name] * scale


# ---------------------------------------------------------------------------
# gradients

def compute_gradients(model: Model, codes: np.ndarray,
                      dropout_rng: np.random.Generator | None = None,
                      ) -> tuple[float, dict[str, np.ndarray]]:
    """Loss in bits and gradient arrays for one microbatch."""
    with tz.recording():
        logits = forward_logits(model, codes, embed_dropout_rng=dropout_rng)
        loss = nll_loss(logits, codes)
        grads = tz.backward(loss)
    out = {}
    for name, t in model.params.items():
        g = grads.get(t)
        out[name] = g.data if g is not None else np.zeros_like(t.data)
    return float(loss.data), out


def compute_sharded_gradients(model: Model, codes: np.ndarray, shards: int,
                              dropout_rng: np.random.Generator | None = None,
                              ) -> tuple[float, dict[str, np.ndarray]]:
    """Split the batch into equal shards, then average losses and gradients
    in shard order.  The reduction order is fixed, so the result for a given
    shard count is reproducible.  One dropout stream is consumed in batch
    order, so the masks each sequence sees do not depend on the shard count."""
    batch = codes.shape[0]
    if batch % shards != 0:
        raise ConfigError(f"batch of {batch} not divisible into {shards} shards")
    if shards == 1:
        return compute_gradients(model, codes, dropout_rng)
    per = batch // shards
    loss_sum = 0.0
    acc: dict[str, np.ndarray] | None = None
    for k in range(shards):
        loss_k, grads_k = compute_gradients(model, codes[k * per:(k + 1) * per],
                                            dropout_rng)
        loss_sum += loss_k
        if acc is None:
            acc = grads_k
        else:
            for name in acc:
                acc[name] = acc[name] + grads_k[name]
    inv = np.float32(1.0 / shards) if next(iter(acc.values())).dtype == np.float32 else 1.0 / shards
    for name in acc:
        acc[name] = acc[name] * inv
    return loss_sum / shards, acc


# ---------------------------------------------------------------------------
# training loop

def epoch_permutation(seed: int, epoch: int, count: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: QuantizedDataset,
          out_dir, resume: CheckpointBundle | None = None,
          max_steps: int | None = None, stop_below_bits: float | None = None,
          checkpoint_every: int | None = None, log_fn=None) -> CheckpointBundle:
    """Run (or continue) training, writing metrics.log and checkpoints into
    out_dir.  Returns the final bundle, which is also written to
    ckpt_latest.hrck."""
    model_cfg.validate()
    train_cfg.validate()
    if dataset.seq_len % model_cfg.total_pooling != 0:
        raise ConfigError(f"dataset seq_len {dataset.seq_len} not divisible by "
                          f"total pooling {model_cfg.total_pooling}")
    if dataset.count < train_cfg.batch_size:
        raise ConfigError(f"dataset has {dataset.count} sequences, "
                          f"batch_size {train_cfg.batch_size} needs at least that many")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.log"

    model = build(model_cfg, seed=train_cfg.seed)
    if resume is not None:
        if resume.config != model_cfg:
            raise ConfigError("resume checkpoint config does not match the requested model config")
        model.load_state(resume.params)
        ema = {k: a.copy() for k, a in resume.ema.items()}
        m = {k: a.copy() for k, a in resume.m.items()}
        v = {k: a.copy() for k, a in resume.v.items()}
        start_step = resume.step
    else:
        ema = {k: t.data.copy() for k, t in model.params.items()}
        m = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        v = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        start_step = 0

    steps_per_epoch = dataset.count // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    mask = decay_mask(model.params)
    dropped = 0
    perm = None
    perm_epoch = -1

    def bundle_now(step: int) -> CheckpointBundle:
        return CheckpointBundle(model_cfg, step, train_cfg.seed,
                                model.state_arrays(),
                                {k: a.copy() for k, a in ema.items()},
                                {k: a.copy() for k, a in m.items()},
                                {k: a.copy() for k, a in v.items()})

    def emit(line: str) -> None:
        with metrics_path.open("a") as fh:
            fh.write(line + "\n")
        if log_fn is not None:
            log_fn(line)

    step = start_step
    for step in range(start_step + 1, total_steps + 1):
        epoch = (step - 1) // steps_per_epoch
        slot = (step - 1) % steps_per_epoch
        if epoch != perm_epoch:
            perm = epoch_permutation(train_cfg.seed, epoch, dataset.count)
            perm_epoch = epoch
        batch = dataset.sequences[perm[slot * train_cfg.batch_size:(slot + 1) * train_cfg.batch_size]]

        t0 = time.perf_counter()
        dropout_rng = (np.random.default_rng([train_cfg.seed, step, 0xD0])
                       if model_cfg.embed_mode == "learned_dropout" else None)
        loss_bits, grads = compute_sharded_gradients(model, batch, train_cfg.grad_shards,
                                                     dropout_rng)
        norm = global_grad_norm(grads)
        lr = lr_schedule(step, train_cfg)
        if math.isfinite(loss_bits) and math.isfinite(norm):
            clip_gradients(grads, train_cfg.grad_clip, norm)
            adamw_step(model.params, grads, m, v, step, lr, train_cfg, mask)
            ema_update(ema, model.params, train_cfg.ema_rate)
        else:
            dropped += 1
        elapsed = max(time.perf_counter() - t0, 1e-9)
        tokens_per_s = train_cfg.batch_size * dataset.seq_len / elapsed
        emit(f"step={step} epoch={epoch} lr={lr:.8g} loss_bits={loss_bits:.6f} "
             f"tokens_per_s={tokens_per_s:.1f} grad_norm={norm:.6g} dropped_steps={dropped}")

        if checkpoint_every and step % checkpoint_every == 0:
            b = bundle_now(step)
            save_checkpoint_file(out_dir / f"ckpt_{step:08d}.hrck", b)
            save_checkpoint_file(out_dir / "ckpt_latest.hrck", b)
        elif slot == steps_per_epoch - 1:
            save_checkpoint_file(out_dir / "ckpt_latest.hrck", bundle_now(step))
        if stop_below_bits is not None and math.isfinite(loss_bits) and loss_bits < stop_below_bits:
            break

    final = bundle_now(step)
    save_checkpoint_file(out_dir / "ckpt_latest.hrck", final)
    return final


# ---------------------------------------------------------------------------
# evaluation

def evaluate_nll(bundle: CheckpointBundle, dataset: QuantizedDataset,
                 use_ema: bool = True, batch_size: int = 16,
                 max_sequences: int | None = None) -> float:
    """Mean NLL in bits per code over the dataset, sequence-weighted,
    deterministic (no shuffling)."""
    if dataset.seq_len % bundle.config.total_pooling != 0:
        raise ConfigError(f"dataset seq_len {dataset.seq_len} not divisible by "
                          f"total pooling {bundle.config.total_pooling}")
    model = build(bundle.config, seed=bundle.seed)
    model.load_state(bundle.ema if use_ema else bundle.params)
    count = dataset.count if max_sequences is None else min(dataset.count, max_sequences)
    total = 0.0
    for at in range(0, count, batch_size):
        codes = dataset.sequences[at:min(at + batch_size, count)]
        logits = forward_logits(model, codes)
        total += float(nll_loss(logits, codes).data) * codes.shape[0]
    return total / count
