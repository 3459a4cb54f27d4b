"""Command-line entry point: dataset building, training, evaluation,
sampling, throughput benchmarks, run reports, and a fast self-check suite.

Conventions: all machine-readable output is one key=value pair per line;
exit code 0 on success, 1 on runtime failures, 2 on usage or config errors.
Worker counts default to 1 so every run is reproducible by default.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import audio as A
from . import infer as I
from . import model as M
from . import report as R
from . import train as TR


class UsageError(Exception):
    """Bad flags or flag combinations; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep it catchable
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers

def _print_kv(results: dict) -> None:
    for key, value in results.items():
        print(f"{key}={value}")


def _load_model_config(path: str | None) -> tuple[M.ModelConfig, TR.TrainConfig]:
    if path is None:
        return M.ModelConfig(), TR.TrainConfig()
    return TR.parse_config_file(Path(path).read_text())


def _write_manifest(out_dir: Path, model_cfg: M.ModelConfig,
                    train_cfg: TR.TrainConfig | None, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"version={__version__}"]
    lines += M.config_to_text(model_cfg).splitlines()
    if train_cfg is not None:
        lines += TR.train_config_to_text(train_cfg).splitlines()
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_dataset(args) -> int:
    if (args.in_dir is None) == (args.synth is None):
        raise UsageError("exactly one of --in or --synth is required")
    if args.synth is not None:
        ds = A.synth_generate(args.synth.replace("-", "_"), count=args.count,
                              seq_len=args.seq_len, seed=args.seed,
                              sample_rate=args.sample_rate, encoding=args.encoding)
    else:
        paths = sorted(Path(args.in_dir).rglob("*.wav"))
        if not paths:
            raise FileNotFoundError(f"no .wav files under {args.in_dir}")
        ds = A.build_dataset(paths, encoding=args.encoding, seq_len=args.seq_len,
                             hop=args.hop, seed=args.seed)
    ds.save(args.out)
    _print_kv({"sequences": ds.count, "total_tokens": ds.count * ds.seq_len,
               "encoding": ds.encoding, "out": args.out})
    return 0


def _cmd_train(args) -> int:
    model_cfg, train_cfg = _load_model_config(args.config)
    if args.scan_workers is not None:
        model_cfg = dataclasses.replace(model_cfg, scan_workers=args.scan_workers)
    if args.grad_shards is not None:
        train_cfg = dataclasses.replace(train_cfg, grad_shards=args.grad_shards)
    dataset = A.QuantizedDataset.load(args.data)
    resume = M.load_checkpoint_file(args.resume) if args.resume else None

    out_dir = Path(args.out)
    _write_manifest(out_dir, model_cfg, train_cfg, {"data": args.data})
    final = TR.train(model_cfg, train_cfg, dataset, out_dir, resume=resume,
                     max_steps=args.max_steps, stop_below_bits=args.stop_below_bits,
                     checkpoint_every=args.checkpoint_every, log_fn=print)
    _print_kv({"final_step": final.step,
               "checkpoint": out_dir / "ckpt_latest.hrck"})
    return 0


def _cmd_eval(args) -> int:
    bundle = M.load_checkpoint_file(args.ckpt)
    dataset = A.QuantizedDataset.load(args.data)
    raw = TR.evaluate_nll(bundle, dataset, use_ema=False, batch_size=args.batch_size,
                          max_sequences=args.max_sequences)
    ema = TR.evaluate_nll(bundle, dataset, use_ema=True, batch_size=args.batch_size,
                          max_sequences=args.max_sequences)
    _print_kv({"nll_bits_raw": f"{raw:.6f}", "nll_bits_ema": f"{ema:.6f}",
               "nll_bits": f"{ema:.6f}"})
    return 0


def _cmd_sample(args) -> int:
    bundle = M.load_checkpoint_file(args.ckpt)
    samples = I.generate(bundle, num_samples=args.num, length=args.len,
                         temperature=args.temperature, seed=args.seed,
                         encoding=args.encoding, sample_rate=args.sample_rate,
                         use_ema=not args.raw_weights)
    out_dir = Path(args.out)
    _write_manifest(out_dir, bundle.config, None,
                    {"num": args.num, "len": args.len, "temperature": args.temperature,
                     "seed": args.seed, "encoding": args.encoding})
    for i, sample in enumerate(samples):
        A.save_wav(out_dir / f"sample_{i:03d}.wav", sample)
    _print_kv({"samples": len(samples), "out": out_dir})
    return 0


def _cmd_bench(args) -> int:
    if args.ckpt is not None:
        bundle = M.load_checkpoint_file(args.ckpt)
    else:
        model_cfg, _ = _load_model_config(args.config)
        bundle = M.new_bundle(model_cfg, seed=args.seed)

    pooled = I.bench_throughput(bundle, batch=args.batch, length=args.len,
                                temperature=args.temperature, seed=args.seed)
    results = {"tokens": pooled["tokens"], "seconds": f"{pooled['seconds']:.3f}",
               "ktok_per_s": f"{pooled['ktok_per_s']:.3f}"}
    if args.compare_pooling:
        cfg = bundle.config
        flat_cfg = dataclasses.replace(cfg, pooling_factors=(),
                                       blocks_per_stage=cfg.num_blocks)
        flat = I.bench_throughput(M.new_bundle(flat_cfg, seed=args.seed),
                                  batch=args.batch, length=args.len,
                                  temperature=args.temperature, seed=args.seed)
        results["ktok_per_s_pooled"] = f"{pooled['ktok_per_s']:.3f}"
        results["ktok_per_s_nopool"] = f"{flat['ktok_per_s']:.3f}"
        results["throughput_ratio"] = f"{pooled['tokens_per_s'] / flat['tokens_per_s']:.3f}"
    _print_kv(results)
    return 0


def _cmd_report(args) -> int:
    results = R.write_report(args.run, out_dir=args.out, sample_len=args.sample_len,
                             seed=args.seed, temperature=args.temperature,
                             encoding=args.encoding)
    _print_kv(results)
    return 0


# ---------------------------------------------------------------------------
# selftest

_TOY = M.ModelConfig(pooling_factors=(2, 4), blocks_per_stage=1, width=8,
                     rnn_dim=12, conv_groups=4, mlp_expansion=2)


def _noised_toy(seed: int) -> M.Model:
    model = M.build(_TOY, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for t in model.params.values():
        t.data = t.data + 0.05 * rng.standard_normal(t.data.shape).astype(np.float32)
    return model


def _check_scan_variants_agree():
    from . import scan as S
    rng = np.random.default_rng(0)
    steps, chans = 512, 8
    mag = rng.uniform(0.5, 0.999, (steps, chans)).astype(np.float32)
    ang = rng.uniform(0, np.pi, (steps, chans)).astype(np.float32)
    elems = S.ScanElement(*(v.astype(np.float32) for v in
                            (mag * np.cos(ang), mag * np.sin(ang),
                             rng.standard_normal((steps, chans)),
                             rng.standard_normal((steps, chans)))))
    h0 = S.ScanCarry.zeros(chans)
    seq, _ = S.run_scan(elems, h0, variant="sequential")
    for variant, workers in (("tree", 1), ("chunked", 2), ("chunked", 4)):
        got, _ = S.run_scan(elems, h0, variant=variant, workers=workers)
        for a, b in ((got.re, seq.re), (got.im, seq.im)):
            scale = max(np.abs(b).max(), 1e-3)
            assert np.abs(a - b).max() / scale < 1e-4, f"{variant} deviates"


def _check_codec_roundtrips():
    codes = np.arange(256, dtype=np.uint8)
    for encoding in ("mulaw", "linear"):
        assert (A.encode(A.decode(codes, encoding), encoding) == codes).all(), encoding
    assert A.mulaw_encode(np.array([0.5]))[0] == 239


def _check_wav_roundtrip():
    rng = np.random.default_rng(1)
    pcm = A.PcmAudio((rng.integers(-32768, 32768, 400) / 32768.0).astype(np.float32), 16000)
    back = A.read_wav(A.write_wav(pcm))
    assert back.sample_rate == 16000
    assert np.array_equal(back.samples, pcm.samples)


def _check_toy_causality():
    model = _noised_toy(seed=2)
    codes = np.random.default_rng(3).integers(0, 256, (1, 16), dtype=np.uint8)
    base = M.forward_logits(model, codes).data
    bumped = codes.copy()
    bumped[0, 9] = (int(bumped[0, 9]) + 101) % 256
    after = M.forward_logits(model, bumped).data
    assert np.array_equal(base[:, :10], after[:, :10]), "future leaked into the past"
    assert not np.array_equal(base[:, 10:], after[:, 10:])


def _check_gradient_spot():
    from . import tensor as tz
    rng = np.random.default_rng(4)
    with tz.precision("float64"):
        x = tz.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = tz.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        with tz.recording():
            loss = tz.reduce_sum(tz.gelu(tz.matmul(x, w)))
            grads = tz.backward(loss)
        eps = 1e-6
        flat = x.data.reshape(-1)
        for idx in (0, 5, 11):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = float(tz.reduce_sum(tz.gelu(tz.matmul(x, w))).data)
            flat[idx] = orig - eps
            down = float(tz.reduce_sum(tz.gelu(tz.matmul(x, w))).data)
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            got = grads[x].data.reshape(-1)[idx]
            assert abs(got - fd) / max(abs(fd), 1e-8) < 1e-4, "gradient mismatch"


def _check_step_matches_parallel():
    model = _noised_toy(seed=5)
    codes = np.random.default_rng(6).integers(0, 256, (2, 16), dtype=np.uint8)
    want = M.forward_logits(model, codes).data
    state = I.init_state(model, 2)
    for t in range(16):
        logits, state = I.step(model, state, codes[:, t - 1] if t else None)
        assert np.abs(logits - want[:, t]).max() < 1e-4, f"step {t} deviates"


def _check_checkpoint_roundtrip():
    bundle = M.new_bundle(_TOY, seed=7)
    blob = M.save_checkpoint(bundle)
    back = M.load_checkpoint(blob)
    assert back.config == bundle.config
    assert M.save_checkpoint(back) == blob


_SELFTEST_CHECKS = [
    ("scan_variants_agree", _check_scan_variants_agree),
    ("codec_roundtrips", _check_codec_roundtrips),
    ("wav_roundtrip", _check_wav_roundtrip),
    ("toy_causality", _check_toy_causality),
    ("gradient_spot", _check_gradient_spot),
    ("step_matches_parallel", _check_step_matches_parallel),
    ("checkpoint_roundtrip", _check_checkpoint_roundtrip),
]


def _cmd_selftest(args) -> int:
    for name, check in _SELFTEST_CHECKS:
        try:
            check()
        except Exception as exc:  # noqa: BLE001 - report which property failed
            print(f"selftest_{name}=FAIL")
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"selftest_{name}=pass")
    print("selftest=pass")
    return 0


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> _Parser:
    parser = _Parser(prog="hrnn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"hrnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="build a quantized dataset from WAVs or a synthesizer")
    d.add_argument("--in", dest="in_dir", help="directory of .wav files (recursive)")
    d.add_argument("--synth",
                   help="synthetic corpus kind: sine-mix, random-walk, or digit-like-chirps")
    d.add_argument("--encoding", choices=("mulaw", "linear"), default="mulaw")
    d.add_argument("--seq-len", type=int, required=True)
    d.add_argument("--hop", type=int, default=None)
    d.add_argument("--count", type=int, default=32, help="sequences to synthesize")
    d.add_argument("--sample-rate", type=int, default=16000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_dataset)

    t = sub.add_parser("train", help="train a model on a dataset file")
    t.add_argument("--config", help="key=value file for model and trainer settings")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--stop-below-bits", type=float, default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--scan-workers", type=int, default=None)
    t.add_argument("--grad-shards", type=int, default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="report dataset NLL for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--max-sequences", type=int, default=None)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sample", help="generate audio samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--num", type=int, default=1)
    s.add_argument("--len", type=int, default=16000)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--encoding", choices=("mulaw", "linear"), default="mulaw")
    s.add_argument("--sample-rate", type=int, default=16000)
    s.add_argument("--raw-weights", action="store_true",
                   help="sample with raw weights instead of the EMA shadow")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_sample)

    b = sub.add_parser("bench", help="measure generation throughput")
    b.add_argument("--ckpt", help="checkpoint to run; a fresh model is built without one")
    b.add_argument("--config", help="config file for the fresh-model case")
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--len", type=int, default=1600)
    b.add_argument("--temperature", type=float, default=1.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--compare-pooling", action="store_true",
                   help="also run a pooling-free twin with the same block count")
    b.set_defaults(func=_cmd_bench)

    r = sub.add_parser("report", help="render figures and stats for a training run")
    r.add_argument("--run", required=True, help="training output directory")
    r.add_argument("--out", default=None, help="defaults to RUN/report")
    r.add_argument("--sample-len", type=int, default=1600)
    r.add_argument("--temperature", type=float, default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--encoding", choices=("mulaw", "linear"), default="mulaw")
    r.set_defaults(func=_cmd_report)

    st = sub.add_parser("selftest", help="run the fast invariant suite")
    st.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except M.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help / --version
        code = exc.code
        return 0 if code is None else int(code)
    except (M.CheckpointError, A.AudioFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
