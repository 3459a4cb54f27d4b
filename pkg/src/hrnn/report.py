"""Run reports: turn a training run directory (metric log plus latest
checkpoint) into figures and machine-readable key=value results.

Figures are rendered headless to PNG files; the returned mapping carries the
numbers and artifact paths so the CLI can print one key=value line each.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import audio as A
from . import infer as I
from . import model as M


def parse_metrics(text: str) -> dict[str, np.ndarray]:
    """Metric log lines ('step=1 epoch=0 lr=... loss_bits=...') to arrays."""
    columns: dict[str, list[float]] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ValueError(f"malformed metric token {token!r}")
            columns.setdefault(key, []).append(float(value))
    return {key: np.asarray(vals) for key, vals in columns.items()}


def loss_curve_figure(metrics: dict[str, np.ndarray], path: Path) -> None:
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    top.plot(metrics["step"], metrics["loss_bits"], lw=0.9)
    top.axhline(8.0, color="gray", ls=":", lw=0.8, label="uniform (8 bits)")
    top.set_ylabel("train NLL (bits/code)")
    top.legend(loc="upper right", fontsize=8)
    bottom.plot(metrics["step"], metrics["grad_norm"], lw=0.9, color="tab:orange")
    bottom.set_yscale("log")
    bottom.set_ylabel("grad norm")
    bottom.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def sample_figure(sample: A.PcmAudio, path: Path) -> None:
    wave = np.asarray(sample.samples, dtype=np.float64)
    t = np.arange(wave.size) / sample.sample_rate
    spectrum = np.abs(np.fft.rfft(wave * np.hanning(wave.size)))
    freqs = np.fft.rfftfreq(wave.size, d=1.0 / sample.sample_rate)
    db = 20 * np.log10(np.maximum(spectrum, 1e-9))

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6))
    top.plot(t, wave, lw=0.7)
    top.set_xlabel("time (s)")
    top.set_ylabel("amplitude")
    top.set_ylim(-1.05, 1.05)
    bottom.plot(freqs, db, lw=0.8, color="tab:green")
    bottom.set_xlabel("frequency (Hz)")
    bottom.set_ylabel("magnitude (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(run_dir, out_dir=None, sample_len: int = 1600, seed: int = 0,
                 temperature: float = 1.0, encoding: str = "mulaw") -> dict[str, str]:
    """Render figures for one training run; returns printable key=value map.
    The sample figure needs ckpt_latest.hrck and is skipped without it."""
    run_dir = Path(run_dir)
    out_dir = run_dir / "report" if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, str] = {}

    metrics_path = run_dir / "metrics.log"
    if not metrics_path.exists():
        raise FileNotFoundError(f"no metrics.log in {run_dir}")
    metrics = parse_metrics(metrics_path.read_text())
    curve_path = out_dir / "loss_curve.png"
    loss_curve_figure(metrics, curve_path)
    results["steps"] = str(int(metrics["step"][-1]))
    results["final_loss_bits"] = f"{metrics['loss_bits'][-1]:.6f}"
    results["min_loss_bits"] = f"{metrics['loss_bits'].min():.6f}"
    results["dropped_steps"] = str(int(metrics["dropped_steps"][-1]))
    results["loss_curve"] = str(curve_path)

    ckpt_path = run_dir / "ckpt_latest.hrck"
    if ckpt_path.exists():
        bundle = M.load_checkpoint_file(ckpt_path)
        sample = I.generate(bundle, num_samples=1, length=sample_len,
                            temperature=temperature, seed=seed, encoding=encoding)[0]
        wav_path = out_dir / "sample.wav"
        A.save_wav(wav_path, sample)
        fig_path = out_dir / "sample.png"
        sample_figure(sample, fig_path)
        results["sample_wav"] = str(wav_path)
        results["sample_figure"] = str(fig_path)

    return results
