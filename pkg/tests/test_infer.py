"""Step-mode execution: equivalence with the parallel forward pass, state
bookkeeping, sampling determinism, and the throughput benchmark."""

import numpy as np
import pytest

from hrnn import infer as I
from hrnn import model as M
from hrnn.audio import encode

TOY = M.ModelConfig(pooling_factors=(2, 4), blocks_per_stage=1, width=8,
                    rnn_dim=12, conv_groups=4, mlp_expansion=2)


def noised_model(cfg, seed=0, scale=0.05):
    # zero-initialized residual projections make a fresh model the identity;
    # perturb every parameter so equivalence tests see real signal flow
    model = M.build(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for t in model.params.values():
        t.data = t.data + scale * rng.standard_normal(t.data.shape).astype(np.float32)
    return model


def noised_bundle(cfg, seed=0, scale=0.05):
    bundle = M.new_bundle(cfg, seed=seed)
    model = noised_model(cfg, seed=seed, scale=scale)
    bundle.params = model.state_arrays()
    bundle.ema = model.state_arrays()
    return bundle


def run_steps(model, codes):
    batch, steps = codes.shape
    state = I.init_state(model, batch)
    rows = []
    for t in range(steps):
        logits, state = I.step(model, state, codes[:, t - 1] if t else None)
        rows.append(logits)
    return np.stack(rows, axis=1), state


# --- equivalence with the parallel forward ------------------------------------


def test_step_matches_parallel_forward_toy():
    model = noised_model(TOY, seed=1)
    codes = np.random.default_rng(2).integers(0, 256, size=(2, 160), dtype=np.uint8)
    want = M.forward_logits(model, codes).data
    got, state = run_steps(model, codes)
    assert state.position == 160
    assert np.abs(got - want).max() < 1e-4


@pytest.mark.slow
def test_step_matches_parallel_forward_default_config():
    cfg = M.ModelConfig()
    model = noised_model(cfg, seed=3, scale=0.02)
    codes = np.random.default_rng(4).integers(0, 256, size=(1, 160), dtype=np.uint8)
    want = M.forward_logits(model, codes).data
    got, _ = run_steps(model, codes)
    assert np.abs(got - want).max() < 1e-4


def test_step_count_equals_logit_rows():
    model = noised_model(TOY, seed=5)
    codes = np.random.default_rng(6).integers(0, 256, size=(3, 24), dtype=np.uint8)
    rows, state = run_steps(model, codes)
    assert rows.shape == (3, 24, 256)
    assert state.position == 24


def test_step_argument_validation():
    model = noised_model(TOY, seed=7)
    state = I.init_state(model, 2)
    with pytest.raises(ValueError, match="first step"):
        I.step(model, state, np.zeros(2, dtype=np.uint8))
    logits, state = I.step(model, state, None)
    assert logits.shape == (2, 256)
    with pytest.raises(ValueError, match="requires previous codes"):
        I.step(model, state, None)
    with pytest.raises(ValueError, match="shape"):
        I.step(model, state, np.zeros(3, dtype=np.uint8))
    with pytest.raises(ValueError, match="range"):
        I.step(model, state, np.array([0, 300]))


# --- state bookkeeping ----------------------------------------------------------


def test_state_size_formula_and_allocation():
    # toy: 5 stages * 1 block * 2*12 + (1+3)*8 down + (3+5)*8 up
    assert I.state_size(TOY) == 120 + 32 + 64
    state = I.init_state(noised_model(TOY, seed=8), batch=3)
    assert I.allocated_state_scalars(state) == I.state_size(TOY)

    default = M.ModelConfig()
    assert I.state_size(default) == 36 * 512 + 11 * 128 + 19 * 128
    state = I.init_state(M.build(default, seed=0), batch=1)
    assert I.allocated_state_scalars(state) == I.state_size(default)


def test_two_inits_identical():
    model = noised_model(TOY, seed=9)
    s1, s2 = I.init_state(model, 2), I.init_state(model, 2)
    assert s1.position == s2.position == 0
    assert s1.emb_table.tobytes() == s2.emb_table.tobytes()
    for a, b in zip(s1.downs, s2.downs):
        assert a.count == b.count == 0
        assert a.buffer.tobytes() == b.buffer.tobytes()


def test_inner_carries_advance_once_per_pooling_period():
    model = noised_model(TOY, seed=10)
    state = I.init_state(model, 1)
    period = TOY.total_pooling  # 8
    codes = np.random.default_rng(11).integers(0, 256, size=(1, 3 * period), dtype=np.uint8)
    snapshots = []
    for t in range(2 * period):
        I.step(model, state, codes[:, t - 1] if t else None)
        snapshots.append(state.inner_blocks[0].h_re.copy())
    for t in range(period - 1):  # frame incomplete: carry untouched
        assert (snapshots[t] == 0).all()
    assert (snapshots[period - 1] != 0).any()  # frame completed on step `period`
    for t in range(period, 2 * period - 1):  # exactly one inner update so far
        assert snapshots[t].tobytes() == snapshots[period - 1].tobytes()
    assert snapshots[2 * period - 1].tobytes() != snapshots[period - 1].tobytes()


def test_downpool_buffer_occupancy_stays_below_factor():
    model = noised_model(TOY, seed=12)
    state = I.init_state(model, 1)
    codes = np.random.default_rng(13).integers(0, 256, size=(1, 16), dtype=np.uint8)
    for t in range(16):
        I.step(model, state, codes[:, t - 1] if t else None)
        for ds, p in zip(state.downs, TOY.pooling_factors):
            assert 0 <= ds.count < p


# --- sampling --------------------------------------------------------------------


def test_sample_codes_temperature_zero_is_argmax():
    rng = np.random.default_rng(14)
    logits = rng.standard_normal((5, 256)).astype(np.float32)
    got = I.sample_codes(logits, 0.0, rng)
    np.testing.assert_array_equal(got, logits.argmax(axis=-1))


def test_sample_codes_follows_peaked_distribution():
    rng = np.random.default_rng(15)
    logits = np.zeros((4, 256), dtype=np.float32)
    logits[:, 17] = 50.0  # overwhelming mass on one code
    for _ in range(10):
        np.testing.assert_array_equal(I.sample_codes(logits, 1.0, rng), 17)


def test_sample_codes_matches_inverse_cdf_oracle():
    logits = np.log(np.array([[0.2, 0.5, 0.3]], dtype=np.float32))
    draws = {I.sample_codes(logits, 1.0, np.random.Generator(np.random.PCG64(s)))[0]
             for s in range(64)}
    assert draws == {0, 1, 2}  # all categories reachable
    counts = np.bincount(
        [I.sample_codes(logits, 1.0, np.random.Generator(np.random.PCG64(s)))[0]
         for s in range(3000)], minlength=3)
    assert abs(counts[1] / 3000 - 0.5) < 0.05


def test_sample_codes_rejects_negative_temperature():
    with pytest.raises(ValueError, match="temperature"):
        I.sample_codes(np.zeros((1, 4), dtype=np.float32), -1.0, np.random.default_rng(0))


def test_temperature_sharpens_distribution():
    logits = np.log(np.array([[0.4, 0.6]], dtype=np.float32))
    picks = [I.sample_codes(logits, 0.05, np.random.Generator(np.random.PCG64(s)))[0]
             for s in range(200)]
    assert np.mean(np.array(picks) == 1) > 0.95  # low temperature ~= argmax


# --- generation --------------------------------------------------------------------


def test_generate_shapes_range_and_determinism():
    bundle = noised_bundle(TOY, seed=16)
    first = I.generate(bundle, num_samples=2, length=16, temperature=1.0, seed=7)
    again = I.generate(bundle, num_samples=2, length=16, temperature=1.0, seed=7)
    other = I.generate(bundle, num_samples=2, length=16, temperature=1.0, seed=8)
    assert len(first) == 2
    for a, b in zip(first, again):
        assert a.sample_rate == 16000
        assert a.samples.shape == (16,)
        assert np.abs(a.samples).max() <= 1.0
        np.testing.assert_array_equal(a.samples, b.samples)
    assert any((a.samples != o.samples).any() for a, o in zip(first, other))


def test_generate_prefix_property():
    # same seed, longer run: the first steps draw the same uniforms, so the
    # shorter generation is a prefix of the longer one
    bundle = noised_bundle(TOY, seed=17)
    short = I.generate(bundle, num_samples=2, length=8, temperature=1.0, seed=3)
    long = I.generate(bundle, num_samples=2, length=24, temperature=1.0, seed=3)
    for s, l in zip(short, long):
        np.testing.assert_array_equal(s.samples, l.samples[:8])


def test_generate_temperature_zero_tracks_argmax():
    bundle = noised_bundle(TOY, seed=18)
    out = I.generate(bundle, num_samples=1, length=16, temperature=0.0, seed=0)[0]
    codes = encode(out.samples, "mulaw")  # decode grid points re-encode exactly

    model = M.build(bundle.config, seed=bundle.seed)
    model.load_state(bundle.ema)
    state = I.init_state(model, 1)
    prev = None
    for t in range(16):
        logits, state = I.step(model, state, prev)
        prev = logits.argmax(axis=-1)
        assert prev[0] == codes[t]


def test_generate_respects_encoding_and_rate():
    bundle = noised_bundle(TOY, seed=19)
    lin = I.generate(bundle, 1, 8, temperature=0.0, seed=0,
                     encoding="linear", sample_rate=8000)[0]
    assert lin.sample_rate == 8000
    grid = np.round((lin.samples + 1.0) * 127.5)
    np.testing.assert_allclose((grid / 127.5) - 1.0, lin.samples, atol=1e-6)
    with pytest.raises(ValueError, match="encoding"):
        I.generate(bundle, 1, 8, encoding="opus")
    with pytest.raises(ValueError, match="length"):
        I.generate(bundle, 1, 0)


def test_generate_uses_requested_weight_set():
    bundle = noised_bundle(TOY, seed=20)
    rng = np.random.default_rng(21)
    bundle.ema = {k: v + 0.1 * rng.standard_normal(v.shape).astype(np.float32)
                  for k, v in bundle.ema.items()}
    raw = I.generate(bundle, 1, 16, temperature=0.0, seed=0, use_ema=False)[0]
    ema = I.generate(bundle, 1, 16, temperature=0.0, seed=0, use_ema=True)[0]
    assert (raw.samples != ema.samples).any()


# --- benchmark ---------------------------------------------------------------------


def test_bench_reports_exact_token_count():
    bundle = noised_bundle(TOY, seed=22)
    out = I.bench_throughput(bundle, batch=2, length=8)
    assert out["tokens"] == 16
    assert out["seconds"] > 0
    assert out["tokens_per_s"] == pytest.approx(16 / out["seconds"])
    assert out["ktok_per_s"] == pytest.approx(out["tokens_per_s"] / 1000)
