import numpy as np
import pytest

from shellflow.integrator import (
    BlowUpError,
    integrate_deterministic,
    integrate_ensemble,
    integrate_path,
    n_steps,
    pathwise_split_check,
    step_semi_implicit,
    weak_form_residual,
)
from shellflow.noise import NoiseConfig, ou_exact_step, standard_gaussians
from shellflow.shell import ModelConfig, h_norm, unit

DESK = ModelConfig()
DESK_NOISE = NoiseConfig.low_modes(0.3, 4, 16)


def test_step_pure_decay():
    cfg = ModelConfig(a=0.0, b=0.0, N=8)
    off = NoiseConfig((0.0,) * 8)
    out = step_semi_implicit(unit(1, 8), 1e-3, cfg, off)
    np.testing.assert_allclose(out, np.exp(-16e-3) * unit(1, 8), rtol=1e-15)


def test_step_linear_matches_ou_bitwise():
    cfg = ModelConfig(a=0.0, b=0.0, N=8)
    noise = NoiseConfig.low_modes(0.3, 4, 8)
    rng = np.random.default_rng(0)
    u = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    g = standard_gaussians(1, [0], 0, 1, 4)[0, 0]
    a = step_semi_implicit(u, 1e-3, cfg, noise, g)
    b = ou_exact_step(u, 1e-3, noise, cfg, g)
    np.testing.assert_array_equal(a, b)


def test_kernel_matches_numpy_step():
    x = 0.5 * unit(1, 16) + 0.2j * unit(3, 16)
    dt = 1e-3
    rec = integrate_path(x, 20 * dt, dt, DESK, DESK_NOISE, seed=4, stream=1)
    g = standard_gaussians(4, [1], 0, 20, 4)[0]
    u = x.copy()
    for s in range(20):
        u = step_semi_implicit(u, dt, DESK, DESK_NOISE, g[s])
    np.testing.assert_allclose(rec.states[-1], u, rtol=1e-12, atol=1e-14)


def test_exact_linear_path():
    cfg = ModelConfig(a=0.0, b=0.0, N=8)
    off = NoiseConfig((0.0,) * 8)
    rec = integrate_path(unit(1, 8), 1.0, 1e-3, cfg, off, seed=0, record_every=10).check()
    want = np.exp(-cfg.lam[0] * rec.times)
    assert np.max(np.abs(rec.h_norms - want)) < 1e-10
    assert np.max(np.abs(rec.states[:, 0] - want)) < 1e-10


def test_same_seed_same_record():
    a = integrate_path(unit(1, 16), 0.1, 1e-4, DESK, DESK_NOISE, seed=3, record_every=10)
    b = integrate_path(unit(1, 16), 0.1, 1e-4, DESK, DESK_NOISE, seed=3, record_every=10)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.dissipation_integral, b.dissipation_integral)
    c = integrate_path(unit(1, 16), 0.1, 1e-4, DESK, DESK_NOISE, seed=4, record_every=10)
    assert not np.array_equal(a.states, c.states)


def test_record_invariants_and_csv(tmp_path):
    rec = integrate_path(unit(1, 16), 0.01, 1e-4, DESK, DESK_NOISE, seed=1, record_every=10).check()
    assert rec.times[0] == 0 and rec.dissipation_integral[0] == 0
    path = tmp_path / "traj.csv"
    rec.to_csv(path)
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["t", "re_u1", "im_u1"]
    assert header[-3:] == ["h_norm", "v_norm", "dissipation_integral"]
    assert len(header) == 1 + 2 * 16 + 3
    assert len(lines) == rec.times.size + 1
    row = np.array(lines[-1].split(","), dtype=float)
    assert row[-3] == rec.h_norms[-1]


def test_ensemble_stream_independence():
    x = np.zeros(16)
    run = integrate_ensemble(x, 0.05, 1e-4, DESK, DESK_NOISE, seed=2, streams=[0, 1, 2])
    single = integrate_ensemble(x, 0.05, 1e-4, DESK, DESK_NOISE, seed=2, streams=[1])
    np.testing.assert_array_equal(run.final[1], single.final[0])
    assert not np.array_equal(run.final[0], run.final[1])


def test_blowup_detected():
    cfg = ModelConfig(nu=1e-3)
    x = 1e6 * (unit(1, 16) + unit(2, 16) + unit(3, 16))
    with pytest.raises(BlowUpError) as info:
        integrate_path(x, 1.0, 1e-2, cfg, DESK_NOISE, seed=0)
    assert info.value.time > 0


def test_step_count_checks():
    assert n_steps(1.0, 1e-4) == 10000
    with pytest.raises(ValueError):
        n_steps(1.0, 0.3)
    with pytest.raises(ValueError):
        n_steps(0.1, 0.2)


def test_deterministic_decay_bound():
    rng = np.random.default_rng(7)
    for _ in range(3):
        x = rng.standard_normal(16) + 1j * rng.standard_normal(16)
        x /= h_norm(x)
        for dt in (1e-4, 5e-5):
            rec = integrate_deterministic(x, 0.5, dt, DESK, record_every=10)
            bound = np.exp(-2 * DESK.lam[0] * rec.times)
            assert np.all(rec.h_norms**2 <= bound * (1 + 1e-12))


def test_deterministic_zero():
    rec = integrate_deterministic(np.zeros(16), 0.1, 1e-3, DESK)
    assert np.all(rec.states == 0)


def test_pathwise_split_noiseless_and_zero():
    cfg = ModelConfig(N=8)
    off = NoiseConfig((0.0,) * 8)
    x = 0.5 * unit(1, 8) + 0.3j * unit(2, 8)
    assert pathwise_split_check(x, 1.0, 1e-4, cfg, off, seed=0) < 1e-8
    assert pathwise_split_check(np.zeros(8), 0.5, 1e-3, cfg, off, seed=0) == 0.0


def test_pathwise_split_with_noise():
    # the scheme's split is exact in exact arithmetic, so only round-off remains
    cfg = ModelConfig(N=8)
    noise = NoiseConfig.low_modes(0.3, 4, 8)
    x = 0.5 * unit(1, 8)
    for dt in (2e-3, 1e-3):
        assert pathwise_split_check(x, 1.0, dt, cfg, noise, seed=3) < 1e-12


def test_weak_residual_linear_small():
    cfg = ModelConfig(a=0.0, b=0.0, N=8)
    noise = NoiseConfig.low_modes(0.3, 4, 8)
    dt = 1e-3
    rec = integrate_path(unit(1, 8), 1.0, dt, cfg, noise, seed=5, refine=4)
    assert weak_form_residual(rec, 1, cfg, noise) < 10 * dt


def test_weak_residual_t0():
    cfg = ModelConfig(N=8)
    noise = NoiseConfig.low_modes(0.3, 4, 8)
    rec = integrate_path(unit(1, 8), 1e-3, 1e-3, cfg, noise, seed=5)
    rec.states = rec.states[:1]
    rec.times = rec.times[:1]
    assert weak_form_residual(rec, 1, cfg, noise) == 0.0


def test_weak_residual_halves():
    cfg = ModelConfig(a=0.0, b=0.0, N=8)
    noise = NoiseConfig.low_modes(0.3, 4, 8)
    fine = 2.5e-4
    res = {}
    for dt in (1e-3, 5e-4):
        vals = []
        for seed in range(8):
            rec = integrate_path(unit(1, 8), 1.0, dt, cfg, noise, seed=seed, refine=int(round(dt / fine)))
            vals.append(weak_form_residual(rec, 1, cfg, noise))
        res[dt] = np.mean(vals)
    ratio = res[1e-3] / res[5e-4]
    assert 1.6 <= ratio <= 2.5


def test_strong_order_one():
    x = 0.5 * unit(1, 16) + 0.3j * unit(2, 16)
    T, dt0 = 1.0, 2e-3
    streams = np.arange(16)
    fine = dt0 / 256
    ref = integrate_ensemble(x, T, fine, DESK, DESK_NOISE, 9, streams, record_every=n_steps(T, fine)).final
    errs = []
    for dt in (dt0, dt0 / 2):
        run = integrate_ensemble(x, T, dt, DESK, DESK_NOISE, 9, streams,
                                 record_every=n_steps(T, dt), refine=int(round(dt / fine)))
        errs.append(np.sqrt(np.mean(h_norm(run.final - ref) ** 2)))
    assert 1.6 <= errs[0] / errs[1] <= 2.5
