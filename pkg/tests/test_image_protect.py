import numpy as np
import pytest

from mmprotect.image_protect import init_perturbation, is_feasible, load_delta, pgd_step, project, save_delta

EPS = 8 / 255


def _img(rng):
    return np.round(rng.random((32, 32, 3)) * 255) / 255


def test_zero_init_is_feasible(rng):
    x = _img(rng)
    d = init_perturbation(x, "zero", EPS)
    assert not d.any() and is_feasible(d, x, EPS)


def test_uniform_init_deterministic_and_feasible(rng):
    x = _img(rng)
    a = init_perturbation(x, "uniform", EPS, 7)
    b = init_perturbation(x, "uniform", EPS, 7)
    assert np.array_equal(a, b) and is_feasible(a, x, EPS) and np.abs(a).max() > 0


def test_uniform_init_respects_saturated_pixel():
    x = np.full((32, 32, 3), 0.5)
    x[0, 0, 0] = 1.0
    for seed in range(20):
        assert init_perturbation(x, "uniform", EPS, seed)[0, 0, 0] <= 0


def test_init_rejects_bad_budget():
    with pytest.raises(ValueError):
        init_perturbation(np.zeros((32, 32, 3)), "zero", 0.0)
    with pytest.raises(ValueError):
        init_perturbation(np.zeros((32, 32, 3)), "zero", 17 / 255)


def test_project_hand_cases():
    assert project(np.array([0.0]), np.array([0.5]), EPS)[0] == 0.0
    assert project(np.array([-0.95]), np.array([0.5]), EPS)[0] == pytest.approx(-EPS)
    assert project(np.array([EPS]), np.array([0.99]), EPS)[0] == pytest.approx(0.01)


def test_project_matches_coordinatewise_oracle_and_is_idempotent(rng):
    x = rng.random(500)
    d = rng.normal(scale=0.1, size=500)
    p = project(d, x, EPS)
    lo, hi = np.maximum(-EPS, -x), np.minimum(EPS, 1 - x)
    oracle = np.array([min(max(di, l), h) for di, l, h in zip(d, lo, hi)])
    assert np.array_equal(p, oracle)
    assert np.array_equal(project(p, x, EPS), p)


def test_pgd_zero_grad_leaves_delta(rng):
    x = _img(rng)
    d = init_perturbation(x, "uniform", EPS, 1)
    assert np.array_equal(pgd_step(d, np.zeros_like(d), 1 / 255, x, EPS), d)


def test_pgd_positive_grad_steps_down():
    x = np.full((32, 32, 3), 0.5)
    d = pgd_step(np.zeros_like(x), np.ones_like(x), 1 / 255, x, EPS)
    assert np.allclose(d, -1 / 255)


def test_pgd_saturates_at_budget():
    x = np.full((4,), 0.5)
    d = np.zeros(4)
    for _ in range(20):
        d = pgd_step(d, np.array([1.0, -1.0, 1.0, -1.0]), 1 / 255, x, EPS)
    assert np.allclose(d, [-EPS, EPS, -EPS, EPS])


def test_pgd_descends_a_convex_quadratic():
    x = np.full(16, 0.5)
    target = np.linspace(-0.05, 0.05, 16)
    loss = lambda d: float(((d - target) ** 2).sum())
    d, prev = np.zeros(16), None
    for _ in range(12):
        cur = loss(d)
        if prev is not None:
            assert cur <= prev + 1e-15
        prev = cur
        d = pgd_step(d, 2 * (d - target), 0.5 / 255, x, EPS)
    assert is_feasible(d, x, EPS)


def test_delta_sidecar_round_trip(tmp_path, rng):
    d = rng.uniform(-EPS, EPS, size=(32, 32, 3))
    save_delta(tmp_path / "d.f32", d)
    assert (tmp_path / "d.f32").stat().st_size == 32 * 32 * 3 * 4
    assert np.allclose(load_delta(tmp_path / "d.f32"), d, atol=1e-7)
