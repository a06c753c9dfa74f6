import csv
import io
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from kronadapt.adapter import InitStrategy
from kronadapt.alignlab import (TRACE_HEADER, GradientSubspaces, alignment_A, alignment_B,
                                alpha_bound, full_ft_gradient, h_operator, linear_dynamics,
                                linearization_error, make_task, regime_of, spread_ratio,
                                t_star_A, t_star_B, theorem_run, theory_bounds, train_and_trace)
from kronadapt.errors import ConfigError, DegenerateSpectrumError, ParameterError
from kronadapt.kron import KronConfig, kreshape
from kronadapt.numkernel import make_rng, numerical_rank, orthonormal_complement, svd

CFG = KronConfig(2, 2, 4, 32, 32)


# -- tasks and the first-step gradient ---------------------------------------

def test_planted_rank_whitened():
    task = make_task(0, CFG, 512, 4, whiten=True)
    Gt = kreshape(full_ft_gradient(task), CFG)
    _, s, _ = svd(Gt)
    assert numerical_rank(s, tol=1e-6 * s[0]) == 4
    assert np.allclose(task.X @ task.X.T / 512, np.eye(32), atol=1e-12)


def test_planted_rank_raw_inputs_has_clear_gap():
    # without whitening X X^T / N only approaches I, so the tail is small but not 1e-6 small
    task = make_task(0, CFG, 4096, 4)
    _, s, _ = svd(kreshape(full_ft_gradient(task), CFG))
    assert s[3] > 5 * s[4]


def test_signal_free_task():
    task = make_task(1, CFG, 256, 0)
    assert np.linalg.norm(full_ft_gradient(task)) <= 1e-12


def test_task_determinism():
    a, b = make_task(5, CFG, 64, 2), make_task(5, CFG, 64, 2)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y) and np.array_equal(a.W0, b.W0)


def test_task_rank_too_large():
    with pytest.raises(ConfigError):
        make_task(0, KronConfig(2, 2, 1, 4, 4), 16, 5)


def test_task_warns_when_underdetermined():
    with pytest.warns(UserWarning):
        make_task(0, CFG, 16, 2)


def test_full_ft_gradient_cases():
    rng = make_rng(2)
    X = rng.standard_normal((6, 10))
    W0 = rng.standard_normal((5, 6))
    assert np.array_equal(full_ft_gradient(X, W0 @ X, W0), np.zeros((5, 6)))
    x = np.zeros((6, 1))
    x[2] = 1.0
    y = rng.standard_normal((5, 1))
    G = full_ft_gradient(x, y, W0)
    assert np.allclose(G, (y - W0 @ x) @ x.T)
    assert np.linalg.matrix_rank(G) == 1


def test_full_ft_gradient_loop_oracle():
    rng = make_rng(3)
    X, Y, W0 = rng.standard_normal((4, 7)), rng.standard_normal((3, 7)), rng.standard_normal((3, 4))
    oracle = np.zeros((3, 4))
    for n in range(7):
        res = Y[:, n] - W0 @ X[:, n]
        for i in range(3):
            for j in range(4):
                oracle[i, j] += res[i] * X[j, n] / 7
    assert np.max(np.abs(full_ft_gradient(X, Y, W0) - oracle)) <= 1e-12


# -- alignment metrics ---------------------------------------------------------

def test_alignment_extremes():
    rng = make_rng(4)
    Gt = rng.standard_normal((12, 9))
    sub = GradientSubspaces(Gt, 3)
    At = sub.U_r @ rng.standard_normal((3, 3))
    assert alignment_A(Gt, At, 3) <= 1e-12
    worst = orthonormal_complement(sub.U_r)[:, :3]
    assert alignment_A(Gt, worst, 3) == pytest.approx(1.0)
    Bt = sub.V_r @ rng.standard_normal((3, 3))
    assert alignment_B(Gt, Bt, 3) <= 1e-12


def test_alignment_empty_complement():
    rng = make_rng(5)
    Gt = rng.standard_normal((4, 10))
    assert alignment_A(Gt, rng.standard_normal((4, 4)), 4) == 0.0


def test_alignment_degenerate_flag():
    rng = make_rng(6)
    Gt = rng.standard_normal((10, 10))
    At = np.zeros((10, 4))
    At[:, 0] = rng.standard_normal(10)
    value, flag = alignment_A(Gt, At, 3, with_flag=True)
    assert value == 1.0 and flag


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 6))
def test_alignment_in_unit_interval(seed, r_star, r):
    rng = make_rng(seed)
    Gt = rng.standard_normal((8, 11))
    At = rng.standard_normal((8, r))
    Bt = rng.standard_normal((11, r))
    for val in (alignment_A(Gt, At, r_star), alignment_B(Gt, Bt, r_star)):
        assert 0.0 <= val <= 1.0


# -- linear dynamics -------------------------------------------------------------

def _h_power(Gt, At0, eta, t):
    Z = np.vstack([At0, np.zeros((Gt.shape[1], At0.shape[1]))])
    H = h_operator(Gt, eta)
    for _ in range(t):
        Z = H @ Z
    return Z[: Gt.shape[0]], Z[Gt.shape[0]:]


def test_linear_dynamics_first_steps():
    rng = make_rng(7)
    Gt, At0 = rng.standard_normal((8, 6)), rng.standard_normal((8, 3))
    A0, B0 = linear_dynamics(Gt, At0, 0.05, 0)
    assert np.allclose(A0, At0, atol=1e-14) and np.allclose(B0, 0, atol=1e-14)
    A1, B1 = linear_dynamics(Gt, At0, 0.05, 1)
    assert np.allclose(A1, At0, atol=1e-13)
    assert np.allclose(B1, 0.05 * Gt.T @ At0, atol=1e-13)


@pytest.mark.parametrize("shape", [(8, 6), (6, 8), (10, 10)])
def test_linear_dynamics_matches_h_power(shape):
    rng = make_rng(8)
    Gt = rng.standard_normal(shape)
    Gt /= np.linalg.norm(Gt, 2)
    At0 = rng.standard_normal((shape[0], 3)) * 0.1
    for t in range(0, 51, 5):
        A, B = linear_dynamics(Gt, At0, 0.05, t)
        Ah, Bh = _h_power(Gt, At0, 0.05, t)
        assert np.max(np.abs(A - Ah)) <= 1e-9 and np.max(np.abs(B - Bh)) <= 1e-9


def test_linearization_error_zero_at_start():
    Z = make_rng(9).standard_normal((5, 2))
    assert linearization_error(Z, Z) == 0.0


# -- closed-form bounds --------------------------------------------------------

def test_bounds_kappa_one_substitution():
    Gt = np.diag([2.0, 2.0, 2.0, 2.0, 0, 0, 0, 0])
    cfg = KronConfig(2, 2, 4, 16, 16)
    # pad to the kreshape shape of cfg
    Gfull = np.zeros(cfg.kreshape_shape)
    Gfull[:8, :8] = Gt
    tb = theory_bounds(Gfull, cfg, theta=0.3, xi=0.5, eta=0.01, r_star=4)
    assert tb.kappa == pytest.approx(1.0)
    assert tb.regime == "rstar_le_r_lt_2rstar"
    base = 0.3 * 0.5 * math.sqrt(2) / (24 * 4 * math.sqrt(2 * 16))
    scale = math.sqrt(2.0 * 2 / (94.5 * 2 * 2 * 16))
    assert tb.alpha_bound == pytest.approx(base ** 1.5 * scale, rel=1e-12)
    assert tb.t_star_A == pytest.approx(math.log(1 / base) / math.log(1.02), rel=1e-12)


def test_bounds_second_regime_ignores_xi():
    args = dict(sigma1=3.0, kappa=1.4, r1=2, r2=4, r=8, d_in=64, theta=0.3, regime="r_ge_2rstar")
    assert alpha_bound(xi=0.1, **args) == alpha_bound(xi=0.9, **args)
    targs = dict(sigma_rstar=1.0, eta=0.01, r1=2, r2=4, r=8, d_in=64, theta=0.3, regime="r_ge_2rstar")
    assert t_star_A(xi=0.1, **targs) == t_star_A(xi=0.9, **targs)
    assert t_star_B(xi=0.1, **targs) == t_star_B(xi=0.9, **targs)


def test_bounds_undefined_below_rstar():
    assert regime_of(2, 4) == "r_lt_rstar"
    task = make_task(0, CFG, 512, 4)
    tb = theory_bounds(kreshape(full_ft_gradient(task), KronConfig(2, 2, 2, 32, 32)),
                       KronConfig(2, 2, 2, 32, 32), r_star=4)
    assert tb.regime == "r_lt_rstar" and tb.alpha_bound is None and tb.t_star_A is None


def test_bounds_doubling_r2():
    for regime in ("rstar_le_r_lt_2rstar", "r_ge_2rstar"):
        a1 = alpha_bound(2.0, 1.3, 2, 2, 4, 64, 0.3, 0.5, regime)
        a2 = alpha_bound(2.0, 1.3, 2, 4, 4, 64, 0.3, 0.5, regime)
        t1 = t_star_A(1.5, 0.01, 2, 2, 4, 64, 0.3, 0.5, regime)
        t2 = t_star_A(1.5, 0.01, 2, 4, 4, 64, 0.3, 0.5, regime)
        assert a2 > a1 and t2 < t1


def test_bounds_errors():
    with pytest.raises(DegenerateSpectrumError):
        theory_bounds(np.zeros((8, 8)), KronConfig(2, 2, 4, 8, 8), r_star=2)
    with pytest.raises(ParameterError):
        theory_bounds(np.eye(8), KronConfig(2, 2, 4, 8, 8), theta=1.5)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2, 4, 8]), st.integers(1, 12),
       st.integers(1, 6), st.floats(1.0, 3.0))
def test_bound_monotonicity(r1, r2, r, r_star, kappa):
    regime = regime_of(r, r_star)
    assume(regime != "r_lt_rstar")
    d, th, xi = 256, 0.3, 0.5
    a = alpha_bound(1.0, kappa, r1, r2, r, d, th, xi, regime)
    assert alpha_bound(1.0, kappa, r1, 2 * r2, r, d, th, xi, regime) > a
    assert alpha_bound(1.0, kappa, 2 * r1, r2, r, d, th, xi, regime) < a
    t = t_star_A(0.5, 0.01, r1, r2, r, d, th, xi, regime)
    assert t_star_A(0.5, 0.01, r1, 2 * r2, r, d, th, xi, regime) < t
    if regime_of(r + 1, r_star) == regime:
        assert alpha_bound(1.0, kappa, r1, r2, r + 1, d, th, xi, regime) < a
        if regime == "rstar_le_r_lt_2rstar":
            assert t_star_A(0.5, 0.01, r1, r2, r + 1, d, th, xi, regime) > t


# -- traces ----------------------------------------------------------------------

def test_trace_signal_free_flagged():
    task = make_task(2, CFG, 128, 0)
    tr = train_and_trace(task, CFG, InitStrategy("A", "gaussian", 0.1), 0.1, 5, scaling="unit")
    assert tr.signal_free
    loss = tr.column("loss")
    assert np.allclose(loss, loss[0])


def test_trace_structure_and_csv():
    task = make_task(3, CFG, 256, 4)
    tr = train_and_trace(task, CFG, InitStrategy("A", "kaiming_normal"), 0.01, 6)
    steps = tr.column("step")
    assert steps.tolist() == list(range(7))
    for name in ("align_A", "align_B"):
        vals = tr.column(name)
        assert np.all((vals >= 0) & (vals <= 1))
    assert tr.records[0].lin_err == 0.0
    rows = list(csv.reader(io.StringIO(tr.to_csv())))
    assert rows[0] == TRACE_HEADER and len(rows) == 8


def test_trace_zero_steps():
    task = make_task(3, CFG, 256, 4)
    tr = train_and_trace(task, CFG, None, 0.01, 0)
    assert len(tr.records) == 1


def test_trace_b_random_uses_h_iteration():
    task = make_task(4, CFG, 256, 4)
    tr = train_and_trace(task, CFG, InitStrategy("B", "gaussian", 1e-6), 0.05, 10,
                         scaling="unit", r_star=4)
    # ||At0|| is 0 here; with a 1e-6 init the quadratic terms are ~1e-12 relative
    assert tr.records[0].lin_err_bound == 0.0
    assert np.max(tr.column("lin_err")) <= 1e-6 * 1e-6


def test_theorem_run_aligns_single_seed():
    run = theorem_run(0, CFG)
    assert run.reached("align_A", 0.3, 2 * run.bounds.t_star_A)
    assert run.reached("align_B", 0.3, 2 * run.bounds.t_star_B)
    assert run.eta * run.bounds.sigma_1 == pytest.approx(0.1)


def test_spread_ratio():
    assert spread_ratio([np.ones(10)]) == 1.0
    assert spread_ratio([np.ones(10), 3 * np.ones(10)], start=2) == pytest.approx(3.0)
    assert spread_ratio([np.ones(3), np.ones(3)], start=50) is None
