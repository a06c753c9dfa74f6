"""
Desk-scale checks of the alignment and linearization behavior of Kronecker
adapters on synthetic linear regression tasks.

Notation used throughout:

    G0      = (1/N) (Y - W0 X) X^T          full fine-tuning first-step gradient
    Gt      = kreshape(G0)                   (r1*d_in/r2) x (d_out*r2/r1)
    At      = [vec(A_1) ... vec(A_r)]
    Bt      = [vec(B_1) ... vec(B_r)]
    Z_t     = [At; Bt]
    H       = [[I, eta*Gt], [eta*Gt^T, I]]   linear part of the GD map

Alignment of A is ``||U_perp(Gt)^T U_{r*}(At)||_2``; of B it is
``||V_perp(Gt)^T V_{r*}(Bt^T)||_2``, where ``V_{r*}(Bt^T)`` are the top
left singular vectors of ``Bt``. Both lie in [0, 1]; 0 is perfect alignment.
"""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from . import adapter as ad
from .errors import ConfigError, DegenerateSpectrumError, ParameterError, ShapeError
from .kron import KronConfig, inverse_kreshape, kreshape, stack_vec
from .numkernel import as_matrix, make_rng, numerical_rank, orthonormal_complement, spectral_norm, svd

TRACE_HEADER = ["step", "loss", "align_A", "align_B", "grad_norm_A", "grad_norm_B",
                "input_grad_norm", "lin_err", "lin_err_bound"]

REGIMES = ("r_lt_rstar", "rstar_le_r_lt_2rstar", "r_ge_2rstar")


@dataclass
class SyntheticTask:
    X: np.ndarray
    Y: np.ndarray
    W0: np.ndarray
    planted_rank: int
    delta: np.ndarray
    config: Optional[KronConfig] = None  # design the target was planted for

    @property
    def n_samples(self):
        return self.X.shape[1]


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def make_task(rng, config, N, r_star, noise_std=0.0, signal=1.0, sigmas=None,
              w0_std=None, whiten=False):
    """
    Planted linear task ``Y = (W0 + D) X + noise``.

    ``D = sum_{i<r_star} c_i B*_i kron A*_i`` with orthonormal ``vec`` factors,
    so ``kreshape(D)`` has rank exactly ``r_star`` and singular values ``c``
    (``sigmas`` if given, else all equal to ``signal``). With ``whiten`` the
    sample covariance ``X X^T / N`` is made exactly the identity, which makes
    ``G0 == D`` when there is no noise.
    """
    rng = make_rng(rng)
    d_in, d_out = config.d_in, config.d_out
    m, n = config.kreshape_shape
    if r_star < 0 or r_star > min(m, n):
        raise ConfigError(f"r_star={r_star} exceeds min{config.kreshape_shape} for design {config.triple}")
    if N < d_in:
        import warnings
        warnings.warn(f"N={N} < d_in={d_in}: sample covariance is rank deficient")
    if sigmas is None:
        sigmas = np.full(r_star, float(signal))
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.shape != (r_star,):
        raise ShapeError(f"sigmas must have length r_star={r_star}")
    w0_std = 1.0 / math.sqrt(d_in) if w0_std is None else w0_std
    W0 = rng.standard_normal((d_out, d_in)) * w0_std
    X = rng.standard_normal((d_in, N))
    if whiten:
        cov = X @ X.T / N
        evals, evecs = np.linalg.eigh(cov)
        X = evecs @ ((evecs.T @ X) / np.sqrt(evals)[:, None])
    if r_star:
        Ua = _orthonormal_columns(rng, m, r_star)
        Vb = _orthonormal_columns(rng, n, r_star)
        delta = inverse_kreshape((Ua * sigmas) @ Vb.T, config)
    else:
        delta = np.zeros((d_out, d_in))
    Y = (W0 + delta) @ X
    if noise_std > 0:
        Y = Y + rng.standard_normal(Y.shape) * noise_std
    return SyntheticTask(X=X, Y=Y, W0=W0, planted_rank=r_star, delta=delta, config=config)


def full_ft_gradient(task_or_X, Y=None, W0=None):
    """``G0 = (1/N)(Y - W0 X) X^T``; accepts a task or explicit ``X, Y, W0``."""
    if Y is None:
        X, Y, W0 = task_or_X.X, task_or_X.Y, task_or_X.W0
    else:
        X = task_or_X
    X, Y, W0 = as_matrix(X, "X"), as_matrix(Y, "Y"), as_matrix(W0, "W0")
    if Y.shape[1] != X.shape[1] or W0.shape != (Y.shape[0], X.shape[0]):
        raise ShapeError(f"inconsistent shapes X{X.shape} Y{Y.shape} W0{W0.shape}")
    return (Y - W0 @ X) @ X.T / X.shape[1]


class GradientSubspaces:
    """Top-``r*`` singular subspaces of ``Gt`` and their complements,
    computed once and reused for every alignment query."""

    def __init__(self, Gt, r_star=None, rank_tol=None):
        Gt = as_matrix(Gt, "Gt")
        self.Gt = Gt
        U, s, V = svd(Gt)
        self.U, self.s, self.V = U, s, V
        if r_star is None:
            r_star = numerical_rank(s, tol=rank_tol, shape=Gt.shape)
        if r_star > min(Gt.shape):
            raise ConfigError(f"r_star={r_star} exceeds min{Gt.shape}")
        self.r_star = int(r_star)
        self.U_r = U[:, :r_star]
        self.V_r = V[:, :r_star]
        self.U_perp = _complement(self.U_r, Gt.shape[0])
        self.V_perp = _complement(self.V_r, Gt.shape[1])

    def alignment_A(self, At):
        return _alignment(self.U_perp, At, self.r_star)

    def alignment_B(self, Bt):
        return _alignment(self.V_perp, Bt, self.r_star)


def _complement(Q, n):
    if Q.shape[1] == n:
        return np.zeros((n, 0))
    if Q.shape[1] == 0:
        return np.eye(n)
    return orthonormal_complement(Q)


def _alignment(perp, M, r_star):
    """Returns ``(value, degenerate)``."""
    M = as_matrix(M)
    if M.shape[0] != perp.shape[0]:
        raise ShapeError(f"factor matrix has {M.shape[0]} rows, expected {perp.shape[0]}")
    if perp.shape[1] == 0:
        return 0.0, False
    U, s, _ = svd(M)
    if numerical_rank(s, shape=M.shape) < r_star or r_star == 0:
        return 1.0, True
    val = spectral_norm(perp.T @ U[:, :r_star])
    return min(val, 1.0), False


def alignment_A(Gt, At, r_star=None, with_flag=False):
    val, degenerate = GradientSubspaces(Gt, r_star).alignment_A(At)
    return (val, degenerate) if with_flag else val


def alignment_B(Gt, Bt, r_star=None, with_flag=False):
    val, degenerate = GradientSubspaces(Gt, r_star).alignment_B(Bt)
    return (val, degenerate) if with_flag else val


# -- linear dynamics ---------------------------------------------------------

def linear_dynamics(Gt, At0, eta, t, subspaces=None):
    """
    Closed form of ``Z_t = H^t [At0; 0]``.

    ``At_lin = U ((I+eta S)^t + (I-eta S)^t)/2 U^T At0 + (I - U U^T) At0``
    ``Bt_lin = V ((I+eta S)^t - (I-eta S)^t)/2 U^T At0``

    The projector term carries the part of ``At0`` outside ``range(Gt)``,
    which ``H`` leaves untouched; it vanishes when ``U`` is square.
    """
    Gt = as_matrix(Gt, "Gt")
    At0 = as_matrix(At0, "At0")
    if t < 0 or int(t) != t:
        raise ParameterError(f"t must be a non-negative integer, got {t}")
    if subspaces is None:
        U, s, V = svd(Gt)
    else:
        U, s, V = subspaces.U, subspaces.s, subspaces.V
    plus = (1.0 + eta * s) ** t
    minus = (1.0 - eta * s) ** t
    coef = U.T @ At0
    A_lin = U @ (0.5 * (plus + minus)[:, None] * coef) + (At0 - U @ coef)
    B_lin = V @ (0.5 * (plus - minus)[:, None] * coef)
    return A_lin, B_lin


def h_operator(Gt, eta):
    Gt = as_matrix(Gt, "Gt")
    m, n = Gt.shape
    return np.block([[np.eye(m), eta * Gt], [eta * Gt.T, np.eye(n)]])


def linearization_error(Z, Z_lin):
    """``||E_t||_2`` for stacked ``[At; Bt]`` minus its linearized counterpart."""
    return spectral_norm(np.asarray(Z) - np.asarray(Z_lin))


# -- theory bounds -----------------------------------------------------------

@dataclass
class TheoryConstants:
    """Multipliers for the step counts whose constants the theory hides."""

    t_star_A: float = 1.0
    t_star_B: float = 1.0


def regime_of(r, r_star):
    if r < r_star:
        return "r_lt_rstar"
    if r < 2 * r_star:
        return "rstar_le_r_lt_2rstar"
    return "r_ge_2rstar"


def _alpha_scale(sigma1, r1, r2, r, d_in):
    return math.sqrt(sigma1 * r2 / (94.5 * math.sqrt(r) * r1 * d_in))


def alpha_bound(sigma1, kappa, r1, r2, r, d_in, theta, xi, regime):
    """Largest admissible init std of At0 for the A-side alignment result."""
    if regime == "rstar_le_r_lt_2rstar":
        base = theta * xi * math.sqrt(r2) / (24.0 * r * math.sqrt(r1 * d_in))
    elif regime == "r_ge_2rstar":
        base = theta * math.sqrt(r2) / (24.0 * math.sqrt(r1 * d_in))
    else:
        return None
    return base ** (1.5 * kappa) * _alpha_scale(sigma1, r1, r2, r, d_in)


def t_star_A(sigma_rstar, eta, r1, r2, r, d_in, theta, xi, regime, const=1.0):
    if regime == "rstar_le_r_lt_2rstar":
        arg = 24.0 * r * math.sqrt(r1 * d_in) / (theta * xi * math.sqrt(r2))
    elif regime == "r_ge_2rstar":
        arg = 24.0 * math.sqrt(r1 * d_in) / (theta * math.sqrt(r2))
    else:
        return None
    return const * math.log(arg) / math.log1p(eta * sigma_rstar)


def t_star_B(sigma_rstar, eta, r1, r2, r, d_in, theta, xi, regime, const=1.0):
    if regime == "rstar_le_r_lt_2rstar":
        num = 6.0 * r * math.sqrt(r1 * d_in) / (theta * xi * math.sqrt(r2))
    elif regime == "r_ge_2rstar":
        num = 6.0 * math.sqrt(r1 * d_in) / (theta * math.sqrt(r2))
    else:
        return None
    return const * num / (eta * sigma_rstar)


def log_alpha_bound_B(sigma1, kappa, eta, r1, r2, r, d_in, theta, xi, regime):
    """Natural log of the B-side init bound; the bound itself underflows for
    any realistic step size."""
    if regime == "rstar_le_r_lt_2rstar":
        expo = 9.0 * kappa * r * math.sqrt(r1 * d_in) / (eta * theta * xi * math.sqrt(r2))
    elif regime == "r_ge_2rstar":
        expo = 9.0 * kappa * math.sqrt(r1 * d_in) / (eta * theta * math.sqrt(r2))
    else:
        return None
    return -expo + math.log(_alpha_scale(sigma1, r1, r2, r, d_in))


def alpha_bound_B(sigma1, kappa, eta, r1, r2, r, d_in, theta, xi, regime):
    lg = log_alpha_bound_B(sigma1, kappa, eta, r1, r2, r, d_in, theta, xi, regime)
    return None if lg is None else math.exp(lg)


def t_lin(sigma1, eta, r, a0_norm):
    """Horizon within which ``||E_t||_2 <= ||At0||_2``; may be negative when
    the initialization is too large for the linear regime to exist."""
    return math.log(sigma1 / (10.5 * math.sqrt(r) * a0_norm ** 2)) / (3.0 * math.log1p(eta * sigma1))


def expected_a0_norm(alpha, config):
    """High-probability bound ``3 * alpha * sqrt(r1*d_in/r2)`` on ``||At0||_2``."""
    return 3.0 * alpha * math.sqrt(config.r1 * config.d_in / config.r2)


@dataclass
class TheoryBounds:
    alpha_bound: Optional[float]
    t_star_A: Optional[float]
    t_star_B: Optional[float]
    t_lin: Optional[float]
    kappa: float
    r_star: int
    regime: str
    sigma_1: float
    sigma_rstar: float
    alpha_bound_B: Optional[float] = None
    log_alpha_bound_B: Optional[float] = None
    a0_norm: Optional[float] = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def theory_bounds(Gt, config, theta=0.3, xi=0.5, eta=0.01, r_star=None, a0_norm=None,
                  constants=None, subspaces=None):
    """
    Evaluate the closed-form alignment and linearization bounds for ``Gt``.

    ``eta`` is the effective step on the factors (``eta * lam`` for a scaled
    adapter). ``t_lin`` uses ``a0_norm`` when given, otherwise the
    high-probability bound on ``||At0||_2`` at ``alpha = alpha_bound``.
    """
    if not (0 < theta < 1 and 0 < xi < 1):
        raise ParameterError(f"theta and xi must lie in (0, 1), got {theta}, {xi}")
    if not eta > 0:
        raise ParameterError(f"eta must be positive, got {eta}")
    constants = constants or TheoryConstants()
    sub = subspaces or GradientSubspaces(Gt, r_star)
    rs = sub.r_star
    if rs < 1 or sub.s[rs - 1] <= 0:
        raise DegenerateSpectrumError("sigma_{r*}(Gt) is zero; bounds are undefined")
    s1, srs = float(sub.s[0]), float(sub.s[rs - 1])
    kappa = s1 / srs
    r1, r2, r, d_in = config.r1, config.r2, config.r, config.d_in
    regime = regime_of(r, rs)
    a_bound = alpha_bound(s1, kappa, r1, r2, r, d_in, theta, xi, regime)
    tA = t_star_A(srs, eta, r1, r2, r, d_in, theta, xi, regime, constants.t_star_A)
    tB = t_star_B(srs, eta, r1, r2, r, d_in, theta, xi, regime, constants.t_star_B)
    lgB = log_alpha_bound_B(s1, kappa, eta, r1, r2, r, d_in, theta, xi, regime)
    aB = None if lgB is None else math.exp(lgB)
    if a0_norm is None and a_bound is not None:
        a0_norm = expected_a0_norm(a_bound, config)
    tl = t_lin(s1, eta, r, a0_norm) if a0_norm else None
    return TheoryBounds(alpha_bound=a_bound, t_star_A=tA, t_star_B=tB, t_lin=tl, kappa=kappa,
                        r_star=rs, regime=regime, sigma_1=s1, sigma_rstar=srs,
                        alpha_bound_B=aB, log_alpha_bound_B=lgB, a0_norm=a0_norm)


# -- training traces ---------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    loss: float
    align_A: float
    align_B: float
    grad_norm_A: float
    grad_norm_B: float
    input_grad_norm: float
    lin_err: float
    lin_err_bound: float
    degenerate_A: bool = False
    degenerate_B: bool = False


@dataclass
class AlignmentTrace:
    records: List[StepRecord] = field(default_factory=list)
    r_star: int = 0
    signal_free: bool = False

    def column(self, name):
        return np.array([getattr(rec, name) for rec in self.records])

    def first_step_below(self, name, threshold):
        for rec in self.records:
            if getattr(rec, name) <= threshold and not getattr(rec, "degenerate_" + name[-1], False):
                return rec.step
        return None

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for rec in self.records:
            w.writerow([rec.step] + [repr(float(getattr(rec, k))) for k in TRACE_HEADER[1:]])
        return buf.getvalue()


def _stacked_factors(state):
    return stack_vec(state.A), stack_vec(state.B)


def train_and_trace(task, config, strategy, eta, steps, scaling="stabilized", lam=None,
                    rng=0, r_star=None, record_every=1, state=None, stop=None):
    """
    Run ``steps`` GD iterations from ``init_adapter`` and record an
    AlignmentTrace (step 0 is the initialization).

    ``stop``, if given, is called with the trace after each recorded step;
    a true return value ends the run early.

    The linearized trajectory uses the effective step ``eta * lam``. When
    ``r_star`` is None the numerical rank of ``kreshape(G0)`` is used.
    """
    if config.d_in != task.X.shape[0] or config.d_out != task.Y.shape[0]:
        raise ShapeError("config dimensions do not match the task")
    G0 = full_ft_gradient(task)
    Gt = kreshape(G0, config)
    signal_free = float(np.linalg.norm(Gt)) <= 1e-12 * max(1.0, float(np.linalg.norm(task.Y)))
    if signal_free:
        sub = None
        rs = 0
    else:
        sub = GradientSubspaces(Gt, r_star)
        rs = sub.r_star
    if state is None:
        state = ad.init_adapter(config, task.W0, strategy, rng, scaling=scaling, lam=lam)
    eff = eta * state.lam
    At0, Bt0 = _stacked_factors(state)
    zero_b = not np.any(Bt0)
    a0_norm = spectral_norm(At0)
    Hz = None if zero_b else h_operator(Gt, eff)
    Z_lin = np.vstack([At0, Bt0])
    trace = AlignmentTrace(r_star=rs, signal_free=signal_free)
    X, Y = task.X, task.Y
    for t in range(steps + 1):
        if t % record_every == 0 or t == steps:
            At, Bt = _stacked_factors(state)
            if zero_b and sub is not None:
                Al, Bl = linear_dynamics(Gt, At0, eff, t, subspaces=sub)
                Z_lin = np.vstack([Al, Bl])
            elif zero_b:
                Z_lin = np.vstack([At0, Bt0])
            lin_err = linearization_error(np.vstack([At, Bt]), Z_lin)
            if sub is None:
                (aA, dA), (aB, dB) = (1.0, True), (1.0, True)
            else:
                aA, dA = sub.alignment_A(At)
                aB, dB = sub.alignment_B(Bt)
            gA, gB, gX = ad.grad_norm_probe(state, X, Y)
            trace.records.append(StepRecord(
                step=t, loss=ad.loss(state, X, Y), align_A=aA, align_B=aB,
                grad_norm_A=gA, grad_norm_B=gB, input_grad_norm=gX,
                lin_err=lin_err, lin_err_bound=a0_norm, degenerate_A=dA, degenerate_B=dB))
            if stop is not None and stop(trace):
                break
        if t == steps:
            break
        state = ad.gd_step(state, X, Y, eta)
        if not zero_b:
            Z_lin = Hz @ Z_lin
    return trace


# -- experiment drivers --------------------------------------------------------

@dataclass
class TheoremRun:
    seed: int
    trace: AlignmentTrace
    bounds: TheoryBounds
    alpha: float
    eta: float

    def reached(self, name, theta, horizon):
        t = self.trace.first_step_below(name, theta)
        return t is not None and t <= horizon


def theorem_run(seed, config, N=512, r_star=4, theta=0.3, xi=0.5, eta_sigma=0.1,
                alpha_mult=1.0, steps=None, noise_std=0.0, init_seed=None, lin_mult=1.0):
    """
    One seeded run of the alignment harness.

    The task is planted with ``r_star`` Kronecker terms, the adapter starts
    from Gaussian ``A`` with std ``alpha_mult * alpha_bound`` and zero ``B``,
    and ``lam = 1`` so the factor dynamics match the analysis. The step size
    is ``eta_sigma / sigma_1(Gt)``.

    With ``steps=None`` the run lasts up to ``2 * max(t*_A, t*_B)`` and stops
    once both alignments have dropped to ``theta``. ``steps="lin"`` runs
    ``lin_mult * t_lin`` steps (rounded down), using the measured ``||At0||_2``.
    """
    if not alpha_mult > 0:
        raise ParameterError(f"alpha_mult must be positive, got {alpha_mult}")
    if not 0 < eta_sigma < 1:
        raise ParameterError(f"eta_sigma must lie in (0, 1), got {eta_sigma}")
    task = make_task(seed, config, N, r_star, noise_std=noise_std)
    Gt = kreshape(full_ft_gradient(task), config)
    sub = GradientSubspaces(Gt, r_star)
    eta = eta_sigma / float(sub.s[0])
    prelim = theory_bounds(Gt, config, theta, xi, eta, r_star=r_star, subspaces=sub)
    if prelim.alpha_bound is None:
        raise ParameterError(f"r={config.r} < r*={r_star}: no alpha bound in this regime")
    alpha = alpha_mult * prelim.alpha_bound
    strategy = ad.InitStrategy("A", "gaussian", alpha)
    init_seed = 1000 + seed if init_seed is None else init_seed
    state = ad.init_adapter(config, task.W0, strategy, init_seed, scaling="unit")
    a0 = spectral_norm(stack_vec(state.A))
    bounds = theory_bounds(Gt, config, theta, xi, eta, r_star=r_star, a0_norm=a0, subspaces=sub)
    stop = None
    if steps == "lin":
        steps = max(0, int(math.floor(lin_mult * bounds.t_lin)))
    elif steps is None:
        steps = int(math.ceil(2 * max(bounds.t_star_A, bounds.t_star_B)))

        def stop(tr):
            return (tr.first_step_below("align_A", theta) is not None
                    and tr.first_step_below("align_B", theta) is not None)
    trace = train_and_trace(task, config, strategy, eta, steps, r_star=r_star,
                            state=state, stop=stop)
    return TheoremRun(seed, trace, bounds, alpha, eta)


def stability_task(seed=0, d=64, N=256, target_std=0.125, w0_std=0.125):
    """Dense random regression target used for gradient-scale comparisons."""
    rng = make_rng(seed)
    X = rng.standard_normal((d, N))
    W0 = rng.standard_normal((d, d)) * w0_std
    delta = rng.standard_normal((d, d)) * target_std
    return SyntheticTask(X=X, Y=(W0 + delta) @ X, W0=W0, planted_rank=0, delta=delta, config=None)


def grad_norm_series(task, config, scaling, eta, steps, strategy=None, rng=1):
    """
    Gradient norms along a GD run, shape ``(steps + 1, 4)``.

    Columns: ``||grad A||``, ``||grad B||``, ``||input grad||`` and the total
    parameter-gradient norm ``sqrt(||grad A||^2 + ||grad B||^2)``.
    """
    strategy = strategy or ad.InitStrategy("A", "kaiming_uniform")
    state = ad.init_adapter(config, task.W0, strategy, rng, scaling=scaling)
    X, Y = task.X, task.Y
    out = np.empty((steps + 1, 4))
    for t in range(steps + 1):
        gA, gB = ad.gradients(state, X, Y)
        nA, nB = np.linalg.norm(gA), np.linalg.norm(gB)
        out[t] = (nA, nB, np.linalg.norm(ad.input_gradient(state, X, Y)), math.hypot(nA, nB))
        if t < steps:
            state = state.with_factors(state.A - eta * gA, state.B - eta * gB)
    return out


def spread_ratio(series, start=50, stop=None):
    """Mean over steps ``start..stop`` of max/min across configs.

    ``series`` is a list of 1-D arrays, one per config.
    """
    M = np.array([np.asarray(s)[start:stop] for s in series])
    if M.shape[0] < 2:
        return 1.0
    if M.shape[1] == 0:
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        r = M.max(axis=0) / M.min(axis=0)
    return float(np.mean(r))
