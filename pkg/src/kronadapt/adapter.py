"""
Kronecker adapter layer ``W = W0 + lam * sum_i B_i kron A_i``.

Factors are stored stacked: ``A`` has shape ``(r, r1, d_in/r2)`` and ``B``
has shape ``(r, d_out/r1, r2)``. The update matrix is never formed; each
component is applied with the vec trick ``(B kron A) x = vec(A X B^T)``.

Training objective is the batch-averaged squared error

    L = 1/(2N) * ||Y - (W0 + lam * sum_i B_i kron A_i) X||_F^2
"""
import json
import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import ParameterError, ParseError, ShapeError
from .kron import KronComponentPair, KronConfig
from .numkernel import as_matrix, make_rng

Distribution = Literal["kaiming_uniform", "kaiming_normal", "gaussian"]

STATE_FORMAT = "kronadapt-state/1"


@dataclass(frozen=True)
class InitStrategy:
    """Which factor is random (the other starts at exactly zero) and how."""

    which_random: Literal["A", "B"] = "A"
    distribution: Distribution = "kaiming_uniform"
    std: float = 1.0  # only used by "gaussian"

    def __post_init__(self):
        if self.which_random not in ("A", "B"):
            raise ParameterError(f"which_random must be 'A' or 'B', got {self.which_random!r}")
        if self.distribution not in ("kaiming_uniform", "kaiming_normal", "gaussian"):
            raise ParameterError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "gaussian" and not self.std > 0:
            raise ParameterError(f"gaussian std must be positive, got {self.std}")

    @classmethod
    def parse(cls, text, std=1.0):
        """Parse ``"A:kaiming_uniform"`` / ``"B:kaiming_normal"`` / ``"A:gaussian"``."""
        try:
            side, dist = text.split(":")
        except ValueError:
            raise ParameterError(f"init strategy must look like 'A:kaiming_uniform', got {text!r}")
        return cls(side.strip(), dist.strip(), std)


def stabilized_lambda(config):
    """``alpha / sqrt(r * r2)``; keeps the early gradient scale independent
    of the component design."""
    return config.alpha / math.sqrt(config.r * config.r2)


def resolve_lambda(config, scaling="stabilized", lam=None):
    if lam is not None:
        if not lam > 0:
            raise ParameterError(f"lambda must be positive, got {lam}")
        return float(lam)
    if scaling == "stabilized":
        return stabilized_lambda(config)
    if scaling == "unit":
        return 1.0
    raise ParameterError(f"scaling must be 'stabilized' or 'unit', got {scaling!r}")


@dataclass(frozen=True)
class KronAdapterState:
    config: KronConfig
    W0: np.ndarray
    A: np.ndarray
    B: np.ndarray
    lam: float

    @property
    def pairs(self):
        return [KronComponentPair(self.A[i], self.B[i]) for i in range(self.config.r)]

    def delta_w(self):
        """Materialized update; for tests and small diagnostics only."""
        cfg = self.config
        out = np.zeros((cfg.d_out, cfg.d_in))
        for a, b in zip(self.A, self.B):
            out += np.kron(b, a)
        return self.lam * out

    def with_factors(self, A, B):
        return replace(self, A=A, B=B)


def _frozen(m):
    m = np.array(m, dtype=np.float64, copy=True)
    m.setflags(write=False)
    return m


def _kaiming_sample(rng, shape, fan_in, distribution, std):
    if distribution == "gaussian":
        return rng.standard_normal(shape) * std
    var = 2.0 / fan_in
    if distribution == "kaiming_normal":
        return rng.standard_normal(shape) * math.sqrt(var)
    bound = math.sqrt(3.0 * var)
    return rng.uniform(-bound, bound, size=shape)


def init_adapter(config, W0, strategy=None, rng=0, scaling="stabilized", lam=None):
    """
    Build an adapter whose random factor follows ``strategy`` and whose other
    factor is zero, so the layer initially computes ``W0 @ x``.

    Kaiming fan-in is the column count of the random factor (``d_in/r2`` for
    A, ``r2`` for B); entry variance ``2 / fan_in``.
    """
    strategy = strategy or InitStrategy()
    W0 = as_matrix(W0, "W0")
    if W0.shape != (config.d_out, config.d_in):
        raise ShapeError(f"W0 has shape {W0.shape}, config expects {(config.d_out, config.d_in)}")
    rng = make_rng(rng)
    r = config.r
    a_shape = (r,) + config.a_shape
    b_shape = (r,) + config.b_shape
    if strategy.which_random == "A":
        A = _kaiming_sample(rng, a_shape, config.a_shape[1], strategy.distribution, strategy.std)
        B = np.zeros(b_shape)
    else:
        A = np.zeros(a_shape)
        B = _kaiming_sample(rng, b_shape, config.b_shape[1], strategy.distribution, strategy.std)
    return KronAdapterState(config, _frozen(W0), A, B, resolve_lambda(config, scaling, lam))


def _check_batch(state, X, Y=None):
    X = as_matrix(X, "X")
    cfg = state.config
    if X.shape[0] != cfg.d_in:
        raise ShapeError(f"X has {X.shape[0]} rows, expected d_in = {cfg.d_in}")
    if Y is not None:
        Y = as_matrix(Y, "Y")
        if Y.shape != (cfg.d_out, X.shape[1]):
            raise ShapeError(f"Y has shape {Y.shape}, expected {(cfg.d_out, X.shape[1])}")
    return X, Y


def _reshape_inputs(state, X):
    cfg = state.config
    p = cfg.d_in // cfg.r2
    # Xr[b, a, n] = X_n[a, b], X_n the column-major (d_in/r2 x r2) reshape of x_n
    return X.reshape(cfg.r2, p, X.shape[1])


def adapter_output(state, X):
    """``lam * sum_i (B_i kron A_i) X`` via per-component vec tricks."""
    cfg = state.config
    Xr = _reshape_inputs(state, X)
    q = cfg.d_out // cfg.r1
    out = np.zeros((q, cfg.r1, X.shape[1]))
    for a, b in zip(state.A, state.B):
        ax = np.einsum("ka,ban->kbn", a, Xr)
        out += np.einsum("kbn,mb->mkn", ax, b)
    return state.lam * out.reshape(cfg.d_out, X.shape[1])


def forward(state, X):
    X, _ = _check_batch(state, X)
    return state.W0 @ X + adapter_output(state, X)


def loss(state, X, Y):
    X, Y = _check_batch(state, X, Y)
    R = forward(state, X) - Y
    return 0.5 * float(np.sum(R * R)) / X.shape[1]


def _output_grads(state, X, Y):
    # dL/dy_n = (y_n - Y_n) / N, reshaped column-major to r1 x (d_out/r1)
    cfg = state.config
    R = (forward(state, X) - Y) / X.shape[1]
    return R.reshape(cfg.d_out // cfg.r1, cfg.r1, X.shape[1])


def gradients(state, X, Y):
    """
    Analytic gradients of the batch loss.

    Returns
    -------
    gradA : (r, r1, d_in/r2)
        ``lam * sum_n V_n B_i X_n^T`` for each component.
    gradB : (r, d_out/r1, r2)
        ``lam * sum_n V_n^T A_i X_n``.

    ``V_n`` is the output gradient of sample n reshaped to ``r1 x d_out/r1``
    and ``X_n`` the input reshaped to ``d_in/r2 x r2`` (both column-major).
    """
    X, Y = _check_batch(state, X, Y)
    Vr = _output_grads(state, X, Y)  # [m, k, n] = V_n[k, m]
    Xr = _reshape_inputs(state, X)  # [b, a, n] = X_n[a, b]
    gradA = np.empty_like(state.A)
    gradB = np.empty_like(state.B)
    for i, (a, b) in enumerate(zip(state.A, state.B)):
        vb = np.einsum("mkn,mb->kbn", Vr, b)
        gradA[i] = np.einsum("kbn,ban->ka", vb, Xr)
        ax = np.einsum("ka,ban->kbn", a, Xr)
        gradB[i] = np.einsum("mkn,kbn->mb", Vr, ax)
    gradA *= state.lam
    gradB *= state.lam
    return gradA, gradB


def input_gradient(state, X, Y):
    """Gradient of the loss w.r.t. the layer input along the adapter path,
    ``lam * sum_i (B_i kron A_i)^T v_n`` per sample (d_in x N)."""
    X, Y = _check_batch(state, X, Y)
    cfg = state.config
    Vr = _output_grads(state, X, Y)
    p = cfg.d_in // cfg.r2
    g = np.zeros((cfg.r2, p, X.shape[1]))
    for a, b in zip(state.A, state.B):
        vb = np.einsum("mkn,mb->kbn", Vr, b)
        g += np.einsum("ka,kbn->ban", a, vb)
    return state.lam * g.reshape(cfg.d_in, X.shape[1])


def gd_step(state, X, Y, eta):
    """One simultaneous gradient-descent step on every A_i and B_i."""
    if eta < 0:
        raise ParameterError(f"eta must be non-negative, got {eta}")
    if eta == 0:
        return state
    gA, gB = gradients(state, X, Y)
    return state.with_factors(state.A - eta * gA, state.B - eta * gB)


def grad_norm_probe(state, X, Y):
    """Frobenius norms ``(||grad A||, ||grad B||, ||input grad||)``."""
    gA, gB = gradients(state, X, Y)
    g = input_gradient(state, X, Y)
    return (float(np.linalg.norm(gA)), float(np.linalg.norm(gB)), float(np.linalg.norm(g)))


# -- serialization -----------------------------------------------------------

def _matrix_record(m):
    m = np.asarray(m, dtype=np.float64)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]),
            "data": m.reshape(-1, order="F").tolist()}


def _matrix_from_record(rec, what):
    try:
        rows, cols, data = int(rec["rows"]), int(rec["cols"]), rec["data"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed matrix record for {what}: {exc}")
    if len(data) != rows * cols:
        raise ParseError(f"{what}: header says {rows}x{cols} but has {len(data)} values")
    return np.asarray(data, dtype=np.float64).reshape(rows, cols, order="F")


def state_to_dict(state):
    return {
        "format": STATE_FORMAT,
        "layout": "column-major",
        "config": state.config.to_dict(),
        "lambda": state.lam,
        "W0": _matrix_record(state.W0),
        "pairs": [{"A": _matrix_record(a), "B": _matrix_record(b)}
                  for a, b in zip(state.A, state.B)],
    }


def state_from_dict(d):
    if d.get("format") != STATE_FORMAT:
        raise ParseError(f"unsupported state format {d.get('format')!r}")
    config = KronConfig(**d["config"])
    pairs = d["pairs"]
    if len(pairs) != config.r:
        raise ParseError(f"expected {config.r} component pairs, found {len(pairs)}")
    A = np.stack([_matrix_from_record(p["A"], f"pairs[{i}].A") for i, p in enumerate(pairs)])
    B = np.stack([_matrix_from_record(p["B"], f"pairs[{i}].B") for i, p in enumerate(pairs)])
    if A.shape[1:] != config.a_shape or B.shape[1:] != config.b_shape:
        raise ShapeError("factor shapes do not match the stored config")
    W0 = _matrix_from_record(d["W0"], "W0")
    if W0.shape != (config.d_out, config.d_in):
        raise ShapeError("W0 shape does not match the stored config")
    return KronAdapterState(config, _frozen(W0), A, B, float(d["lambda"]))


def save_state(state, path):
    with open(path, "w") as fh:
        json.dump(state_to_dict(state), fh)


def load_state(path):
    with open(path) as fh:
        return state_from_dict(json.load(fh))
