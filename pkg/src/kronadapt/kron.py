"""
Kronecker structure: component designs, Kreshape, the Kronecker SVD and the
counting formulas for a sum of ``r`` Kronecker components.

A component design ``(r1, r2, r)`` on a ``d_out x d_in`` weight fixes

    A_i : r1 x (d_in / r2)
    B_i : (d_out / r1) x r2
    dW  = sum_i B_i kron A_i

Kreshape cuts ``K`` into a ``(d_out/r1) x r2`` grid of ``r1 x (d_in/r2)``
blocks and lays ``vec(K_ij)`` out as columns, visiting the block grid in
column-major order. With that order ``kreshape(B kron A) = vec(A) vec(B)^T``.
"""
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import ConfigError, ShapeError
from .numkernel import as_matrix, numerical_rank, svd, unvec


@dataclass(frozen=True)
class KronConfig:
    r1: int
    r2: int
    r: int
    d_in: int
    d_out: int
    alpha: float = 1.0

    def __post_init__(self):
        for name in ("r1", "r2", "r", "d_in", "d_out"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha!r}")
        if self.d_out % self.r1:
            raise ConfigError(f"r1={self.r1} does not divide d_out={self.d_out}")
        if self.d_in % self.r2:
            raise ConfigError(f"r2={self.r2} does not divide d_in={self.d_in}")

    @property
    def a_shape(self):
        return (self.r1, self.d_in // self.r2)

    @property
    def b_shape(self):
        return (self.d_out // self.r1, self.r2)

    @property
    def kreshape_shape(self):
        """Shape of ``kreshape(K)``: (r1*d_in/r2, d_out*r2/r1)."""
        return (self.r1 * (self.d_in // self.r2), (self.d_out // self.r1) * self.r2)

    @property
    def triple(self):
        return (self.r1, self.r2, self.r)

    def label(self):
        return f"{self.r1}-{self.r2}-{self.r}"

    def to_dict(self):
        return {"r1": self.r1, "r2": self.r2, "r": self.r,
                "d_in": self.d_in, "d_out": self.d_out, "alpha": self.alpha}


@dataclass
class KronComponentPair:
    A: np.ndarray
    B: np.ndarray

    def check(self, config):
        if self.A.shape != config.a_shape:
            raise ShapeError(f"A has shape {self.A.shape}, expected {config.a_shape}")
        if self.B.shape != config.b_shape:
            raise ShapeError(f"B has shape {self.B.shape}, expected {config.b_shape}")
        return self


@dataclass
class KSVDResult:
    sigmas: np.ndarray
    pairs: List[KronComponentPair]
    config: KronConfig

    @property
    def rank(self):
        return len(self.pairs)

    def reconstruct(self, k=None):
        """``sum_{i<k} sigma_i B_i kron A_i`` (all terms when ``k`` is None)."""
        cfg = self.config
        k = self.rank if k is None else min(k, self.rank)
        out = np.zeros((cfg.d_out, cfg.d_in))
        for sigma, pair in zip(self.sigmas[:k], self.pairs[:k]):
            out += sigma * kron_product(pair.B, pair.A)
        return out

    def tail_energy(self, k):
        """Frobenius error of the rank-``k`` truncation, from the sigmas alone."""
        return float(np.sqrt(np.sum(self.sigmas[k:] ** 2)))


def _require_config(K, config):
    if K.shape != (config.d_out, config.d_in):
        raise ShapeError(f"K has shape {K.shape}, config expects {(config.d_out, config.d_in)}")


def kreshape(K, config):
    """Rearrange ``K`` (d_out x d_in) into ``(r1*d_in/r2) x (d_out*r2/r1)``.

    Pure entry permutation: column ``j*(d_out/r1) + i`` holds ``vec(K_ij)``.
    """
    K = as_matrix(K, "K")
    _require_config(K, config)
    r1, r2 = config.r1, config.r2
    p = config.d_in // r2
    q = config.d_out // r1
    # K4[i, a, j, b] = K[i*r1 + a, j*p + b]
    K4 = K.reshape(q, r1, r2, p)
    return np.ascontiguousarray(K4.transpose(3, 1, 2, 0)).reshape(p * r1, r2 * q)


def inverse_kreshape(Ktilde, config):
    Kt = as_matrix(Ktilde, "Ktilde")
    if Kt.shape != config.kreshape_shape:
        raise ShapeError(f"Ktilde has shape {Kt.shape}, expected {config.kreshape_shape}")
    r1, r2 = config.r1, config.r2
    p = config.d_in // r2
    q = config.d_out // r1
    K4 = Kt.reshape(p, r1, r2, q).transpose(3, 1, 2, 0)
    return np.ascontiguousarray(K4).reshape(config.d_out, config.d_in)


def kron_product(B, A):
    """Materialized ``B kron A``; block (i, j) is ``B[i, j] * A``."""
    B = as_matrix(B, "B")
    A = as_matrix(A, "A")
    m, n = B.shape
    p, q = A.shape
    out = B[:, None, :, None] * A[None, :, None, :]
    return out.reshape(m * p, n * q)


def kron_apply(pair, x, config=None):
    """``(B kron A) x`` computed as ``vec(A X B^T)`` without forming the product.

    ``x`` may be a vector of length ``d_in`` or a ``d_in x batch`` matrix.
    """
    A = np.asarray(pair.A, dtype=np.float64)
    B = np.asarray(pair.B, dtype=np.float64)
    if config is not None:
        pair.check(config)
    r2 = B.shape[1]
    p = A.shape[1]
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[:, None] if single else x
    if X.shape[0] != p * r2:
        raise ShapeError(f"input length {X.shape[0]} != d_in = {p * r2}")
    n = X.shape[1]
    # Xr[b, a, n] = X_n[a, b] with X_n the column-major (p x r2) reshape
    Xr = X.reshape(r2, p, n)
    AX = np.einsum("ka,ban->kbn", A, Xr)
    out = np.einsum("kbn,mb->mkn", AX, B).reshape(B.shape[0] * A.shape[0], n)
    return out[:, 0] if single else out


def ksvd(K, config, rank_tol=None):
    """Kronecker SVD ``K = sum_i sigma_i B_i kron A_i``.

    Factors come from the SVD of ``kreshape(K)``: ``vec(A_i)`` are its left
    singular vectors and ``vec(B_i)`` the right ones. The number of terms is
    the numerical rank of ``kreshape(K)`` (default tolerance
    ``sigma_1 * max(shape) * 2**-52``).
    """
    K = as_matrix(K, "K")
    _require_config(K, config)
    Kt = kreshape(K, config)
    U, s, V = svd(Kt)
    rstar = numerical_rank(s, tol=rank_tol, shape=Kt.shape)
    pairs = [
        KronComponentPair(unvec(U[:, i], *config.a_shape), unvec(V[:, i], *config.b_shape))
        for i in range(rstar)
    ]
    return KSVDResult(sigmas=s[:rstar].copy(), pairs=pairs, config=config)


def param_count(config):
    """Exact trainable-parameter count ``r * (r1*d_in/r2 + (d_out/r1)*r2)``."""
    return config.r * (config.r1 * (config.d_in // config.r2) + (config.d_out // config.r1) * config.r2)


def max_attainable_rank(config):
    return min(config.r * config.r1 * config.r2, config.d_in, config.d_out)


def stack_vec(mats):
    """Columns ``[vec(M_1), ..., vec(M_r)]`` for a stack of equally shaped matrices."""
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim == 2:
        mats = mats[None]
    r = mats.shape[0]
    return np.ascontiguousarray(mats.transpose(0, 2, 1)).reshape(r, -1).T


def unstack_vec(cols, shape):
    cols = as_matrix(cols)
    rows, ncols = shape
    return np.ascontiguousarray(cols.T.reshape(-1, ncols, rows).transpose(0, 2, 1))
