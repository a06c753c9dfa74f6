"""
Dense real-matrix kernel.

Matrices are plain 2-D ``float64`` numpy arrays. Wherever a matrix is
flattened (``vec``) the order is column-major, so that
``(B kron A) vec(X) == vec(A X B^T)`` holds with the usual conventions.

The SVD is a one-sided Jacobi (Hestenes) iteration. It is slower than
LAPACK but small, deterministic and carries an explicit sweep cap; the
sizes used in this package (at most a few hundred rows) keep it cheap.
"""
import numpy as np

from .errors import NumericalError, ParameterError, PreconditionError, ShapeError

DEFAULT_SWEEPS = 100
DEFAULT_TOL = 1e-12


def as_matrix(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def vec(m):
    """Column-major vectorization."""
    return np.asarray(m, dtype=np.float64).reshape(-1, order="F")


def unvec(v, rows, cols):
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ShapeError(f"cannot reshape length {v.size} into {rows}x{cols}")
    return v.reshape(rows, cols, order="F")


def make_rng(seed):
    """Seeded generator; identical seeds give bit-identical streams."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} inner dimensions differ")
    return a @ b


def _fix_signs(u, v):
    # first entry of largest magnitude in each left vector is made non-negative
    for k in range(u.shape[1]):
        col = u[:, k]
        if col.size == 0:
            continue
        idx = int(np.argmax(np.abs(col)))
        if col[idx] < 0:
            u[:, k] = -col
            v[:, k] = -v[:, k]
    return u, v


def _complete_basis(u, keep):
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal
    completion of the kept columns (deterministic Gram-Schmidt on e_i)."""
    m = u.shape[0]
    basis = [u[:, k] for k in range(u.shape[1]) if keep[k]]
    fill = []
    need = int(np.sum(~keep))
    for i in range(m):
        if len(fill) == need:
            break
        e = np.zeros(m)
        e[i] = 1.0
        for _ in range(2):
            for q in basis + fill:
                e -= (q @ e) * q
        nrm = np.linalg.norm(e)
        if nrm > 1e-8:
            fill.append(e / nrm)
    out = u.copy()
    j = 0
    for k in range(u.shape[1]):
        if not keep[k]:
            out[:, k] = fill[j]
            j += 1
    return out


def _jacobi_tall(a, max_sweeps, tol):
    m, n = a.shape
    u = a.copy()
    v = np.eye(n)
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui = u[:, i]
                uj = u[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ui - s * uj
                new_j = s * ui + c * uj
                u[:, i] = new_i
                u[:, j] = new_j
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if not rotated:
            return u, v
    raise NumericalError(f"Jacobi SVD did not converge within the cap of {max_sweeps} sweeps")


def svd(m, max_sweeps=DEFAULT_SWEEPS, tol=DEFAULT_TOL):
    """
    Thin singular value decomposition ``m = U diag(s) V^T``.

    Parameters
    ----------
    m : array-like, (rows, cols)
    max_sweeps : int
        Iteration cap; exceeding it raises NumericalError.
    tol : float
        Relative orthogonality threshold below which a column pair is
        considered converged.

    Returns
    -------
    U : (rows, k) orthonormal columns, k = min(rows, cols)
    s : (k,) non-increasing, non-negative
    V : (cols, k) orthonormal columns

    The largest-magnitude entry of each column of U is non-negative.
    Equal singular values keep their original column order.
    """
    a = as_matrix(m)
    if not np.all(np.isfinite(a)):
        raise ParameterError("svd: input has non-finite entries")
    rows, cols = a.shape
    if rows < cols:
        v, s, u = _svd_tall(a.T, max_sweeps, tol)
        return _finish(u, s, v)
    return _finish(*_svd_tall(a, max_sweeps, tol))


def _finish(u, s, v):
    u = u.copy()
    v = v.copy()
    u, v = _fix_signs(u, v)
    return u, s, v


def _svd_tall(a, max_sweeps, tol):
    m, n = a.shape
    if n == 0:
        return np.zeros((m, 0)), np.zeros(0), np.zeros((0, 0))
    w, v = _jacobi_tall(a, max_sweeps, tol)
    s = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    w = w[:, order]
    v = v[:, order]
    smax = s[0] if s.size else 0.0
    keep = s > max(smax * 1e-15, np.finfo(float).tiny)
    u = np.zeros_like(w)
    u[:, keep] = w[:, keep] / s[keep]
    # w/s loses orthogonality as s -> 0; re-orthogonalize in descending
    # order, which perturbs the reconstruction only by O(eps * s_max)
    weak = np.flatnonzero(keep & (s < smax * 1e-6))
    for k in weak:
        col = u[:, k]
        for _ in range(2):
            col = col - u[:, :k] @ (u[:, :k].T @ col)
        nrm = np.linalg.norm(col)
        if nrm > 1e-8:
            u[:, k] = col / nrm
        else:
            keep[k] = False
    if not np.all(keep):
        u = _complete_basis(u, keep)
        s = np.where(keep, s, 0.0)
    return u, s, v


def singular_values(m, **kw):
    return svd(m, **kw)[1]


def spectral_norm(m):
    a = as_matrix(m)
    if a.size == 0:
        return 0.0
    return float(singular_values(a)[0])


def numerical_rank(s, tol=None, shape=None):
    """Count singular values above ``tol``.

    Default tolerance is ``s[0] * max(shape) * 2**-52``.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or s[0] == 0.0:
        return 0
    if tol is None:
        dim = max(shape) if shape is not None else s.size
        tol = s[0] * dim * np.finfo(np.float64).eps
    return int(np.sum(s > tol))


def orthonormal_complement(q):
    """Orthonormal basis of the orthogonal complement of ``span(q)``.

    ``q`` must have orthonormal columns and more rows than columns.
    """
    q = as_matrix(q, "Q")
    n, k = q.shape
    if k >= n:
        raise ShapeError(f"orthonormal_complement needs rows > cols, got {q.shape}")
    dev = np.linalg.norm(q.T @ q - np.eye(k))
    if dev > 1e-8:
        raise PreconditionError(f"Q columns not orthonormal (||Q^T Q - I||_F = {dev:.3e})")
    proj = np.eye(n) - q @ q.T
    u, _, _ = svd(proj)
    p = u[:, : n - k]
    # one re-orthogonalization pass against Q
    p = p - q @ (q.T @ p)
    p, _ = np.linalg.qr(p)
    return _sign_columns(p)


def _sign_columns(p):
    p = p.copy()
    for k in range(p.shape[1]):
        idx = int(np.argmax(np.abs(p[:, k])))
        if p[idx, k] < 0:
            p[:, k] = -p[:, k]
    return p


def sample_gaussian(rng, rows, cols, std):
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    return make_rng(rng).standard_normal((rows, cols)) * float(std)


def sample_uniform(rng, rows, cols, bound):
    if not bound > 0:
        raise ParameterError(f"bound must be positive, got {bound}")
    return make_rng(rng).uniform(-float(bound), float(bound), size=(rows, cols))
