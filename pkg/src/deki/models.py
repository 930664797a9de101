"""Forward maps, the Tikhonov-regularized stacked problem and the two benchmarks.

Grid conventions
----------------
Transport: parameter index ``k`` (0-based) sits at ``x = (k + 1) / d_u`` and
observation ``m`` at ``x = (m + 1) / d_y`` on the unit circle.

Darcy: an ``N x N`` cell-centred grid with centres ``(i + 0.5) / N``; fields
are flattened row-major with ``x`` along the first axis.
"""

from __future__ import annotations

import csv
import os
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .rng import stream


class ForwardModel:
    """Deterministic map R^{d_u} -> R^{d_y} with a query counter.

    Subclasses implement ``_forward``. ``evaluate`` and ``evaluate_batch``
    count one query per input vector; ``peek`` evaluates without counting and
    is reserved for diagnostics such as the loss.
    """

    is_linear = False

    def __init__(self, d_u: int, d_y: int):
        self.d_u = int(d_u)
        self.d_y = int(d_y)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    def _bump(self, n: int) -> None:
        with self._lock:
            self._count += n

    def _check(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.d_u:
            raise ValueError(f"expected {self.d_u} parameters, got {u.shape[0]}")
        return u

    def _forward(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _forward_batch(self, U: np.ndarray) -> np.ndarray:
        return np.stack([self._forward(U[:, j]) for j in range(U.shape[1])], axis=1)

    def evaluate(self, u) -> np.ndarray:
        u = self._check(u)
        self._bump(1)
        return np.asarray(self._forward(u), dtype=float)

    def evaluate_batch(self, U) -> np.ndarray:
        """Images of the columns of ``U``; counts ``U.shape[1]`` queries."""
        U = self._check(U)
        self._bump(U.shape[1])
        return np.asarray(self._forward_batch(U), dtype=float).reshape(self.d_y, U.shape[1])

    def peek(self, u) -> np.ndarray:
        return np.asarray(self._forward(self._check(u)), dtype=float)

    def jacobian(self, u, h: float = 1e-6, order: int = 2) -> np.ndarray:
        """Central-difference Jacobian (uncounted).

        ``order=4`` uses the five-point stencil, which tolerates a much
        larger ``h`` and so suffers less from solver rounding.
        """
        u = self._check(u)
        if order not in (2, 4):
            raise ValueError("order must be 2 or 4")
        f = self._forward
        jac = np.empty((self.d_y, self.d_u))
        for i in range(self.d_u):
            e = np.zeros(self.d_u)
            e[i] = h
            if order == 2:
                jac[:, i] = (f(u + e) - f(u - e)) / (2 * h)
            else:
                jac[:, i] = (8 * (f(u + e) - f(u - e)) - f(u + 2 * e) + f(u - 2 * e)) / (12 * h)
        return jac


class LinearModel(ForwardModel):
    """``G(u) = A u`` for a dense matrix ``A``."""

    is_linear = True

    def __init__(self, matrix):
        a = np.atleast_2d(np.asarray(matrix, dtype=float))
        super().__init__(a.shape[1], a.shape[0])
        self.matrix = a

    def _forward(self, u):
        return self.matrix @ u

    def _forward_batch(self, U):
        return self.matrix @ U

    def jacobian(self, u=None, h: float = 0.0, order: int = 2) -> np.ndarray:
        return self.matrix


class QuadraticModel(ForwardModel):
    """``G(u) = A u + 0.5 [u^T B_k u]_k`` with constant Hessians ``B_k``.

    Parameters
    ----------
    linear : (d_y, d_u) array
    hessians : (d_y, d_u, d_u) array
        Symmetrized on construction.
    """

    def __init__(self, linear, hessians):
        a = np.atleast_2d(np.asarray(linear, dtype=float))
        b = np.asarray(hessians, dtype=float).reshape(a.shape[0], a.shape[1], a.shape[1])
        super().__init__(a.shape[1], a.shape[0])
        self.linear = a
        self.hessians = 0.5 * (b + b.transpose(0, 2, 1))

    @property
    def hessian_bound(self) -> float:
        """``sqrt(sum_k ||B_k||_2^2)``, exact since the Hessians are constant."""
        norms = [np.linalg.norm(bk, 2) for bk in self.hessians]
        return float(np.sqrt(np.sum(np.square(norms))))

    def _forward(self, u):
        return self.linear @ u + 0.5 * np.einsum("i,kij,j->k", u, self.hessians, u)

    def _forward_batch(self, U):
        return self.linear @ U + 0.5 * np.einsum("ia,kij,ja->ka", U, self.hessians, U)

    def jacobian(self, u, h: float = 0.0, order: int = 2) -> np.ndarray:
        return self.linear + self.hessians @ np.asarray(u, dtype=float)


class CallableModel(ForwardModel):
    """Wrap a plain function ``f(u) -> y``."""

    def __init__(self, fn, d_u: int, d_y: int):
        super().__init__(d_u, d_y)
        self.fn = fn

    def _forward(self, u):
        return np.atleast_1d(np.asarray(self.fn(u), dtype=float))


# -- regularized problem ---------------------------------------------------


def reg_apply(reg, U: np.ndarray) -> np.ndarray:
    """Apply ``C0^{-1/2}`` given as a scalar, a diagonal vector or a matrix."""
    r = np.asarray(reg, dtype=float)
    if r.ndim == 0:
        return float(r) * U
    if r.ndim == 1:
        return r[:, None] * U if U.ndim == 2 else r * U
    return r @ U


def reg_matrix(reg, d_u: int) -> np.ndarray:
    r = np.asarray(reg, dtype=float)
    if r.ndim == 0:
        return float(r) * np.eye(d_u)
    if r.ndim == 1:
        return np.diag(r)
    return r


@dataclass
class RegularizedProblem:
    """Data ``y``, forward model ``G`` and the operator ``C0^{-1/2}``.

    The stacked map is ``H(u) = [G(u); C0^{-1/2} u]`` with target
    ``z = [y; 0]``.
    """

    model: ForwardModel
    reg_sqrt_inv: object
    data: np.ndarray
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.atleast_1d(np.asarray(self.data, dtype=float))
        if self.data.shape[0] != self.model.d_y:
            raise ValueError("data length differs from the model's d_y")
        r = np.asarray(self.reg_sqrt_inv, dtype=float)
        if r.ndim == 0:
            ok = r > 0
        elif r.ndim == 1:
            ok = r.shape[0] == self.d_u and np.all(r > 0)
        else:
            ok = (
                r.shape == (self.d_u, self.d_u)
                and np.allclose(r, r.T, rtol=0, atol=1e-12 * np.abs(r).max())
                and np.linalg.eigvalsh(r).min() > 0
            )
        if not ok:
            raise ValueError("C0^{-1/2} must be symmetric positive definite")
        self.reg_sqrt_inv = r

    @property
    def d_u(self) -> int:
        return self.model.d_u

    @property
    def d_y(self) -> int:
        return self.model.d_y

    @property
    def d_z(self) -> int:
        return self.d_y + self.d_u

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.data, np.zeros(self.d_u)])

    def reg(self, U):
        return reg_apply(self.reg_sqrt_inv, np.asarray(U, dtype=float))

    def reg_matrix(self) -> np.ndarray:
        return reg_matrix(self.reg_sqrt_inv, self.d_u)

    def apply_batch(self, U) -> np.ndarray:
        """Stacked images of the columns of ``U``; counts one query each."""
        U = np.asarray(U, dtype=float)
        return np.vstack([self.model.evaluate_batch(U), self.reg(U)])

    def stacked_jacobian(self, u) -> np.ndarray:
        return np.vstack([self.model.jacobian(u), self.reg_matrix()])


def regularized_apply(p: RegularizedProblem, u) -> np.ndarray:
    """``H(u) = [G(u); C0^{-1/2} u]``; one counted query."""
    u = np.asarray(u, dtype=float)
    return np.concatenate([p.model.evaluate(u), p.reg(u)])


def loss(p: RegularizedProblem, u) -> float:
    """``0.5 ||y - G(u)||^2 + 0.5 ||C0^{-1/2} u||^2`` (not counted as a query)."""
    u = np.asarray(u, dtype=float)
    r = p.data - p.model.peek(u)
    g = p.reg(u)
    return 0.5 * float(r @ r) + 0.5 * float(g @ g)


class ReferenceSolveError(RuntimeError):
    """The reference optimizer did not meet its gradient tolerance."""

    def __init__(self, msg, u, value):
        super().__init__(msg)
        self.u = u
        self.loss = value


def optimal_solution(p: RegularizedProblem, max_iter: int = 50, fd_step: float = 1e-3):
    """Minimizer ``u*`` of the regularized loss and ``l_min = loss(u*)``.

    Linear models are solved exactly through least squares on the stacked
    operator. Other models use Gauss-Newton with a fourth-order
    finite-difference Jacobian and step halving, stopping once the gradient norm is at most
    ``1e-10 (1 + ||y||)``.

    Raises
    ------
    ReferenceSolveError
        If Gauss-Newton stalls; carries the best iterate.
    """
    z = p.z
    if p.model.is_linear:
        h = np.vstack([p.model.jacobian(), p.reg_matrix()])
        u = np.linalg.lstsq(h, z, rcond=None)[0]
        return u, loss(p, u)

    tol = 1e-10 * (1.0 + np.linalg.norm(p.data))
    u = np.zeros(p.d_u)
    best = loss(p, u)

    def resid(v):
        return z - np.concatenate([p.model.peek(v), p.reg(v)])

    for _ in range(max_iter):
        jac = np.vstack([p.model.jacobian(u, fd_step, order=4), p.reg_matrix()])
        r = resid(u)
        if np.linalg.norm(jac.T @ r) <= tol:
            return u, best
        step = np.linalg.lstsq(jac, r, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = loss(p, u + t * step)
            if cand <= best * (1 + 1e-13):
                break
            t *= 0.5
        else:
            break
        u = u + t * step
        best = cand
    jac = np.vstack([p.model.jacobian(u, fd_step, order=4), p.reg_matrix()])
    if np.linalg.norm(jac.T @ resid(u)) <= tol:
        return u, best
    raise ReferenceSolveError("Gauss-Newton did not reach the gradient tolerance", u, best)


# -- linear transport ------------------------------------------------------


def transport_matrix(d_u: int, d_y: int, a: float, T: float = 1.0) -> np.ndarray:
    """Shift-and-interpolate operator of the periodic transport equation."""
    g = np.zeros((d_y, d_u))
    for m in range(d_y):
        p = (((m + 1) / d_y - a * T) % 1.0) * d_u
        k0 = int(np.floor(p))
        w = p - k0
        g[m, (k0 - 1) % d_u] += 1.0 - w
        g[m, k0 % d_u] += w
    return g


class TransportModel(LinearModel):
    """Observations at time ``T`` of a periodic wave moving at speed ``a``."""

    def __init__(self, d_u: int, d_y: int, a: float, T: float = 1.0):
        if d_u < 1 or d_y < 1:
            raise ValueError("grid sizes must be positive")
        if T < 0:
            raise ValueError("final time must be non-negative")
        super().__init__(transport_matrix(d_u, d_y, a, T))
        self.speed = float(a)
        self.final_time = float(T)


def transport_model(d_u: int, d_y: int, a: float, T: float = 1.0) -> TransportModel:
    return TransportModel(d_u, d_y, a, T)


def generate_transport_data(model: ForwardModel, u0_true, sigma: float, seed: int) -> np.ndarray:
    """Noisy observations ``G(u0) + sigma * xi`` (uncounted evaluation)."""
    if sigma < 0:
        raise ValueError("noise level must be non-negative")
    clean = model.peek(u0_true)
    if sigma == 0:
        return clean
    return clean + sigma * stream(seed, "data-noise").standard_normal(model.d_y)


# -- Karhunen-Loeve basis ----------------------------------------------------


def kl_truncation_dim(eigvals, eps: float) -> int:
    """Smallest ``d`` with ``sum_{i>d} lambda_i <= eps * sum_i lambda_i``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    lam = np.clip(np.asarray(eigvals, dtype=float), 0.0, None)
    total = lam.sum()
    tail = total - np.concatenate([[0.0], np.cumsum(lam)])
    # small slack so that exact ties are not lost to rounding
    ok = tail <= eps * total * (1 + 1e-12)
    return int(np.argmax(ok))


def cell_centres(N: int) -> np.ndarray:
    return (np.arange(N) + 0.5) / N


@dataclass
class KLField:
    """Truncated Karhunen-Loeve expansion of a Gaussian field on the grid.

    ``modes`` holds the grid values of the orthonormal eigenfunctions
    (``sum psi_i psi_j / N^2 = delta_ij``); ``basis`` scales them by
    ``sqrt(lambda_i)``.
    """

    mean: float
    eigvals: np.ndarray
    modes: np.ndarray
    sigma: float
    lx: float
    ly: float
    eps: float
    N: int

    @property
    def d_u(self) -> int:
        return self.modes.shape[1]

    @property
    def basis(self) -> np.ndarray:
        return self.modes * np.sqrt(self.eigvals[: self.d_u])

    def field(self, coeffs) -> np.ndarray:
        """Flattened ``a(x) = mean + sum_i coeffs_i phi_i(x)``."""
        return self.mean + self.basis @ np.asarray(coeffs, dtype=float)


def kl_basis(sigma: float, lx: float, ly: float, N: int, eps: float, mean: float = 0.0) -> KLField:
    """Squared-exponential kernel eigenpairs on the ``N x N`` cell-centred grid.

    The Gram matrix is weighted by the quadrature weight ``1 / N^2`` and
    diagonalized densely; modes are kept until the discarded eigenvalue mass
    is at most ``eps`` times the trace.
    """
    if min(sigma, lx, ly) <= 0:
        raise ValueError("kernel parameters must be positive")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    c = cell_centres(N)
    xx, yy = np.meshgrid(c, c, indexing="ij")
    x, y = xx.ravel(), yy.ravel()
    k = sigma**2 * np.exp(
        -((x[:, None] - x[None, :]) ** 2) / (2 * lx**2) - ((y[:, None] - y[None, :]) ** 2) / (2 * ly**2)
    )
    lam, vec = np.linalg.eigh(k / N**2)
    order = np.argsort(-lam, kind="stable")
    lam = np.clip(lam[order], 0.0, None)
    vec = vec[:, order]
    d = kl_truncation_dim(lam, eps)
    return KLField(mean, lam, vec[:, :d] * N, sigma, lx, ly, eps, N)


# -- Darcy flow ----------------------------------------------------------------


class DarcySolveError(RuntimeError):
    pass


def _face_coefficients(k: np.ndarray):
    kx = 2 * k[1:, :] * k[:-1, :] / (k[1:, :] + k[:-1, :])
    ky = 2 * k[:, 1:] * k[:, :-1] / (k[:, 1:] + k[:, :-1])
    return kx, ky


def _diagonal(k, kx, ky):
    d = np.zeros_like(k)
    d[1:, :] += kx
    d[:-1, :] += kx
    d[:, 1:] += ky
    d[:, :-1] += ky
    # Dirichlet wall half a cell away
    d[0, :] += 2 * k[0, :]
    d[-1, :] += 2 * k[-1, :]
    d[:, 0] += 2 * k[:, 0]
    d[:, -1] += 2 * k[:, -1]
    return d


def darcy_operator_apply(log_perm, v, N: int) -> np.ndarray:
    """Matrix-free action of the discrete ``-div(exp(a) grad .)`` operator."""
    k = np.exp(np.asarray(log_perm, dtype=float).reshape(N, N))
    v = np.asarray(v, dtype=float).reshape(N, N)
    kx, ky = _face_coefficients(k)
    out = _diagonal(k, kx, ky) * v
    out[1:, :] -= kx * v[:-1, :]
    out[:-1, :] -= kx * v[1:, :]
    out[:, 1:] -= ky * v[:, :-1]
    out[:, :-1] -= ky * v[:, 1:]
    return out * N**2


def darcy_solve(log_perm, f, N: int) -> np.ndarray:
    """Solve ``-div(exp(a) grad v) = f`` on the unit square, ``v = 0`` on the wall.

    Cell-centred finite volumes with harmonic face averages of ``exp(a)``.
    The matrix is SPD with bandwidth ``N`` and is factorized by banded
    Cholesky.

    Parameters
    ----------
    log_perm, f : array
        Cell values, shape ``(N, N)`` or flattened.
    N : int
        Cells per side, at least 4.

    Returns
    -------
    (N, N) array of cell values.
    """
    if N < 4:
        raise ValueError("need N >= 4")
    a = np.asarray(log_perm, dtype=float).reshape(N, N)
    f = np.asarray(f, dtype=float).reshape(N, N)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(f))):
        raise DarcySolveError("non-finite coefficient or source")
    k = np.exp(a)
    kx, ky = _face_coefficients(k)
    ab = np.zeros((N + 1, N * N))
    ab[N] = _diagonal(k, kx, ky).ravel()
    off1 = np.zeros((N, N))
    off1[:, 1:] = -ky
    ab[N - 1] = off1.ravel()
    offn = np.zeros((N, N))
    offn[1:, :] = -kx
    ab[0] = offn.ravel()
    try:
        v = solveh_banded(ab * N**2, f.ravel(), check_finite=False)
    except LinAlgError as exc:
        raise DarcySolveError(f"discrete operator is not positive definite: {exc}") from exc
    return v.reshape(N, N)


def default_source(N: int) -> np.ndarray:
    c = cell_centres(N)
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return 13 * np.pi**2 * np.sin(2 * np.pi * xx) * np.sin(3 * np.pi * yy)


def subblock_centres(n: int = 8) -> np.ndarray:
    """Centres of an ``n x n`` partition of the unit square, shape ``(n^2, 2)``."""
    c = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def interpolation_matrix(points, N: int) -> np.ndarray:
    """Bilinear interpolation from cell values, with zero on the wall."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts < 0) or np.any(pts > 1):
        raise ValueError("observation points must lie in the unit square")
    nodes = np.concatenate([[0.0], cell_centres(N), [1.0]])
    w = np.zeros((len(pts), N * N))
    for r, (px, py) in enumerate(pts):
        ix = min(max(np.searchsorted(nodes, px, side="right") - 1, 0), N)
        iy = min(max(np.searchsorted(nodes, py, side="right") - 1, 0), N)
        tx = (px - nodes[ix]) / (nodes[ix + 1] - nodes[ix])
        ty = (py - nodes[iy]) / (nodes[iy + 1] - nodes[iy])
        for di, wx in ((0, 1 - tx), (1, tx)):
            for dj, wy in ((0, 1 - ty), (1, ty)):
                gi, gj = ix + di - 1, iy + dj - 1
                if 0 <= gi < N and 0 <= gj < N:
                    w[r, gi * N + gj] += wx * wy
    return w


class DarcyModel(ForwardModel):
    """KL coefficients -> pressure observations of the Darcy problem."""

    def __init__(self, kl: KLField, obs_points, N: int | None = None, source=None):
        N = kl.N if N is None else N
        if N != kl.N:
            raise ValueError("KL basis and solver grid differ")
        pts = np.atleast_2d(np.asarray(obs_points, dtype=float))
        super().__init__(kl.d_u, len(pts))
        self.kl = kl
        self.N = N
        self.obs = interpolation_matrix(pts, N)
        self.source = default_source(N) if source is None else np.asarray(source, dtype=float).reshape(N, N)
        self._basis = kl.basis

    def log_permeability(self, coeffs) -> np.ndarray:
        return self.kl.mean + self._basis @ np.asarray(coeffs, dtype=float)

    def _forward(self, u):
        v = darcy_solve(self.log_permeability(u), self.source, self.N)
        return self.obs @ v.ravel()


def darcy_model(kl: KLField, obs_points=None, N: int | None = None, source=None) -> DarcyModel:
    pts = subblock_centres(8) if obs_points is None else obs_points
    return DarcyModel(kl, pts, N, source)


# -- grid CSV ------------------------------------------------------------------


def write_grid_csv(path, values) -> None:
    """First row holds ``N``; then ``N`` rows of ``N`` values each."""
    v = np.asarray(values, dtype=float)
    N = int(round(np.sqrt(v.size)))
    if N * N != v.size:
        raise ValueError("field is not square")
    v = v.reshape(N, N)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([N])
        for row in v:
            w.writerow([f"{x:.17g}" for x in row])
    os.replace(tmp, path)


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    N = int(rows[0][0])
    v = np.array([[float(x) for x in r] for r in rows[1 : N + 1]])
    if v.shape != (N, N):
        raise ValueError("grid file is truncated")
    return v
