"""Runtime checks of the collapse, approximation and stability bounds.

All audits are offline: they read a ``RunRecord`` produced with
``trace=True`` and never touch the iteration loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .records import RunRecord
from .schemes import RANK_TOL, deviation_stats


def _sym_check(a: np.ndarray, tol: float, name: str) -> None:
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > tol * scale:
        raise ValueError(f"{name} is not symmetric")


def psd_margin(A, B) -> float:
    """Smallest eigenvalue of ``B - A``."""
    d = np.atleast_2d(np.asarray(B, dtype=float) - np.asarray(A, dtype=float))
    return float(np.linalg.eigvalsh(0.5 * (d + d.T))[0])


def psd_order(A, B, tol: float = 1e-10) -> bool:
    """Loewner order ``A <= B`` up to ``tol * max(1, ||B||)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape != B.shape:
        raise ValueError("shape mismatch")
    _sym_check(A, tol, "A")
    _sym_check(B, tol, "B")
    return psd_margin(A, B) >= -tol * max(1.0, float(np.linalg.norm(B, 2)))


def covariance_sandwich(C, h: float, gamma: float, M: float):
    """``C (I + M^2 h C)^{-2}`` and ``C (I + gamma^2 h C)^{-2}``."""
    if gamma > M:
        raise ValueError("need gamma <= M")
    if h <= 0 or gamma <= 0:
        raise ValueError("need h > 0 and gamma > 0")
    C = np.atleast_2d(np.asarray(C, dtype=float))
    w, v = np.linalg.eigh(0.5 * (C + C.T))
    w = np.clip(w, 0.0, None)

    def f(k2):
        return (v * (w / (1.0 + k2 * h * w) ** 2)) @ v.T

    return f(M**2), f(gamma**2)


def operator_norm(A, iters: int = 1000, tol: float = 1e-14, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.random.default_rng(seed).standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    val = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        new = math.sqrt(ny)
        if abs(new - val) <= tol * new:
            return new
        val = new
    return val


def linearization_bounds(run: RunRecord) -> tuple[float, float]:
    """``(gamma, M)`` with ``gamma^2 I <= H_n^T H_n <= M^2 I`` over all steps."""
    tr = _need_trace(run)
    if not tr.gamma2:
        raise ValueError("run has no linearization data")
    return math.sqrt(max(min(tr.gamma2), 0.0)), math.sqrt(max(tr.m2))


def _need_trace(run: RunRecord):
    if run.trace is None:
        raise ValueError("run was recorded without per-step covariance data")
    return run.trace


@dataclass
class CollapseReport:
    """Per-step covariance diagnostics and any violated bounds.

    Per-step arrays run over ``n = 0..N``; sandwich margins over
    ``n = 0..N-1`` (they compare step n with step n + 1).
    """

    cov_norm: np.ndarray
    rank: np.ndarray
    kappa: np.ndarray
    diag_min: np.ndarray
    diag_max: np.ndarray
    projector_drift: np.ndarray
    envelope: np.ndarray
    nominal_envelope: np.ndarray
    diag_bound: np.ndarray
    lower_margin: np.ndarray
    upper_margin: np.ndarray
    kappa_bar: float
    min_p: float
    gamma: float
    M: float
    theta: float
    flags: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flags

    def flagged(self, check: str) -> list:
        return [f["step"] for f in self.flags if f["check"] == check]

    def to_json(self) -> str:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        d["passed"] = self.passed
        return json.dumps(d, allow_nan=True)


def _empty_report(gamma, M, theta) -> CollapseReport:
    e = np.zeros(0)
    return CollapseReport(e, e, e, e, e, e, e, e, e, e, e, float("nan"), float("nan"), gamma, M, theta)


def audit_collapse(
    run: RunRecord,
    gamma: float | None = None,
    M: float | None = None,
    theta: float | None = None,
    tol: float = 1e-8,
    rank_tol: float = RANK_TOL,
) -> CollapseReport:
    """Check the collapse bounds on every recorded step.

    Checks, each with relative tolerance ``tol``:

    ``rank``      rank and column space of ``C_n`` equal those of ``C_0``
    ``kappa``     ``kappa_n <= max(kappa_0, 3 M^2 / (2 gamma^2))``
    ``envelope``  ``||C_n|| <= ||C_0|| prod_k (1 + gamma^2 theta_k)^{-2}`` with
                  the realized ``theta_k = h_k ||C_k||``
    ``diagonal``  ``min_s C_n(s,s) >= ||C_n|| min_s P(s,s) / kappa_bar``
    ``lower``/``upper``  the one-step sandwich of ``C_{n+1}``
    ``monotone``  every eigenvalue of ``C_n`` is non-increasing in n

    ``gamma`` and ``M`` default to the extreme values realized by the
    run's linearizations; ``theta`` defaults to the largest realized
    ``h_n ||C_n||``.
    """
    if run.n_steps == 0:
        return _empty_report(gamma or float("nan"), M or float("nan"), theta or float("nan"))
    tr = _need_trace(run)
    if gamma is None or M is None:
        g0, m0 = linearization_bounds(run)
        gamma = g0 if gamma is None else gamma
        M = m0 if M is None else M
    if gamma <= 0 or gamma > M:
        raise ValueError("need 0 < gamma <= M")
    N = len(tr.deviations) - 1
    covs = [tr.covariance(n) for n in range(N + 1)]
    stats = [deviation_stats(tr.deviations[n], rank_tol) for n in range(N + 1)]
    theta_eff = np.array([tr.h[n] * stats[n].norm for n in range(N)])
    if theta is None:
        theta = float(theta_eff.max())

    r0 = stats[0].rank
    u0 = np.linalg.svd(tr.deviations[0], full_matrices=False)[0][:, :r0]
    p0 = u0 @ u0.T
    min_p = float(np.diag(p0).min())
    kappa_bar = max(stats[0].kappa, 1.5 * M**2 / gamma**2)
    c0 = stats[0].norm

    envelope = c0 * np.concatenate([[1.0], np.cumprod((1.0 + gamma**2 * theta_eff) ** -2.0)])
    nominal = c0 * (1.0 + gamma**2 * theta) ** (-2.0 * np.arange(N + 1))
    diag_bound = np.array([s.norm * min_p / kappa_bar for s in stats])

    flags = []

    def flag(step, check, margin):
        flags.append({"step": int(step), "check": check, "margin": float(margin)})

    drift = np.zeros(N + 1)
    prev_eigs = None
    lower_m = np.zeros(N)
    upper_m = np.zeros(N)
    for n in range(N + 1):
        s = stats[n]
        un = np.linalg.svd(tr.deviations[n], full_matrices=False)[0][:, :r0]
        drift[n] = np.linalg.norm(un @ un.T - p0, 2)
        if s.rank != r0 or drift[n] > tol:
            flag(n, "rank", -drift[n] if s.rank == r0 else s.rank - r0)
        if s.kappa > kappa_bar * (1 + tol):
            flag(n, "kappa", (kappa_bar - s.kappa) / kappa_bar)
        if s.norm > envelope[n] * (1 + tol):
            flag(n, "envelope", (envelope[n] - s.norm) / max(envelope[n], 1e-300))
        if s.diag_min < diag_bound[n] - tol * s.norm:
            flag(n, "diagonal", (s.diag_min - diag_bound[n]) / max(s.norm, 1e-300))
        eigs = np.sort(np.linalg.eigvalsh(covs[n]))[::-1]
        if prev_eigs is not None and np.any(eigs > prev_eigs + tol * prev_eigs[0]):
            flag(n, "monotone", float(np.min(prev_eigs - eigs)) / prev_eigs[0])
        prev_eigs = eigs
        if n < N:
            scale = max(s.norm, 1e-300)
            lo, hi = covariance_sandwich(covs[n] / scale, tr.h[n] * scale, gamma, M)
            nxt = covs[n + 1] / scale
            lower_m[n] = psd_margin(lo, nxt)
            upper_m[n] = psd_margin(nxt, hi)
            if lower_m[n] < -tol:
                flag(n + 1, "lower", lower_m[n])
            if upper_m[n] < -tol:
                flag(n + 1, "upper", upper_m[n])

    return CollapseReport(
        cov_norm=np.array([s.norm for s in stats]),
        rank=np.array([s.rank for s in stats]),
        kappa=np.array([s.kappa for s in stats]),
        diag_min=np.array([s.diag_min for s in stats]),
        diag_max=np.array([s.diag_max for s in stats]),
        projector_drift=drift,
        envelope=envelope,
        nominal_envelope=nominal,
        diag_bound=diag_bound,
        lower_margin=lower_m,
        upper_margin=upper_m,
        kappa_bar=float(kappa_bar),
        min_p=min_p,
        gamma=float(gamma),
        M=float(M),
        theta=float(theta),
        flags=flags,
    )


# -- rate constants ------------------------------------------------------------


@dataclass(frozen=True)
class RateConstants:
    """Constants of the linear convergence estimate.

    ``delta_n(c) = a1 sqrt(c) + a2 c`` bounds the one-step perturbation for
    a covariance of norm ``c``.
    """

    beta0: float
    a1: float
    a2: float
    n0: int
    beta: float
    delta: float
    C1: float
    C2: float
    bigC: float

    def delta_n(self, cov_norm: float) -> float:
        return self.a1 * math.sqrt(cov_norm) + self.a2 * cov_norm


def rate_constants(
    c: float,
    L: float,
    M: float,
    gamma: float,
    theta: float,
    mu: float,
    lam: float,
    kappa_bar: float,
    min_p: float,
    c0_norm: float,
    J: int,
    hessian_bound: float,
) -> RateConstants:
    """Evaluate the rate constants.

    Parameters
    ----------
    c : float
        PL constant of the loss.
    L : float
        Smoothness constant of the loss.
    M, gamma : float
        Bounds ``gamma^2 I <= H_n^T H_n <= M^2 I``.
    theta, mu : float
        Deviation and mean step constants; need ``theta <= M^-2`` and
        ``mu <= 1/L``.
    lam : float
        Keep rate in (0, 1).
    kappa_bar, min_p : float
        Condition bound and smallest diagonal of the span projector.
    c0_norm : float
        ``||C_0||``.
    J : int
        Ensemble size.
    hessian_bound : float
        Bound ``H`` on the stacked Hessians (0 for linear maps).
    """
    pos = dict(c=c, L=L, M=M, gamma=gamma, theta=theta, mu=mu, kappa_bar=kappa_bar, min_p=min_p, c0_norm=c0_norm)
    bad = [k for k, v in pos.items() if not v > 0]
    if bad:
        raise ValueError(f"must be positive: {', '.join(bad)}")
    if hessian_bound < 0:
        raise ValueError("hessian_bound must be non-negative")
    if not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    if J < 2:
        raise ValueError("need J >= 2")
    if gamma > M:
        raise ValueError("need gamma <= M")
    if theta * M**2 > 1 + 1e-12:
        raise ValueError("need theta <= M^-2")
    if mu * L > 1 + 1e-12:
        raise ValueError("need mu <= 1/L")

    x = mu * M**2
    beta0 = c * lam * (1 - lam) / kappa_bar * min_p * mu * (1 + 2 * x) / (4 * (1 + x) ** 2)
    big_c = (J - 1) ** 1.5 * hessian_bound
    a1 = 2 * big_c * mu * (M + L * math.sqrt(mu))
    a2 = L * big_c**2 * mu**2
    c1 = a1 * math.sqrt(c0_norm) + a2 * c0_norm
    g = gamma**2 * theta
    delta = 1.0 / (1.0 + g)
    n0 = 0 if c1 <= beta0 else max(0, math.ceil(math.log(c1 / beta0) / math.log(1 / delta)))
    beta = min(beta0, g / (2 * (1 + g)))
    c2 = (1 - beta) ** n0 * c1 / (1 - beta - delta)
    return RateConstants(beta0, a1, a2, n0, beta, delta, c1, c2, big_c)


# -- Gauss-Newton comparison -------------------------------------------------------


def gauss_newton_reference(mean, cuu_dropout, jacobian, ht: float, z, h_mean) -> np.ndarray:
    """``mean + ht C~ G^T (I + ht G C~ G^T)^{-1} (z - H(mean))``."""
    c = np.atleast_2d(np.asarray(cuu_dropout, dtype=float))
    g = np.atleast_2d(np.asarray(jacobian, dtype=float))
    r = np.atleast_1d(np.asarray(z, dtype=float) - np.asarray(h_mean, dtype=float))
    cg = c @ g.T
    step = np.linalg.solve(np.eye(g.shape[0]) + ht * g @ cg, r)
    return np.asarray(mean, dtype=float) + ht * cg @ step


@dataclass
class LinearizationReport:
    """Both sides of the mean-step approximation bound, per step."""

    lhs: np.ndarray
    rhs: np.ndarray
    slack: float = -1e-10

    @property
    def margins(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def flags(self) -> list:
        return [int(n) for n in np.flatnonzero(self.margins < self.slack)]

    @property
    def passed(self) -> bool:
        return not self.flags

    def to_json(self) -> str:
        return json.dumps(
            {"lhs": self.lhs.tolist(), "rhs": self.rhs.tolist(), "margins": self.margins.tolist(),
             "flags": self.flags, "passed": self.passed}
        )


def audit_linearization_error(run: RunRecord, problem, hessian_bound: float) -> LinearizationReport:
    """Compare each recorded mean step with its Gauss-Newton counterpart.

    The bound is ``(J-1)^{3/2} H ht_n ||C~_n||^{3/2} ||z - H(mean_n)||``.
    The Jacobian comes from ``problem.model.jacobian`` (exact for linear
    and quadratic models, central differences otherwise).
    """
    tr = _need_trace(run)
    if len(tr.masks) != run.n_steps or len(tr.means) != run.n_steps + 1:
        raise ValueError("run lacks the mask or mean history")
    z = problem.z
    lhs = np.zeros(run.n_steps)
    rhs = np.zeros(run.n_steps)
    for n in range(run.n_steps):
        m = tr.means[n]
        d = tr.deviations[n]
        J = d.shape[1]
        t = tr.masks[n][:, None] * d
        ct = t @ t.T / (J - 1)
        hm = np.concatenate([problem.model.peek(m), problem.reg(m)])
        ref = gauss_newton_reference(m, ct, problem.stacked_jacobian(m), tr.htilde[n], z, hm)
        lhs[n] = np.linalg.norm(tr.means[n + 1] - ref)
        cn = np.linalg.norm(ct, 2) if ct.size else 0.0
        rhs[n] = (J - 1) ** 1.5 * hessian_bound * tr.htilde[n] * cn**1.5 * np.linalg.norm(z - hm)
    return LinearizationReport(lhs, rhs)


# -- stability of the mean residual -------------------------------------------------


def stability_ratios(residual_norms) -> np.ndarray:
    r = np.asarray(residual_norms, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = r[1:] / r[:-1]
    return np.where(r[:-1] == 0, np.where(r[1:] == 0, 1.0, np.inf), q)


def audit_stability(residual_norms, M: float, mu: float) -> bool:
    """True iff no residual ratio exceeds ``1 + M sqrt(mu/2) + 1e-10``."""
    q = stability_ratios(residual_norms)
    return bool(np.all(q <= 1 + M * math.sqrt(mu / 2) + 1e-10))


def residual_norms(run: RunRecord) -> np.ndarray:
    """``||z - H(mean_n)||`` recovered from the recorded losses."""
    return np.sqrt(2.0 * np.clip(run.series("loss"), 0.0, None))
