"""Iteration kernels: EKI, naive and full dropout EKI, localized EKI.

Every Kalman-type update is evaluated in the J-dimensional ensemble space.
With ``T`` and ``Y`` the centred member and image tables scaled by
``1/sqrt(J-1)``, the push-through identity

    T Y^T (I + h Y Y^T)^{-1} = T (I + h Y^T Y)^{-1} Y^T

replaces every ``d_z x d_z`` solve by a ``J x J`` one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .ensemble import (
    CovarianceBundle,
    DropoutMask,
    Ensemble,
    apply_dropout,
    centered,
    sample_mask,
)
from .models import RegularizedProblem, loss, reg_apply, reg_matrix, regularized_apply
from .records import RunRecord, RunTrace
from .rng import stream

RANK_TOL = 1e-12


@dataclass(frozen=True)
class StepSchedule:
    """Step constants: ``h_n = theta / (||C|| + eps0)``, ``h~_n = mu / (||C|| + eps0)``."""

    theta: float
    mu: float
    eps0: float = 1e-12

    def __post_init__(self):
        if not (self.theta > 0 and self.mu > 0 and self.eps0 >= 0):
            raise ValueError("need theta > 0, mu > 0 and eps0 >= 0")

    @classmethod
    def from_ratio(cls, mu: float, ratio: float = 0.1, eps0: float = 1e-12) -> "StepSchedule":
        return cls(theta=ratio * mu, mu=mu, eps0=eps0)


def adaptive_steps(cuu, sched: StepSchedule) -> tuple[float, float]:
    """Return ``(h_n, h~_n)`` for a covariance matrix or its spectral norm.

    Raises ValueError for a zero covariance when ``eps0 = 0``.
    """
    c = np.asarray(cuu, dtype=float)
    norm = float(c) if c.ndim == 0 else float(np.linalg.norm(np.atleast_2d(c), 2))
    denom = norm + sched.eps0
    if denom == 0:
        raise ValueError("zero covariance needs eps0 > 0")
    return sched.theta / denom, sched.mu / denom


@dataclass(frozen=True)
class SpectrumStats:
    norm: float
    rank: int
    kappa: float
    diag_min: float
    diag_max: float


def deviation_stats(deviations: np.ndarray, rank_tol: float = RANK_TOL) -> SpectrumStats:
    """Spectral norm, rank, modified condition number and diagonal range of C."""
    d = np.asarray(deviations, dtype=float)
    J = d.shape[1]
    s = np.linalg.svd(d, compute_uv=False)
    diag = np.einsum("ij,ij->i", d, d) / (J - 1)
    if s.size == 0 or s[0] == 0:
        return SpectrumStats(0.0, 0, float("nan"), float(diag.min()), float(diag.max()))
    r = int(np.sum(s > rank_tol * s[0]))
    return SpectrumStats(
        float(s[0] ** 2 / (J - 1)), r, float((s[0] / s[r - 1]) ** 2), float(diag.min()), float(diag.max())
    )


def _kalman_increment(t: np.ndarray, y: np.ndarray, h: float, resid: np.ndarray) -> np.ndarray:
    """``h T Y^T (I + h Y Y^T)^{-1} resid`` computed in ensemble space."""
    J = t.shape[1]
    lhs = np.eye(J) + h * (y.T @ y)
    return h * (t @ np.linalg.solve(lhs, y.T @ resid))


# -- vanilla and naive dropout EKI ------------------------------------------------


def eki_step(e: Ensemble, p: RegularizedProblem, h: float) -> Ensemble:
    """One Tikhonov EKI step; uses J forward queries."""
    if h <= 0:
        raise ValueError("step must be positive")
    U = e.members
    hu = p.apply_batch(U)
    inc = _kalman_increment(centered(U), centered(hu), h, p.z[:, None] - hu)
    return Ensemble(U + inc)


def naive_deki_step(e: Ensemble, p: RegularizedProblem, h: float, mask: DropoutMask) -> Ensemble:
    """EKI step with dropout covariances; residuals use the full members.

    Costs 2J queries: member images for the residuals and dropout images
    for the covariances.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    U = e.members
    hu = p.apply_batch(U)
    Ut = apply_dropout(e, mask).members
    hut = p.apply_batch(Ut)
    inc = _kalman_increment(centered(Ut), centered(hut), h, p.z[:, None] - hu)
    return Ensemble(U + inc)


# -- linearization of the deviation dynamics --------------------------------------


@dataclass
class LinearizedMap:
    """Truncated linearization ``H_n = [G_n; C0^{-1/2}]`` in factored form.

    ``G_n = W core V^T`` where ``V`` spans the deviations, ``W`` spans the
    image deviations and the singular values of ``core`` are capped at
    ``bound``.
    """

    left: np.ndarray
    core: np.ndarray
    basis: np.ndarray
    bound: float
    raw_singular_values: np.ndarray
    reg: object
    g_action: np.ndarray
    rank: int

    @property
    def d_u(self) -> int:
        return self.basis.shape[0]

    @property
    def action(self) -> np.ndarray:
        """Stacked ``H_n T`` for the deviation table it was built from."""
        return self.apply(self._t)

    def apply_g(self, x: np.ndarray) -> np.ndarray:
        return self.left @ (self.core @ (self.basis.T @ x))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([self.apply_g(x), reg_apply(self.reg, x)], axis=0)

    def g_matrix(self) -> np.ndarray:
        return self.left @ self.core @ self.basis.T

    def matrix(self) -> np.ndarray:
        return np.vstack([self.g_matrix(), reg_matrix(self.reg, self.d_u)])

    def singular_values(self) -> np.ndarray:
        return np.minimum(self.raw_singular_values, self.bound)


def linearize(T, Y, M_G: float | None = None, reg=0.0, rank_tol: float = RANK_TOL) -> LinearizedMap:
    """Least-squares linearization of the forward map from ensemble deviations.

    Parameters
    ----------
    T : (d_u, J) array
        Parameter deviations.
    Y : (d_y, J) array
        Forward-image deviations of the same members, same scaling as ``T``.
    M_G : float, optional
        Cap on the singular values of ``G_n``; ``None`` means no cap.
    reg : scalar, vector or matrix
        ``C0^{-1/2}``, stacked below ``G_n``.
    rank_tol : float
        Singular values of ``T`` below ``rank_tol`` times the largest are
        treated as zero.

    Notes
    -----
    With ``T = V S Q`` (thin SVD) and ``Y = W R`` (reduced QR), the core
    ``R Q^T S^{-1}`` is truncated at ``M_G``. When nothing is truncated,
    ``G_n T`` reproduces ``Y`` on the span of ``T``.
    """
    T = np.asarray(T, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if T.shape[1] != Y.shape[1]:
        raise ValueError("T and Y must have the same number of columns")
    if M_G is not None and M_G <= 0:
        raise ValueError("M_G must be positive")
    bound = np.inf if M_G is None else float(M_G)
    u, s, vt = np.linalg.svd(T, full_matrices=False)
    r = 0 if s.size == 0 or s[0] == 0 else int(np.sum(s > rank_tol * s[0]))
    basis = u[:, :r]
    w, rr = np.linalg.qr(Y)
    raw = rr @ vt[:r].T / s[:r]
    if r == 0:
        core = np.zeros((w.shape[1], 0))
        sv = np.zeros(0)
    else:
        a, sv, b = np.linalg.svd(raw, full_matrices=False)
        core = (a * np.minimum(sv, bound)) @ b
    hmap = LinearizedMap(w, core, basis, bound, sv, reg, np.zeros((Y.shape[0], T.shape[1])), r)
    hmap.g_action = hmap.apply_g(T)
    hmap._t = T
    return hmap


# -- full dropout EKI ----------------------------------------------------------------


def deki_mean_step(mean, bundle: CovarianceBundle, ht: float, z, h_mean) -> np.ndarray:
    """``mean + ht C~uz (I + ht C~zz)^{-1} (z - H(mean))`` from dense blocks."""
    resid = np.asarray(z, dtype=float) - np.asarray(h_mean, dtype=float)
    czz = np.atleast_2d(bundle.czz)
    step = np.linalg.solve(np.eye(czz.shape[0]) + ht * czz, resid)
    return np.asarray(mean, dtype=float) + ht * (np.atleast_2d(bundle.cuz) @ step)


def deki_deviation_step(deviations, hmap: LinearizedMap, h: float, cuu=None, form: str = "gram") -> np.ndarray:
    """Linearized deviation update ``tau <- (I + h C H_n^T H_n)^{-1} tau``.

    Parameters
    ----------
    deviations : (d_u, J) array
    hmap : LinearizedMap
        Built from the same deviations.
    h : float
        Deviation step size.
    cuu : array, optional
        Covariance to use instead of the one implied by ``deviations``;
        only read by the ``"kalman"`` and ``"inverse"`` forms.
    form : {"gram", "kalman", "inverse"}
        ``"gram"`` solves a J x J system, ``"kalman"`` uses the gain form
        ``tau - h C H^T (I + h H C H^T)^{-1} H tau`` and ``"inverse"`` forms
        the d_u x d_u inverse directly. All three agree in exact arithmetic.
    """
    d = np.asarray(deviations, dtype=float)
    if h < 0:
        raise ValueError("step must be non-negative")
    J = d.shape[1]
    a = hmap.apply(d)
    if form == "gram":
        out = np.linalg.solve(np.eye(J) + (h / (J - 1)) * (a.T @ a), d.T).T
    elif form == "kalman":
        c = d @ d.T / (J - 1) if cuu is None else np.asarray(cuu, dtype=float)
        hm = hmap.matrix()
        ch = c @ hm.T
        out = d - h * ch @ np.linalg.solve(np.eye(hm.shape[0]) + h * hm @ ch, a)
    elif form == "inverse":
        c = d @ d.T / (J - 1) if cuu is None else np.asarray(cuu, dtype=float)
        hm = hmap.matrix()
        out = np.linalg.solve(np.eye(d.shape[0]) + h * c @ hm.T @ hm, d)
    else:
        raise ValueError(f"unknown form {form!r}")
    return out


# -- localized EKI ---------------------------------------------------------------------


def gaspari_cohn(r) -> np.ndarray:
    """Fifth-order compactly supported Gaspari-Cohn correlation of ``r >= 0``."""
    r = np.abs(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    a = r <= 1
    b = (r > 1) & (r < 2)
    ra = r[a]
    out[a] = -0.25 * ra**5 + 0.5 * ra**4 + 0.625 * ra**3 - 5.0 / 3.0 * ra**2 + 1.0
    rb = r[b]
    out[b] = rb**5 / 12.0 - 0.5 * rb**4 + 0.625 * rb**3 + 5.0 / 3.0 * rb**2 - 5.0 * rb + 4.0 - 2.0 / (3.0 * rb)
    return out


@dataclass(frozen=True)
class LocalizationMatrix:
    """Taper ``psi`` of shape ``(d_u, d_z)`` applied to ``C^{uz}``."""

    psi: np.ndarray
    r_loc: float
    obs_index: np.ndarray


def _circular_distance(i, k, n):
    d = np.abs(np.asarray(i)[:, None] - np.asarray(k)[None, :]) % n
    return np.minimum(d, n - d)


def gaspari_cohn_localization(
    d_u: int, d_y: int, a: float | None = None, r_loc: float = 1.5, T: float = 1.0
) -> LocalizationMatrix:
    """Gaspari-Cohn taper on the periodic transport grid.

    Observation ``m`` is tied to the parameter index ``i_o(m)`` that most
    influences it: the grid point nearest to the back-traced location
    ``(m + 1) / d_y - a T`` when the speed is known, otherwise the point
    nearest to ``(m + 1) / d_y``. The regularization rows of ``z`` are tied
    to their own parameter index.
    """
    if r_loc <= 0:
        raise ValueError("r_loc must be positive")
    loc = (np.arange(d_y) + 1) / d_y
    if a is not None:
        loc = (loc - a * T) % 1.0
    io = (np.rint(loc * d_u).astype(int) - 1) % d_u
    idx = np.arange(d_u)
    psi_obs = gaspari_cohn(_circular_distance(idx, io, d_u) / r_loc)
    psi_reg = gaspari_cohn(_circular_distance(idx, idx, d_u) / r_loc)
    return LocalizationMatrix(np.hstack([psi_obs, psi_reg]), float(r_loc), io)


def leki_noise(deviations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Artificial noise ``xi`` whose symmetrized cross term with the deviations
    has unit diagonal.

    ``xi_j = eta_j + d * tau_j`` with Gaussian ``eta`` and a per-coordinate
    factor ``d`` solved in closed form. Coordinates with zero spread get
    ``d = 0``.
    """
    dev = np.asarray(deviations, dtype=float)
    J = dev.shape[1]
    eta = rng.standard_normal(dev.shape)
    css = np.einsum("ij,ij->i", dev, dev) / (J - 1)
    cross = 2.0 * np.einsum("ij,ij->i", eta, dev) / (J - 1)
    scale = np.zeros_like(css)
    pos = css > 0
    scale[pos] = (1.0 - cross[pos]) / (2.0 * css[pos])
    return eta + scale[:, None] * dev


def leki_step(
    e: Ensemble,
    p: RegularizedProblem,
    loc: LocalizationMatrix,
    h: float,
    sigma: float,
    rng: np.random.Generator | None = None,
) -> Ensemble:
    """Localized step ``u <- u + h (Psi o C^{uz}) (z - H(u)) + sigma^2 xi``; J queries."""
    U = e.members
    if loc.psi.shape != (p.d_u, p.d_z):
        raise ValueError("localization matrix has the wrong shape")
    hu = p.apply_batch(U)
    t = centered(U)
    cuz = t @ centered(hu).T
    out = U + h * (loc.psi * cuz) @ (p.z[:, None] - hu)
    if sigma > 0:
        if rng is None:
            raise ValueError("a random stream is needed when sigma > 0")
        out = out + sigma**2 * leki_noise(e.deviations, rng)
    return Ensemble(out)


# -- iteration driver ----------------------------------------------------------------


SCHEMES = ("eki", "naive-deki", "deki", "leki")


def _row(step, p, mean, dev, l_min, ynorm2, h, ht, queries, solution_error, diagnostics=True):
    st = deviation_stats(dev)
    lv = loss(p, mean) if diagnostics else float("nan")
    e_n = float("nan")
    if l_min is not None and ynorm2:
        e_n = max(0.0, lv - l_min) / ynorm2
    row = {
        "step": step,
        "loss": lv,
        "e_n": e_n,
        "cov_norm": st.norm,
        "diag_min": st.diag_min,
        "diag_max": st.diag_max,
        "rank": st.rank,
        "kappa": st.kappa,
        "h_n": h,
        "htilde_n": ht,
        "queries": queries,
    }
    if diagnostics and solution_error is not None:
        row["rel_error"] = float(solution_error(mean))
    return row


def _linearization_bounds(hmap: LinearizedMap, reg, d_u: int) -> tuple[float, float]:
    """Extreme eigenvalues of ``H_n^T H_n`` over the whole parameter space."""
    gv = hmap.core @ hmap.basis.T
    r = reg_matrix(reg, d_u)
    ev = np.linalg.eigvalsh(gv.T @ gv + r.T @ r)
    return float(ev[0]), float(ev[-1])


def run_scheme(
    scheme: str,
    ensemble: Ensemble,
    problem: RegularizedProblem,
    schedule: StepSchedule,
    n_steps: int,
    seed: int = 0,
    keep_rate: float = 0.5,
    mg: float | None = None,
    mg_factor: float = 10.0,
    localization: LocalizationMatrix | None = None,
    noise: float = 1e-3,
    l_min: float | None = None,
    solution_error=None,
    trace: bool = False,
    diagnostics: bool = True,
) -> RunRecord:
    """Iterate one scheme and record per-step metrics.

    Parameters
    ----------
    scheme : {"eki", "naive-deki", "deki", "leki"}
    ensemble : Ensemble
        Initial ensemble.
    problem : RegularizedProblem
    schedule : StepSchedule
        ``mu`` drives the mean (or full EKI) step, ``theta`` the deviation
        step of ``"deki"``. LEKI uses ``mu`` as its step constant.
    n_steps : int
    seed : int
        Base seed of the mask and noise streams.
    keep_rate : float
        Bernoulli keep probability of the dropout mask.
    mg : float, optional
        Fixed singular-value cap of the linearization. By default it is set
        to ``mg_factor`` times the largest singular value at step 0.
    localization : LocalizationMatrix, optional
        Required for ``"leki"``.
    noise : float
        LEKI noise level.
    l_min : float, optional
        Minimum loss; enables the relative misfit column.
    solution_error : callable, optional
        ``f(mean) -> float`` stored as ``rel_error``.
    trace : bool
        Keep the raw deviations and linearization bounds for audits.
    diagnostics : bool
        Evaluate the loss of the mean after each step. These evaluations
        are not counted as queries; switch them off when the forward map is
        an instrumented oracle.

    Returns
    -------
    RunRecord
        ``final_members`` holds the ensemble after the last step.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "leki" and localization is None:
        raise ValueError("leki needs a localization matrix")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    t0 = time.perf_counter()
    p = problem
    J = ensemble.J
    mean = ensemble.mean
    dev = ensemble.deviations
    ynorm2 = float(p.data @ p.data)
    q0 = p.model.query_count
    rec = RunRecord(scheme=scheme, seed=seed, initial={}, l_min=l_min, ynorm2=ynorm2)
    rec.initial = _row(0, p, mean, dev, l_min, ynorm2, float("nan"), float("nan"), 0, solution_error, diagnostics)
    tr = RunTrace() if trace else None
    if tr is not None:
        tr.deviations.append(dev.copy())
        tr.means.append(mean.copy())

    for n in range(n_steps):
        h, ht = adaptive_steps(deviation_stats(dev).norm, schedule)
        try:
            if scheme == "deki":
                mask = sample_mask(keep_rate, p.d_u, stream(seed, n, "mask"))
                U = mean[:, None] + dev
                gu = p.model.evaluate_batch(U)
                Ut = mean[:, None] + mask.keep[:, None] * dev
                hut = p.apply_batch(Ut)
                h_mean = regularized_apply(p, mean)
                new_mean = mean + _kalman_increment(centered(Ut), centered(hut), ht, p.z - h_mean)
                # the stored deviations are centred exactly; re-centring U
                # would add rounding noise that can pass the rank cutoff
                t = dev / np.sqrt(J - 1)
                hmap = linearize(t, centered(gu), mg, p.reg_sqrt_inv)
                if mg is None:
                    top = hmap.raw_singular_values
                    mg = mg_factor * float(top[0]) if top.size and top[0] > 0 else np.inf
                    hmap = linearize(t, centered(gu), mg, p.reg_sqrt_inv)
                new_dev = deki_deviation_step(dev, hmap, h)
                new_dev -= new_dev.mean(axis=1, keepdims=True)
                if tr is not None:
                    g2, m2 = _linearization_bounds(hmap, p.reg_sqrt_inv, p.d_u)
                    tr.gamma2.append(g2)
                    tr.m2.append(m2)
                    tr.masks.append(mask.keep.copy())
                mean, dev = new_mean, new_dev
            else:
                e = Ensemble(mean[:, None] + dev)
                if scheme == "eki":
                    e = eki_step(e, p, ht)
                elif scheme == "naive-deki":
                    mask = sample_mask(keep_rate, p.d_u, stream(seed, n, "mask"))
                    e = naive_deki_step(e, p, ht, mask)
                    if tr is not None:
                        tr.masks.append(mask.keep.copy())
                else:
                    e = leki_step(e, p, localization, ht, noise, stream(seed, n, "leki-noise"))
                mean, dev = e.mean, e.deviations
        except Exception as exc:
            raise RuntimeError(f"{scheme} failed at step {n}: {exc}") from exc
        if tr is not None:
            tr.deviations.append(dev.copy())
            tr.means.append(mean.copy())
            tr.h.append(h)
            tr.htilde.append(ht)
        rec.rows.append(
            _row(n + 1, p, mean, dev, l_min, ynorm2, h, ht, p.model.query_count - q0, solution_error, diagnostics)
        )

    rec.final_members = ensemble.members.copy() if n_steps == 0 else mean[:, None] + dev
    rec.trace = tr
    rec.config = {"scheme": scheme, "keep_rate": keep_rate, "mg": mg, "theta": schedule.theta,
                  "mu": schedule.mu, "eps0": schedule.eps0, "n_steps": n_steps, "seed": seed}
    rec.wall_time = time.perf_counter() - t0
    return rec


def deki_iterate(
    ensemble: Ensemble,
    problem: RegularizedProblem,
    schedule: StepSchedule,
    n_steps: int,
    seed: int = 0,
    keep_rate: float = 0.5,
    **kwargs,
) -> RunRecord:
    """Run the dropout EKI algorithm; 2J + 1 queries per step."""
    return run_scheme("deki", ensemble, problem, schedule, n_steps, seed, keep_rate, **kwargs)
