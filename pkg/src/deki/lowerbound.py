"""Adversarial pair of linear maps that agree on a solver's queries.

Given query points ``U`` (at most ``d_u / 2`` of them) and any seed map
``G'`` with ``||G'|| <= 1``, ``adversarial_pair`` returns two maps ``G0`` and
``GB`` that coincide with ``G'`` on ``U`` yet whose regularized solutions
are at least ``||y|| / (3 sqrt 2)`` apart. A deterministic zeroth-order
solver cannot tell them apart, so it must be off by at least half the gap
on one of them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

GAP_FLOOR = 1.0 / (3.0 * np.sqrt(2.0))


def tikhonov_solution(G, y) -> np.ndarray:
    """``argmin_u 0.5 ||G u - y||^2 + 0.5 ||u||^2``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return np.linalg.solve(G.T @ G + np.eye(G.shape[1]), G.T @ y)


def _canonical_signs(q: np.ndarray) -> np.ndarray:
    """Flip columns so that each one's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(q), axis=0)
    s = np.sign(q[idx, np.arange(q.shape[1])])
    s[s == 0] = 1.0
    return q * s


@dataclass
class AdversarialPair:
    G0: np.ndarray
    GB: np.ndarray
    gap: float
    branch: int
    rank: int


def adversarial_pair(U, y, G_seed=None, rank_tol: float = 1e-12) -> AdversarialPair:
    """Build ``(G0, GB)`` agreeing with ``G_seed`` on the columns of ``U``.

    Parameters
    ----------
    U : (d_u, n) array
        Query points, ``n <= d_u / 2``.
    y : (d_y,) array
        Data; only its direction enters the construction.
    G_seed : (d_y, d_u) array, optional
        Seed map with spectral norm at most 1; zero by default.
    rank_tol : float
        Relative cutoff for the rank of ``U``.

    Returns
    -------
    AdversarialPair
        ``branch`` is 1 when the data has at least half its energy outside
        the range of the seed map restricted to the query span, else 2.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d_u, n = U.shape
    d_y = y.shape[0]
    if n < 1 or not np.all(np.isfinite(U)):
        raise ValueError("need at least one finite query")
    if n > d_u / 2:
        raise ValueError(f"{n} queries exceed d_u/2 = {d_u / 2}; guarantee void")
    G_seed = np.zeros((d_y, d_u)) if G_seed is None else np.atleast_2d(np.asarray(G_seed, dtype=float))
    if G_seed.shape != (d_y, d_u):
        raise ValueError("seed map has the wrong shape")
    if np.linalg.norm(G_seed, 2) > 1 + 1e-12:
        raise ValueError("seed map must have norm at most 1")
    ynorm = np.linalg.norm(y)
    if ynorm == 0:
        raise ValueError("y must be nonzero")
    yn = y / ynorm

    left, sv, _ = np.linalg.svd(U, full_matrices=True)
    r = int(np.sum(sv > rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    sigma = _canonical_signs(left)
    C = G_seed @ sigma[:, :r]
    q, _, _ = np.linalg.svd(C, full_matrices=True) if r else (np.eye(d_y), None, None)
    q = _canonical_signs(q)
    rp = min(r, d_y)
    zq = q.T @ yn
    z2 = zq[rp:]
    bt = np.zeros((d_y, d_u - r))
    if z2 @ z2 >= 0.5:
        branch = 1
        bt[rp:, 0] = z2 / np.linalg.norm(z2)
    else:
        branch = 2
        bt[:rp, :rp] = np.eye(rp)
    B = q @ bt
    G0 = np.hstack([C, np.zeros((d_y, d_u - r))]) @ sigma.T
    GB = np.hstack([C, B]) @ sigma.T
    gap = float(np.linalg.norm(tikhonov_solution(G0, y) - tikhonov_solution(GB, y)))
    return AdversarialPair(G0, GB, gap, branch, r)


class QueryOracle:
    """Callable ``u -> G u`` that logs every query."""

    def __init__(self, G):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.queries: list[np.ndarray] = []

    @property
    def d_u(self) -> int:
        return self.G.shape[1]

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float).copy()
        self.queries.append(u)
        return self.G @ u

    @property
    def U(self) -> np.ndarray:
        return np.stack(self.queries, axis=1) if self.queries else np.zeros((self.G.shape[1], 0))


@dataclass
class FoolResult:
    """Outcome of one adversarial trial (JSON-serializable via ``to_json``)."""

    applicable: bool
    queries_used: int
    budget: int
    worst_error: float
    errors: list = field(default_factory=list)
    gap: float = float("nan")
    branch: int = 0
    y_norm: float = 1.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def fool_solver(solver, d_u: int, d_y: int, y, G_seed=None) -> FoolResult:
    """Run ``solver(y, oracle) -> u`` against the adversarial pair.

    The solver first runs against ``G_seed`` (zero by default). If it used
    more than ``d_u // 2`` queries the result is marked not applicable and
    its error on the seed problem is reported. Otherwise it is re-run on
    both adversarial maps; those runs must issue the same queries and
    return the same answer, and the larger of the two errors is returned.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape[0] != d_y:
        raise ValueError("y has the wrong length")
    G_seed = np.zeros((d_y, d_u)) if G_seed is None else np.asarray(G_seed, dtype=float)
    budget = d_u // 2
    probe = QueryOracle(G_seed)
    u_seed = np.asarray(solver(y, probe), dtype=float)
    used = len(probe.queries)
    if used > budget or used == 0:
        err = float(np.linalg.norm(u_seed - tikhonov_solution(G_seed, y)))
        return FoolResult(False, used, budget, err, [err], y_norm=float(np.linalg.norm(y)))

    pair = adversarial_pair(probe.U, y, G_seed)
    errors = []
    answers = []
    for G in (pair.G0, pair.GB):
        orc = QueryOracle(G)
        u = np.asarray(solver(y, orc), dtype=float)
        if len(orc.queries) != used or not np.allclose(orc.U, probe.U, rtol=0, atol=1e-10 * max(1.0, np.abs(probe.U).max())):
            raise AssertionError("solver issued different queries on maps that agree on them")
        answers.append(u)
        errors.append(float(np.linalg.norm(u - tikhonov_solution(G, y))))
    if not np.allclose(answers[0], answers[1], rtol=1e-10, atol=1e-12):
        raise AssertionError("solver returned different answers on indistinguishable maps")
    return FoolResult(True, used, budget, max(errors), errors, pair.gap, pair.branch, float(np.linalg.norm(y)))


def zero_solver(y, oracle) -> np.ndarray:
    """Query the origin once and answer zero."""
    oracle(np.zeros(oracle.d_u))
    return np.zeros(oracle.d_u)


def basis_solver(y, oracle) -> np.ndarray:
    """Recover ``G`` column by column (``d_u`` queries), then solve exactly."""
    G = np.column_stack([oracle(e) for e in np.eye(oracle.d_u)])
    return tikhonov_solution(G, y)


def deki_solver(budget: int, J: int = 2, keep_rate: float = 0.5, mu: float = 0.5, ratio: float = 0.1, seed: int = 0):
    """Dropout EKI wrapped as a zeroth-order solver with a hard query budget.

    The regularizer is the identity. Each step costs ``2 J + 1`` queries;
    the solver stops before exceeding ``budget`` and returns its mean.
    """
    from .ensemble import gaussian_init
    from .models import CallableModel, RegularizedProblem
    from .schemes import StepSchedule, run_scheme

    per_step = 2 * J + 1

    def solve(y, oracle):
        d_u = oracle.d_u
        model = CallableModel(oracle, d_u, len(y))
        prob = RegularizedProblem(model, 1.0, y)
        ens = gaussian_init(d_u, J, 1.0, seed)
        steps = budget // per_step
        rec = run_scheme(
            "deki", ens, prob, StepSchedule.from_ratio(mu, ratio), steps, seed, keep_rate, diagnostics=False
        )
        return rec.final_members.mean(axis=1)

    return solve
