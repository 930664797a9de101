"""Per-run records shared by the schemes, the audits and the harness."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

COLUMNS = (
    "step",
    "loss",
    "e_n",
    "cov_norm",
    "diag_min",
    "diag_max",
    "rank",
    "kappa",
    "h_n",
    "htilde_n",
    "queries",
)


@dataclass
class RunTrace:
    """Raw per-step state kept for offline audits.

    ``deviations`` and ``means`` hold ``n_steps + 1`` entries (before the
    first step through after the last); the other lists hold one entry per
    step.
    """

    deviations: list = field(default_factory=list)
    means: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    h: list = field(default_factory=list)
    htilde: list = field(default_factory=list)
    gamma2: list = field(default_factory=list)
    m2: list = field(default_factory=list)

    def covariance(self, n: int) -> np.ndarray:
        d = self.deviations[n]
        return d @ d.T / (d.shape[1] - 1)


@dataclass
class RunRecord:
    """Metrics of one run; ``rows`` has one dict per step."""

    scheme: str
    seed: int
    initial: dict
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    l_min: float | None = None
    ynorm2: float | None = None
    wall_time: float = 0.0
    final_members: np.ndarray | None = field(default=None, repr=False)
    trace: RunTrace | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def series(self, name: str) -> np.ndarray:
        """Column with the initial state prepended."""
        return np.array([self.initial[name]] + [r[name] for r in self.rows], dtype=float)

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
