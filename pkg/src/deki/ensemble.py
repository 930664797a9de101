"""Ensemble container, empirical statistics and the shared dropout mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream

# relative tolerance for symmetry and PSD checks
PSD_TOL = 1e-10


@dataclass(frozen=True)
class Ensemble:
    """J parameter vectors stored as the columns of a ``(d_u, J)`` array."""

    members: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.members, dtype=float)
        if m.ndim == 1:
            m = m[None, :]
        if m.ndim != 2:
            raise ValueError("members must be a (d_u, J) array")
        if m.shape[1] < 2:
            raise ValueError("an ensemble needs J >= 2 members")
        if m.shape[0] < 1:
            raise ValueError("d_u must be positive")
        object.__setattr__(self, "members", m)

    @classmethod
    def from_vectors(cls, vectors) -> "Ensemble":
        """Build from a sequence of J vectors of equal length."""
        cols = [np.atleast_1d(np.asarray(v, dtype=float)) for v in vectors]
        if len({c.shape for c in cols}) > 1:
            raise ValueError("members must share one dimension")
        return cls(np.stack(cols, axis=1))

    @property
    def d_u(self) -> int:
        return self.members.shape[0]

    @property
    def J(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=1)

    @property
    def deviations(self) -> np.ndarray:
        return self.members - self.mean[:, None]


@dataclass(frozen=True)
class DropoutMask:
    """Binary keep-vector shared by all members at one step."""

    keep: np.ndarray
    keep_rate: float

    def __post_init__(self):
        k = np.asarray(self.keep, dtype=float)
        if k.ndim != 1 or not np.all((k == 0.0) | (k == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        object.__setattr__(self, "keep", k)


@dataclass(frozen=True)
class CovarianceBundle:
    """Empirical covariance blocks of an ensemble and its images."""

    cuu: np.ndarray
    cuz: np.ndarray
    czz: np.ndarray

    def check(self, tol: float = PSD_TOL) -> None:
        """Raise ``ValueError`` if a diagonal block is not symmetric PSD."""
        for name, c in (("cuu", self.cuu), ("czz", self.czz)):
            if not is_psd(c, tol):
                raise ValueError(f"{name} is not symmetric PSD")


def is_psd(c: np.ndarray, tol: float = PSD_TOL) -> bool:
    c = np.asarray(c, dtype=float)
    scale = max(np.abs(c).max(initial=0.0), 1e-300)
    if np.abs(c - c.T).max(initial=0.0) > tol * scale:
        return False
    return bool(np.linalg.eigvalsh(0.5 * (c + c.T)).min(initial=0.0) >= -tol * scale)


def gaussian_init(d_u: int, J: int, scale: float, seed: int) -> Ensemble:
    """Draw J i.i.d. members from N(0, scale^2 I).

    Parameters
    ----------
    d_u : int
        Parameter dimension.
    J : int
        Ensemble size, at least 2.
    scale : float
        Standard deviation of every coordinate.
    seed : int
        Base seed; the draw uses the ``"init"`` stream of that seed.
    """
    if J < 2:
        raise ValueError("an ensemble needs J >= 2 members")
    if d_u < 1:
        raise ValueError("d_u must be positive")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    z = stream(seed, "init").standard_normal((d_u, J))
    return Ensemble(scale * z)


def mean_and_deviations(e: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    """Return the ensemble mean and the ``(d_u, J)`` table of deviations."""
    m = e.mean
    return m, e.members - m[:, None]


def centered(x: np.ndarray) -> np.ndarray:
    """Columns of ``x`` minus their mean, scaled by ``1/sqrt(J-1)``."""
    x = np.asarray(x, dtype=float)
    return (x - x.mean(axis=1, keepdims=True)) / np.sqrt(x.shape[1] - 1)


def empirical_covariances(e: Ensemble, images) -> CovarianceBundle:
    """Covariances of members and their regularized-map images.

    ``images`` is a ``(d_z, J)`` array whose column j is the image of
    member j.
    """
    z = np.asarray(images, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != e.J:
        raise ValueError(f"got {z.shape[1]} images for {e.J} members")
    t = centered(e.members)
    y = centered(z)
    return CovarianceBundle(cuu=t @ t.T, cuz=t @ y.T, czz=y @ y.T)


def sample_mask(keep_rate: float, d_u: int, rng: np.random.Generator) -> DropoutMask:
    """Draw i.i.d. Bernoulli(keep_rate) entries from ``rng``."""
    if not 0.0 < keep_rate < 1.0:
        raise ValueError("keep_rate must lie strictly between 0 and 1")
    keep = (rng.random(d_u) < keep_rate).astype(float)
    return DropoutMask(keep, float(keep_rate))


def apply_dropout(e: Ensemble, m: DropoutMask) -> Ensemble:
    """Return members ``mean + keep * deviation``; the mean is unchanged."""
    if m.keep.shape[0] != e.d_u:
        raise ValueError("mask length differs from d_u")
    mean, dev = mean_and_deviations(e)
    return Ensemble(mean[:, None] + m.keep[:, None] * dev)


def expected_dropout_covariance(cuu: np.ndarray, keep_rate: float) -> np.ndarray:
    """Average of the mask-restricted covariance over Bernoulli masks.

    The result is ``lam (1 - lam) diag(C) + lam^2 C``.
    """
    c = np.atleast_2d(np.asarray(cuu, dtype=float))
    scale = max(np.abs(c).max(initial=0.0), 1e-300)
    if c.shape[0] != c.shape[1] or np.abs(c - c.T).max(initial=0.0) > PSD_TOL * scale:
        raise ValueError("covariance must be symmetric")
    lam = float(keep_rate)
    return lam * (1.0 - lam) * np.diag(np.diag(c)) + lam**2 * c
