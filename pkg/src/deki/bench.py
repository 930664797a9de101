"""Experiment configuration, problem builders, metrics and result files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ensemble import gaussian_init
from .models import (
    KLField,
    LinearModel,
    RegularizedProblem,
    darcy_model,
    kl_basis,
    optimal_solution,
    transport_model,
)
from .records import COLUMNS, RunRecord
from .rng import stream
from .schemes import SCHEMES, StepSchedule, gaspari_cohn_localization, run_scheme

SCHEMA_VERSION = 1
PROBLEMS = ("transport", "darcy", "synthetic-linear")

# kernel parameters of the four Darcy setups: mean, sigma, l_x, l_y, eps
DARCY_SETUPS = {
    1: (0.0, 0.1, 0.1, 0.1, 1e-3),
    2: (0.0, 0.1, 0.2, 0.05, 1e-3),
    3: (0.0, 0.1, 0.15, 0.05, 1e-3),
    4: (0.0, 0.1, 0.1, 0.05, 1e-3),
}

_NOISE = {"transport": 1e-2, "darcy": 1e-3, "synthetic-linear": 1e-2}
_MEAN_STEP = {"transport": 2.5, "darcy": 0.5, "synthetic-linear": 2.5}
LEKI_STEP = 1.0


@dataclass
class ExperimentConfig:
    """Flat experiment description; ``None`` fields take problem defaults."""

    schema_version: int = SCHEMA_VERSION
    problem: str = "transport"
    scheme: str = "deki"
    d_u: int = 120
    d_y: int | None = None
    speed: float = 0.25
    final_time: float = 1.0
    noise: float | None = None
    gamma: float = 0.1
    init_scale: float | None = None
    setup: int = 1
    grid: int = 32
    J: int = 20
    keep_rate: float = 0.5
    mean_step: float | None = None
    step_ratio: float = 0.1
    eps0: float = 1e-12
    mg: float | None = None
    mg_factor: float = 10.0
    r_loc: float = 1.5
    leki_noise: float = 1e-3
    leki_knows_speed: bool = True
    n_steps: int = 100
    n_rep: int = 100
    seed: int = 0
    data_seed: int = 0
    randomize_problem: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.J < 2:
            raise ValueError("J must be at least 2")
        if not 0 < self.keep_rate < 1:
            raise ValueError("keep_rate must lie in (0, 1)")
        if self.problem == "darcy" and self.setup not in DARCY_SETUPS:
            raise ValueError(f"unknown Darcy setup {self.setup}")
        if self.n_steps < 0 or self.n_rep < 1:
            raise ValueError("need n_steps >= 0 and n_rep >= 1")
        for name in ("gamma", "step_ratio", "mg_factor", "r_loc", "final_time"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        if "schema_version" not in d:
            raise ValueError("config lacks schema_version")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @property
    def resolved_noise(self) -> float:
        return _NOISE[self.problem] if self.noise is None else self.noise

    @property
    def resolved_mean_step(self) -> float:
        if self.mean_step is not None:
            return self.mean_step
        return LEKI_STEP if self.scheme == "leki" else _MEAN_STEP[self.problem]

    @property
    def resolved_init_scale(self) -> float:
        return self.gamma if self.init_scale is None else self.init_scale


@dataclass
class ProblemInstance:
    problem: RegularizedProblem
    l_min: float
    u_star: np.ndarray
    truth: np.ndarray
    speed: float | None = None
    kl: KLField | None = None
    solution_error: object = field(default=None, repr=False)


def _problem_stream(cfg: ExperimentConfig, rep: int | None):
    if cfg.randomize_problem and rep is not None:
        return stream(cfg.data_seed, "problem", rep)
    return stream(cfg.data_seed, "problem")


def build_problem(cfg: ExperimentConfig, rep: int | None = None) -> ProblemInstance:
    """Forward model, truth, noisy data and reference minimum.

    With ``randomize_problem`` the speed (transport), truth and noise are
    drawn per repeat ``rep``; otherwise they are fixed by ``data_seed``.
    """
    rng = _problem_stream(cfg, rep)
    sigma = cfg.resolved_noise
    speed = None
    kl = None
    err = None
    if cfg.problem == "transport":
        d_y = cfg.d_u if cfg.d_y is None else cfg.d_y
        speed = float(rng.uniform(0.0, 1.0)) if cfg.randomize_problem else cfg.speed
        model = transport_model(cfg.d_u, d_y, speed, cfg.final_time)
        truth = rng.standard_normal(cfg.d_u)
        reg = cfg.gamma / math.sqrt(cfg.d_u)
    elif cfg.problem == "darcy":
        mean, s, lx, ly, eps = DARCY_SETUPS[cfg.setup]
        kl = kl_basis(s, lx, ly, cfg.grid, eps, mean)
        model = darcy_model(kl)
        truth = rng.standard_normal(kl.d_u)
        reg = cfg.gamma
        a_true = kl.field(truth)

        def err(coeffs, _a=a_true, _kl=kl):
            return relative_solution_error(_kl.field(coeffs), _a)

    else:
        d_y = cfg.d_u if cfg.d_y is None else cfg.d_y
        model = LinearModel(rng.standard_normal((d_y, cfg.d_u)) / math.sqrt(cfg.d_u))
        truth = rng.standard_normal(cfg.d_u)
        reg = cfg.gamma
    y = model.peek(truth) + sigma * rng.standard_normal(model.d_y)
    prob = RegularizedProblem(model, reg, y, truth=truth)
    u_star, l_min = optimal_solution(prob)
    return ProblemInstance(prob, l_min, u_star, truth, speed, kl, err)


def run(cfg: ExperimentConfig, seed: int | None = None, instance: ProblemInstance | None = None,
        trace: bool = False) -> RunRecord:
    """One run of ``cfg.scheme``; initial ensemble and masks follow ``seed``."""
    seed = cfg.seed if seed is None else seed
    inst = build_problem(cfg, seed) if instance is None else instance
    p = inst.problem
    ens = gaussian_init(p.d_u, cfg.J, cfg.resolved_init_scale, seed)
    sched = StepSchedule.from_ratio(cfg.resolved_mean_step, cfg.step_ratio, cfg.eps0)
    loc = None
    if cfg.scheme == "leki":
        loc = gaspari_cohn_localization(
            p.d_u, p.d_y, inst.speed if cfg.leki_knows_speed else None, cfg.r_loc, cfg.final_time
        )
    rec = run_scheme(
        cfg.scheme, ens, p, sched, cfg.n_steps, seed=seed, keep_rate=cfg.keep_rate, mg=cfg.mg,
        mg_factor=cfg.mg_factor, localization=loc, noise=cfg.leki_noise, l_min=inst.l_min,
        solution_error=inst.solution_error, trace=trace,
    )
    rec.config = cfg.to_dict()
    rec.config["seed"] = seed
    return rec


# -- metrics -------------------------------------------------------------------------


def relative_misfit(l_n: float, l_min: float, ynorm2: float) -> float:
    """``max(0, l_n - l_min) / ||y||^2``."""
    if not ynorm2 > 0:
        raise ValueError("||y||^2 must be positive")
    if l_n < l_min - 1e-10 * max(1.0, abs(l_min)):
        raise ValueError("loss below the reference minimum")
    return max(0.0, l_n - l_min) / ynorm2


def convergence_rate(e, m: int, n: int) -> float | None:
    """``(log e_m - log e_n) / (m - n)``; ``None`` when undefined."""
    e = np.asarray(e, dtype=float)
    if m == n or not (e[m] > 0 and e[n] > 0):
        return None
    return float((math.log(e[m]) - math.log(e[n])) / (m - n))


def fit_window(e, floor: float = 1e-12) -> tuple[int, int] | None:
    """First index below half the start value and last index above ``floor``."""
    e = np.asarray(e, dtype=float)
    below = np.flatnonzero(e < 0.5 * e[0])
    above = np.flatnonzero(e > floor)
    if below.size == 0 or above.size == 0:
        return None
    m, n = int(below[0]), int(above[-1])
    return (m, n) if n > m else None


def decay_rate(e) -> float:
    """Positive decay rate ``|r|`` over the fit window, NaN if undefined."""
    w = fit_window(e)
    if w is None:
        return float("nan")
    r = convergence_rate(e, *w)
    return float("nan") if r is None else abs(r)


def relative_solution_error(a_n, a_true, weights=None) -> float:
    """Relative L2 error on the grid (uniform quadrature unless ``weights``)."""
    a_n = np.asarray(a_n, dtype=float).ravel()
    a_true = np.asarray(a_true, dtype=float).ravel()
    w = np.ones_like(a_true) if weights is None else np.asarray(weights, dtype=float).ravel()
    den = math.sqrt(float(np.sum(w * a_true**2)))
    if den == 0:
        raise ValueError("true field is zero")
    return math.sqrt(float(np.sum(w * (a_n - a_true) ** 2))) / den


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares line; returns ``(slope, intercept, R^2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, icpt = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + icpt)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(slope), float(icpt), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


# -- repeats ---------------------------------------------------------------------------


@dataclass
class Aggregate:
    """Per-step statistics of ``e_n`` (and ``rel_error`` if present) over seeds."""

    seeds: list
    mean: np.ndarray
    std: np.ndarray
    rates: np.ndarray
    final: np.ndarray
    err_mean: np.ndarray | None = None
    err_std: np.ndarray | None = None
    final_err: np.ndarray | None = None
    failed: dict = field(default_factory=dict)
    records: list = field(default_factory=list, repr=False)

    @property
    def rate_mean(self) -> float:
        r = self.rates[np.isfinite(self.rates)]
        return float(r.mean()) if r.size else float("nan")

    @property
    def rate_std(self) -> float:
        r = self.rates[np.isfinite(self.rates)]
        return float(r.std()) if r.size else float("nan")


_WORKER_STATE: dict = {}


def _init_worker(cfg: ExperimentConfig) -> None:
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["shared"] = None if cfg.randomize_problem else build_problem(cfg)


def _worker_run(seed: int):
    try:
        return seed, run(_WORKER_STATE["cfg"], seed, _WORKER_STATE["shared"]), None
    except Exception as exc:  # recorded, not fatal
        return seed, None, str(exc)


def repeat(cfg: ExperimentConfig, n_rep: int | None = None, keep_records: bool = False,
           workers: int = 1) -> Aggregate:
    """Run seeds ``cfg.seed .. cfg.seed + n_rep - 1`` and aggregate.

    In fixed-data mode the problem is built once (per worker process) and
    shared; with ``randomize_problem`` each seed gets its own speed, truth
    and data. Every seed owns its random streams, so the result does not
    depend on ``workers``. Failing seeds are collected in ``failed``
    rather than aborting.
    """
    n_rep = cfg.n_rep if n_rep is None else n_rep
    if n_rep < 1:
        raise ValueError("need n_rep >= 1")
    if workers < 1:
        raise ValueError("need workers >= 1")
    seeds_in = range(cfg.seed, cfg.seed + n_rep)
    if workers == 1:
        _init_worker(cfg)
        results = [_worker_run(s) for s in seeds_in]
        _WORKER_STATE.clear()
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg,)) as ex:
            results = list(ex.map(_worker_run, seeds_in))
    series, errs, recs, seeds, failed = [], [], [], [], {}
    for seed, rec, exc in results:
        if rec is None:
            failed[seed] = exc
            continue
        seeds.append(seed)
        series.append(rec.series("e_n"))
        if "rel_error" in rec.initial:
            errs.append(rec.series("rel_error"))
        if keep_records:
            recs.append(rec)
    if not series:
        raise RuntimeError(f"all seeds failed: {failed}")
    e = np.array(series)
    agg = Aggregate(
        seeds=seeds,
        mean=e.mean(axis=0),
        std=e.std(axis=0),
        rates=np.array([decay_rate(s) for s in e]),
        final=e[:, -1],
        failed=failed,
        records=recs,
    )
    if errs:
        a = np.array(errs)
        agg.err_mean, agg.err_std, agg.final_err = a.mean(axis=0), a.std(axis=0), a[:, -1]
    return agg


# -- files -------------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_csv_text(rec: RunRecord) -> str:
    """CSV with a header, the initial state as step 0, then one row per step."""
    cols = list(COLUMNS) + (["rel_error"] if "rel_error" in rec.initial else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(cols)
    for row in [rec.initial] + rec.rows:
        w.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def sidecar(rec: RunRecord) -> dict:
    return {
        "scheme": rec.scheme,
        "seed": rec.seed,
        "n_steps": rec.n_steps,
        "l_min": rec.l_min,
        "ynorm2": rec.ynorm2,
        "config": rec.config,
        "config_hash": rec.config_hash(),
        "wall_time": rec.wall_time,
    }


def write_run(rec: RunRecord, outdir, stem: str | None = None) -> tuple[str, str]:
    """Write ``<stem>.csv`` and ``<stem>.json``; returns both paths."""
    os.makedirs(outdir, exist_ok=True)
    stem = stem or f"{rec.scheme}_seed{rec.seed}"
    csv_path = os.path.join(outdir, f"{stem}.csv")
    json_path = os.path.join(outdir, f"{stem}.json")
    _atomic_write(csv_path, run_csv_text(rec))
    _atomic_write(json_path, json.dumps(sidecar(rec), indent=2, sort_keys=True, default=_fmt))
    return csv_path, json_path


def read_run_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def aggregate_csv_text(agg: Aggregate) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    cols = ["step", "e_n_mean", "e_n_std"]
    if agg.err_mean is not None:
        cols += ["rel_error_mean", "rel_error_std"]
    w.writerow(cols)
    for k in range(len(agg.mean)):
        row = [k, agg.mean[k], agg.std[k]]
        if agg.err_mean is not None:
            row += [agg.err_mean[k], agg.err_std[k]]
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def write_aggregate(agg: Aggregate, cfg: ExperimentConfig, outdir, stem: str = "aggregate") -> tuple[str, str]:
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, f"{stem}.csv")
    json_path = os.path.join(outdir, f"{stem}.json")
    _atomic_write(csv_path, aggregate_csv_text(agg))
    summary = {
        "config": cfg.to_dict(),
        "seeds": agg.seeds,
        "failed": {str(k): v for k, v in agg.failed.items()},
        "rate_mean": agg.rate_mean,
        "rate_std": agg.rate_std,
        "rates": agg.rates.tolist(),
        "final_median": float(np.median(agg.final)),
    }
    _atomic_write(json_path, json.dumps(summary, indent=2, sort_keys=True))
    return csv_path, json_path
