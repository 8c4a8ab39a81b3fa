"""Rate scaling, convergence diagnostics and limit factorization checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .envmodel import EnvironmentModel
from .errors import ConfigurationError, DomainError, RegimeError
from .pathfn import SurvivalTable
from .spectral import RegimeReport, decompose

SIDES = ("rows-are-nu", "columns-are-v1", "free-rank1", "full-matrix")
_SIDE_ALIASES = {"rows-are-ν": "rows-are-nu"}
KP_STAR_TOL = 1e-10

# power of n in the rate for each regime; the geometric part is k_rate^n
_N_POWER = {
    "critical": -0.5,
    "strongly-subcritical": 0.0,
    "intermediately-subcritical": -0.5,
    "weakly-subcritical": -1.5,
}


@dataclass(frozen=True, eq=False)
class ScaledSequence:
    """a_n(i, j) = estimate(i, j, n) / r_n with propagated standard errors."""

    grid: np.ndarray
    a: np.ndarray
    stderr: np.ndarray
    regime: str
    k_rate: float

    @property
    def last(self) -> np.ndarray:
        return self.a[-1]


@dataclass(frozen=True)
class DriftReport:
    drift: float
    converged: bool
    rel_stderr: float
    window: int
    threshold: float
    noise_sigmas: float


@dataclass(frozen=True, eq=False)
class FactorizationVerdict:
    residual: float
    u: np.ndarray
    side: str

    def to_dict(self) -> dict:
        return {"side": self.side, "residual": self.residual, "u": self.u.tolist()}


def log_rate(regime: str, n, k_rate: float) -> np.ndarray:
    """log r_n for the regime's survival rate."""
    if regime not in _N_POWER:
        raise RegimeError(f"no survival rate for regime {regime!r}")
    n = np.asarray(n, dtype=float)
    return n * np.log(k_rate) + _N_POWER[regime] * np.log(n)


def _as_tables(estimates) -> list[SurvivalTable]:
    if isinstance(estimates, Mapping):
        tables = [estimates[n] for n in sorted(estimates)]
    else:
        tables = sorted(estimates, key=lambda t: t.n)
    return tables


def scaled_sequence(
    estimates: Mapping[int, SurvivalTable] | Sequence[SurvivalTable],
    report: RegimeReport,
    k_rate: float | None = None,
) -> ScaledSequence:
    """Divide each estimate by the regime rate r_n, working in log space.

    ``k_rate`` overrides the report's geometric rate; it exists for negative
    controls, where a wrong rate must show up as geometric drift.
    """
    tables = _as_tables(estimates)
    if len(tables) < 4:
        raise ConfigurationError("scaled sequence needs at least 4 grid points")
    for t in tables:
        tagged = t.meta.get("regime")
        if tagged is not None and tagged != report.regime:
            raise ConfigurationError(
                f"estimates were produced for {tagged!r}, report says {report.regime!r}"
            )
    if report.regime == "weakly-subcritical":
        if report.kp_star is None or abs(report.kp_star) > KP_STAR_TOL:
            raise ConfigurationError(f"|K'(lambda*)| = {report.kp_star} exceeds {KP_STAR_TOL}")
    rate = report.k_rate if k_rate is None else float(k_rate)
    grid = np.array([t.n for t in tables], dtype=np.int64)
    lr = log_rate(report.regime, grid, rate)[:, None, None]
    values = np.stack([t.values for t in tables])
    errs = np.stack([np.zeros_like(t.values) if t.stderr is None else t.stderr for t in tables])
    with np.errstate(divide="ignore"):
        a = np.sign(values) * np.exp(np.log(np.abs(values)) - lr)
        se = np.exp(np.log(errs) - lr)
    return ScaledSequence(grid, a, se, report.regime, rate)


def convergence_diagnostic(
    seq: ScaledSequence,
    window: int,
    threshold: float = 0.05,
    noise_sigmas: float = 0.0,
) -> DriftReport:
    """Worst relative change of a_n over the last ``window`` points, against a_{n_G}.

    With ``noise_sigmas = z > 0`` each difference is first reduced by z times
    its combined standard error, so only drift beyond sampling noise counts.
    """
    G = seq.grid.size
    if not 1 <= window <= G:
        raise ConfigurationError(f"window must lie in [1, {G}]")
    aG, sG = seq.a[-1], seq.stderr[-1]
    drift = 0.0
    for g in range(G - window, G - 1):
        gap = np.abs(seq.a[g] - aG) - noise_sigmas * np.hypot(seq.stderr[g], sG)
        drift = max(drift, float(np.max(np.maximum(gap, 0.0) / (np.abs(aG) + sG))))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = sG / np.abs(aG)
    rel_se = float(np.max(np.where(np.isfinite(rel), rel, np.inf)))
    converged = drift <= threshold and rel_se <= threshold
    return DriftReport(drift, bool(converged), rel_se, window, threshold, noise_sigmas)


def _rank_one(L: np.ndarray, tol: float = 1e-15, max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    # alternating least squares for L ~ a b^T
    a = L.mean(axis=1)
    b = L.T @ a / (a @ a)
    for _ in range(max_iter):
        a_new = L @ b / (b @ b)
        b_new = L.T @ a_new / (a_new @ a_new)
        done = np.linalg.norm(np.outer(a_new, b_new) - np.outer(a, b)) <= tol * np.linalg.norm(L)
        a, b = a_new, b_new
        if done:
            break
    return a, b


def factorization_check(
    L: np.ndarray, side: str, reference: np.ndarray | None = None
) -> FactorizationVerdict:
    """Relative Frobenius distance of L from the prescribed rank-1 form."""
    L = np.asarray(L, dtype=float)
    side = _SIDE_ALIASES.get(side, side)
    if side not in SIDES:
        raise ConfigurationError(f"unknown side {side!r}; expected one of {SIDES}")
    if np.any(~np.isfinite(L)) or np.any(L <= 0):
        raise DomainError("limit grid must be entrywise positive")
    if side == "full-matrix":
        return FactorizationVerdict(0.0, L.copy(), side)
    if side == "free-rank1":
        a, b = _rank_one(L)
        fit, u = np.outer(a, b), np.concatenate([a, b])
    else:
        if reference is None:
            raise ConfigurationError(f"side {side!r} needs a reference vector")
        ref = np.asarray(reference, dtype=float)
        if side == "rows-are-nu":
            u = np.mean(L / ref[None, :], axis=1)
            fit = np.outer(u, ref)
        else:
            u = np.mean(L / ref[:, None], axis=0)
            fit = np.outer(ref, u)
    residual = float(np.linalg.norm(L - fit) / np.linalg.norm(L))
    return FactorizationVerdict(residual, u, side)


def verdict_json(
    seq: ScaledSequence, drift: DriftReport, factorization: FactorizationVerdict | None
) -> dict:
    return {
        "regime": seq.regime,
        "grid": seq.grid.tolist(),
        "a_n": seq.a.tolist(),
        "a_n_stderr": seq.stderr.tolist(),
        "drift": drift.drift,
        "rel_stderr": drift.rel_stderr,
        "converged": drift.converged,
        "factorization": None if factorization is None else factorization.to_dict(),
    }


# ---------------------------------------------------------------------------
# end-to-end theorem checks
# ---------------------------------------------------------------------------


def dyadic(first: int, last: int) -> list[int]:
    out = []
    n = first
    while n <= last:
        out.append(n)
        n *= 2
    return out


@dataclass(frozen=True)
class TheoremPlan:
    regime: str
    estimator: str
    samples: int
    gens: tuple[int, ...]
    side: str | None
    threshold: float
    residual_threshold: float
    window: int = 3
    noise_sigmas: float = 3.0
    control_shift: float | None = None


PLANS = {
    "critical": TheoremPlan(
        "critical", "env", 10**6, tuple(dyadic(64, 4096)), "rows-are-nu", 0.05, 0.05
    ),
    "strongly-subcritical": TheoremPlan(
        "strongly-subcritical", "tilted", 10**5, tuple(dyadic(16, 128)), "columns-are-v1", 0.05, 0.05
    ),
    "intermediately-subcritical": TheoremPlan(
        "intermediately-subcritical", "tilted", 10**6, tuple(dyadic(64, 2048)), "columns-are-v1", 0.10, 0.10
    ),
    "weakly-subcritical": TheoremPlan(
        "weakly-subcritical", "tilted", 10**6, tuple(dyadic(64, 2048)), "full-matrix", 0.10, 0.10,
        control_shift=0.1,
    ),
}


@dataclass
class TheoremResult:
    sequence: ScaledSequence
    drift: DriftReport
    factorization: FactorizationVerdict | None
    passed: bool
    control: DriftReport | None = None
    lam: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = verdict_json(self.sequence, self.drift, self.factorization)
        out["lambda"] = self.lam
        out["passed"] = self.passed
        if self.control is not None:
            out["negative_control"] = {
                "drift": self.control.drift,
                "converged": self.control.converged,
                "lambda": self.extra.get("control_lambda"),
            }
        return out


def verify_theorem(
    model: EnvironmentModel,
    report: RegimeReport,
    seed: int,
    plan: TheoremPlan | None = None,
    workers: int = 1,
) -> TheoremResult:
    """Estimate along the plan's grid, scale by the regime rate and judge the limit."""
    from .simulate import estimate_survival

    plan = plan or PLANS.get(report.regime)
    if plan is None:
        raise RegimeError(f"no survival theorem to verify for regime {report.regime!r}")
    if plan.regime != report.regime:
        raise ConfigurationError(f"plan is for {plan.regime!r}, model is {report.regime!r}")
    lam = {"critical": 0.0, "weakly-subcritical": report.lambda_star}.get(report.regime, 1.0)

    def run(lam_run: float):
        tables = estimate_survival(
            model, plan.gens, plan.samples, seed, plan.estimator, lam=lam_run, workers=workers
        )
        for t in tables.values():
            t.meta["regime"] = report.regime
        return tables

    seq = scaled_sequence(run(lam), report)
    drift = convergence_diagnostic(seq, plan.window, plan.threshold, plan.noise_sigmas)
    fact = None
    if plan.side is not None:
        ref = None
        if plan.side == "rows-are-nu":
            ref = decompose(model, 0.0).nu
        elif plan.side == "columns-are-v1":
            ref = decompose(model, 1.0).v
        fact = factorization_check(seq.last, plan.side, ref)
    passed = drift.converged and (fact is None or fact.residual <= plan.residual_threshold)
    control = None
    extra = {}
    if plan.control_shift is not None:
        lam_c = lam + plan.control_shift
        k_c = decompose(model, lam_c).k
        control_seq = scaled_sequence(run(lam_c), report, k_rate=k_c)
        control = convergence_diagnostic(control_seq, plan.window, plan.threshold, plan.noise_sigmas)
        extra["control_lambda"] = lam_c
        # the control must be rejected for the main verdict to count
        passed = passed and not control.converged
    return TheoremResult(seq, drift, fact, passed, control, float(lam), extra)
