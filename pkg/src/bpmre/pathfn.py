"""Exact per-path functionals and exact survival oracles.

Compositions of pgfs are carried in complement form, ``t = 1 - s``, using
``OffspringLaw.one_minus_pgf``.  This keeps full relative precision for the
conditional survival probability ``q_n = 1 - f_{X_1} o ... o f_{X_n}(0)``
even when it is far below machine epsilon.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .envmodel import EnvironmentModel, OffspringLaw
from .errors import DomainError, NumericalError, SizeError

G_SWITCH = 1e-6
G_LIMIT = 1e-9
ENUM_LIMIT = 10**7
MASS_TOL = 1e-12

KINDS = ("exact-enum", "dp-lower", "dp-upper", "mc")


@dataclass(frozen=True, eq=False)
class EnvPath:
    start: int
    steps: np.ndarray
    partial_sums: np.ndarray

    def __len__(self) -> int:
        return len(self.steps)


def make_path(rho: np.ndarray, start: int, steps: Sequence[int]) -> EnvPath:
    steps = np.asarray(steps, dtype=np.int64)
    sums = np.concatenate(([0.0], np.cumsum(np.asarray(rho)[steps])))
    return EnvPath(int(start), steps, sums)


@dataclass(eq=False)
class SurvivalTable:
    """Grid of P_i(Z_n > 0, X_n = j) values (exact, bounds or estimates)."""

    n: int
    values: np.ndarray
    kind: str
    stderr: np.ndarray | None = None
    n_samples: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown table kind {self.kind!r}")

    def estimate(self, i: int, j: int):
        from .simulate import SurvivalEstimate

        se = 0.0 if self.stderr is None else float(self.stderr[i, j])
        return SurvivalEstimate(
            mean=float(self.values[i, j]),
            stderr=se,
            n_samples=self.n_samples or 0,
            estimator=self.meta.get("estimator", self.kind),
        )


# ---------------------------------------------------------------------------
# g and the Agresti representation
# ---------------------------------------------------------------------------


def g_complement(law: OffspringLaw, t):
    """g evaluated at s = 1 - t."""
    scalar = np.ndim(t) == 0
    if scalar and float(t) > G_SWITCH:
        t = float(t)
        return float(1.0 / law.one_minus_pgf(t) - 1.0 / (law.mean * t))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    m = law.mean
    limit = law.second_factorial / (2.0 * m * m)
    out = np.full(t.shape, limit)
    big = t > G_SWITCH
    if np.any(big):
        tb = t[big]
        out[big] = 1.0 / law.one_minus_pgf(tb) - 1.0 / (m * tb)
    mid = (t >= G_LIMIT) & ~big
    if np.any(mid):
        # second-order expansion of f at 1 gives g to first order in t
        a = law.second_factorial / (2.0 * m)
        b = law.third_factorial / (6.0 * m)
        out[mid] = (a + (a * a - b) * t[mid]) / m
    return float(out[0]) if scalar else out


def g_eval(law: OffspringLaw, s):
    """g(s) = 1/(1 - f(s)) - 1/(f'(1)(1 - s)), continuous at s = 1."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise DomainError("g_eval needs s in [0, 1]")
    return g_complement(law, 1.0 - s)


def eta_bound(laws: Sequence[OffspringLaw]) -> float:
    return max(law.second_factorial / law.mean**2 for law in laws)


def _check_eta(eta: np.ndarray, laws: Sequence[OffspringLaw]) -> None:
    bound = eta_bound(laws)
    slack = 1e-12 * max(1.0, bound)
    if np.any(eta < -slack) or np.any(eta > bound + slack):
        raise NumericalError(f"eta term outside [0, {bound}]: {eta.min()}, {eta.max()}")


def compose_complement(laws: Sequence[OffspringLaw], t: float) -> np.ndarray:
    """w[k] = 1 - f_{k} o ... o f_{n}(1 - t) for k = 1..n+1 (w[n+1] = t)."""
    n = len(laws)
    w = np.empty(n + 2)
    w[n + 1] = t
    for k in range(n, 0, -1):
        w[k] = laws[k - 1].one_minus_pgf(w[k + 1])
    w[0] = np.nan
    return w


def q_along_path(laws: Sequence[OffspringLaw], s: float = 0.0) -> tuple[float, float]:
    """q_n(s) by direct composition and by the Agresti sum.

    ``laws`` are the offspring laws of X_1..X_n.  Every eta term is checked
    against the uniform bound max f''(1)/f'(1)^2.
    """
    if not 0.0 <= s < 1.0:
        raise DomainError("q_n(s) is defined for s in [0, 1)")
    n = len(laws)
    if n == 0:
        raise DomainError("path must have at least one step")
    t = 1.0 - s
    w = compose_complement(laws, t)
    q_direct = float(w[1])

    rho = np.log([law.mean for law in laws])
    S = np.concatenate(([0.0], np.cumsum(rho)))
    # eta_{k+1,n}(s) = g_{X_{k+1}}(f_{k+2,n}(s)), k = 0..n-1
    eta = np.array([g_complement(laws[k], w[k + 2]) for k in range(n)])
    _check_eta(eta, laws)
    with np.errstate(divide="ignore"):
        logs = np.concatenate(([-S[n] - np.log(t)], -S[:n] + np.log(eta)))
    q_rec = float(np.exp(-logsumexp(logs)))
    return q_direct, q_rec


def q_dual_along_path(
    dual_laws: Sequence[OffspringLaw], boundary_law: OffspringLaw
) -> tuple[float, float]:
    """q*_m(j) along a dual path X*_1..X*_m with boundary state j.

    Returns ``(direct, recursive)``: ``exp(S*_m) (1 - f_{X*_m} o ... o f_j(0))``
    and ``[1/(1 - f_j(0)) + sum_k exp(-S*_k) eta*_k(j)]^-1``.
    """
    t = float(boundary_law.one_minus_pgf(1.0))
    logs = [-np.log(t)]
    S = 0.0
    eta = []
    for law in dual_laws:
        e = float(g_complement(law, t))
        eta.append(e)
        t = float(law.one_minus_pgf(t))
        S -= np.log(law.mean)
        logs.append(-S + np.log(e) if e > 0 else -np.inf)
    if dual_laws:
        _check_eta(np.array(eta), dual_laws)
    direct = float(np.exp(S) * t)
    recursive = float(np.exp(-logsumexp(logs)))
    return direct, recursive


def exit_time(path: EnvPath, y: float) -> int | None:
    """First k >= 1 with y + S_k <= 0; None if the path stays positive."""
    hits = np.nonzero(y + path.partial_sums[1:] <= 0)[0]
    return int(hits[0]) + 1 if hits.size else None


# ---------------------------------------------------------------------------
# Exact oracles
# ---------------------------------------------------------------------------


def enumerate_paths(P: np.ndarray, start: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """All paths X_1..X_n from ``start`` with their probabilities."""
    P = np.asarray(P, dtype=float)
    d = P.shape[0]
    if d**n > ENUM_LIMIT:
        raise SizeError(f"{d}^{n} paths exceed the enumeration limit")
    paths = np.array(list(itertools.product(range(d), repeat=n)), dtype=np.int64).reshape(-1, n)
    prev = np.concatenate((np.full((paths.shape[0], 1), start), paths[:, :-1]), axis=1)
    probs = np.prod(P[prev, paths], axis=1) if n else np.ones(1)
    return paths, probs


def enumerate_survival(model: EnvironmentModel, n: int) -> SurvivalTable:
    """Exact P_i(Z_n > 0, X_n = j) = E_i[q_n; X_n = j] over all environment paths.

    Suffix compositions are shared: suffixes of length L+1 are built from
    those of length L by prepending one state.
    """
    d = model.d
    if n == 0:
        return SurvivalTable(0, np.eye(d), "exact-enum")
    if d**n > ENUM_LIMIT:
        raise SizeError(
            f"{d}^{n} paths exceed {ENUM_LIMIT}; use dp_survival_bounds instead"
        )
    P = model.P
    states = np.arange(d)
    first = states.copy()
    last = states.copy()
    weight = np.ones(d)
    t = np.array([float(model.laws[x].one_minus_pgf(1.0)) for x in states])
    for _ in range(n - 1):
        parts = []
        for x in states:
            w = P[x, first] * weight
            keep = w > 0
            parts.append(
                (
                    np.full(keep.sum(), x),
                    last[keep],
                    w[keep],
                    model.laws[x].one_minus_pgf(t[keep]),
                )
            )
        first, last, weight, t = (np.concatenate(c) for c in zip(*parts))
    values = np.zeros((d, d))
    for i in states:
        contrib = P[i, first] * weight * t
        values[i] = np.bincount(last, weights=contrib, minlength=d)
    return SurvivalTable(n, values, "exact-enum")


def _convolution_powers(law: OffspringLaw, M: int) -> tuple[np.ndarray, np.ndarray]:
    """T[z, z'] = P(sum of z offspring = z'), z, z' <= M; plus overflow mass."""
    p = law.pmf(M)
    T = np.zeros((M + 1, M + 1))
    T[0, 0] = 1.0
    for z in range(1, M + 1):
        T[z] = np.convolve(T[z - 1], p)[: M + 1]
    overflow = np.clip(1.0 - T.sum(axis=1), 0.0, None)
    return T, overflow


def dp_survival_bounds(
    model: EnvironmentModel, n: int, M: int
) -> tuple[SurvivalTable, SurvivalTable]:
    """Bracket P_i(Z_n > 0, X_n = j) by evolving (X_k, Z_k) with Z capped at M.

    Mass that ever exceeds M goes to an absorbing overflow bucket; the upper
    bound counts it as alive and the lower bound discards it.
    """
    if M < 1:
        raise ValueError("population cap M must be >= 1")
    d = model.d
    powers = [_convolution_powers(law, M) for law in model.laws]
    mass = np.zeros((d, d, M + 1))
    mass[np.arange(d), np.arange(d), 1] = 1.0
    over = np.zeros((d, d))
    for _ in range(n):
        mixed = np.einsum("axz,xy->ayz", mass, model.P)
        over = over @ model.P
        new = np.empty_like(mass)
        for y, (T, ov) in enumerate(powers):
            new[:, y, :] = mixed[:, y, :] @ T
            over[:, y] += mixed[:, y, :] @ ov
        mass = new
        total = mass.sum(axis=(1, 2)) + over.sum(axis=1)
        if np.max(np.abs(total - 1.0)) > MASS_TOL:
            raise NumericalError(f"DP mass drifted to {total}")
    lower = mass[:, :, 1:].sum(axis=2)
    upper = lower + over
    meta = {"M": M}
    return (
        SurvivalTable(n, lower, "dp-lower", meta=dict(meta)),
        SurvivalTable(n, upper, "dp-upper", meta=dict(meta)),
    )
