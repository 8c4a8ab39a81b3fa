"""Environment chain, offspring laws and regime calibration.

An :class:`EnvironmentModel` is a finite row-stochastic matrix ``P`` together
with one :class:`OffspringLaw` per state.  The associated walk has increments
``rho(i) = log f_i'(1)``.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Any, Sequence

import networkx as nx
import numpy as np
from scipy import optimize, stats

from .errors import (
    ConsistencyError,
    InfeasibleTargetError,
    MomentError,
    StructuralError,
    UnsupportedRescaleError,
)

PMF_TOL = 1e-12
ROW_TOL = 1e-12


# ---------------------------------------------------------------------------
# Offspring laws
# ---------------------------------------------------------------------------


class OffspringLaw(ABC):
    """Offspring distribution of one individual, described by its pgf."""

    kind: str

    @abstractmethod
    def pgf(self, s): ...

    @abstractmethod
    def one_minus_pgf(self, t):
        """Return ``1 - f(1 - t)`` without cancellation for small ``t``."""

    @property
    @abstractmethod
    def mean(self) -> float: ...

    @property
    @abstractmethod
    def second_factorial(self) -> float:
        """f''(1) = E[xi (xi - 1)]."""

    @property
    @abstractmethod
    def third_factorial(self) -> float:
        """f'''(1) = E[xi (xi - 1) (xi - 2)]."""

    @abstractmethod
    def pmf(self, upto: int) -> np.ndarray:
        """Probabilities of 0..upto (the tail beyond ``upto`` is omitted)."""

    @abstractmethod
    def sample(self, rng: np.random.Generator, size) -> np.ndarray: ...

    @abstractmethod
    def sample_sum(self, rng: np.random.Generator, counts) -> np.ndarray:
        """Total offspring of ``counts`` independent parents (vectorised)."""

    @abstractmethod
    def with_mean(self, mean: float) -> "OffspringLaw": ...

    @abstractmethod
    def params(self) -> dict[str, Any]: ...

    @property
    def g_constant(self) -> float | None:
        """Constant value of ``g`` for linear-fractional laws, else None."""
        return None

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": self.params()}


@dataclass(frozen=True)
class GeometricLaw(OffspringLaw):
    """P(xi = k) = (1 - r) r^k, pgf (1 - r) / (1 - r s)."""

    r: float
    kind: str = field(default="geometric", init=False)

    def __post_init__(self):
        if not 0.0 <= self.r < 1.0:
            raise ValueError(f"geometric parameter r must lie in [0, 1), got {self.r}")

    @classmethod
    def from_mean(cls, mean: float) -> "GeometricLaw":
        return cls(mean / (1.0 + mean))

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        return (1.0 - self.r) / (1.0 - self.r * s)

    def one_minus_pgf(self, t):
        t = np.asarray(t, dtype=float)
        return self.r * t / (1.0 - self.r + self.r * t)

    @property
    def mean(self) -> float:
        return self.r / (1.0 - self.r)

    @property
    def second_factorial(self) -> float:
        return 2.0 * self.r**2 / (1.0 - self.r) ** 2

    @property
    def third_factorial(self) -> float:
        return 6.0 * self.r**3 / (1.0 - self.r) ** 3

    @property
    def g_constant(self) -> float | None:
        # 1/(1-f(s)) = 1/(m(1-s)) + 1 for every s
        return 1.0 if self.r > 0 else None

    def pmf(self, upto: int) -> np.ndarray:
        k = np.arange(upto + 1)
        return (1.0 - self.r) * self.r**k

    def sample(self, rng, size):
        return rng.geometric(1.0 - self.r, size=size) - 1

    def sample_sum(self, rng, counts):
        counts = np.asarray(counts, dtype=np.int64)
        out = np.zeros(counts.shape, dtype=np.int64)
        alive = counts > 0
        if self.r > 0 and alive.any():
            out[alive] = rng.negative_binomial(counts[alive], 1.0 - self.r)
        return out

    def with_mean(self, mean: float) -> "GeometricLaw":
        return GeometricLaw.from_mean(mean)

    def params(self) -> dict[str, Any]:
        return {"r": self.r}


class _FiniteSupportLaw(OffspringLaw):
    """Shared machinery for laws with finitely many atoms."""

    probs: np.ndarray

    def _check_probs(self, probs: np.ndarray) -> None:
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("pmf must be a non-empty vector")
        if np.any(probs < 0):
            raise ValueError("pmf has negative entries")
        if abs(probs.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"pmf sums to {probs.sum()!r}, not 1")

    def pgf(self, s):
        s = np.asarray(s, dtype=float)
        return np.polynomial.polynomial.polyval(s, self.probs)

    @cached_property
    def _powers(self) -> np.ndarray:
        return np.arange(1, self.probs.size, dtype=float)

    def one_minus_pgf(self, t):
        # 1 - f(1 - t) = sum_k p_k (1 - (1 - t)^k), no cancellation near t = 0
        if np.ndim(t) == 0 and 0.0 <= t < 1.0:
            return float(-np.expm1(math.log1p(-float(t)) * self._powers) @ self.probs[1:])
        t = np.asarray(t, dtype=float)
        k = self._powers
        with np.errstate(divide="ignore"):
            log1 = np.log1p(-t)
        terms = -np.expm1(np.multiply.outer(log1, k))
        return terms @ self.probs[1:]

    def _factorial(self, order: int) -> float:
        k = np.arange(self.probs.size, dtype=float)
        fall = np.ones_like(k)
        for j in range(order):
            fall *= k - j
        return float(fall @ self.probs)

    @cached_property
    def mean(self) -> float:
        return self._factorial(1)

    @cached_property
    def second_factorial(self) -> float:
        return self._factorial(2)

    @cached_property
    def third_factorial(self) -> float:
        return self._factorial(3)

    def pmf(self, upto: int) -> np.ndarray:
        out = np.zeros(upto + 1)
        m = min(upto + 1, self.probs.size)
        out[:m] = self.probs[:m]
        return out

    def sample(self, rng, size):
        return rng.choice(self.probs.size, p=self.probs, size=size)

    def sample_sum(self, rng, counts):
        counts = np.asarray(counts, dtype=np.int64)
        draws = rng.multinomial(counts.ravel(), self.probs)
        return (draws @ np.arange(self.probs.size)).reshape(counts.shape)


class TruncatedPoissonLaw(_FiniteSupportLaw):
    """Poisson(m) with the mass above ``cutoff`` folded into the atom ``cutoff``."""

    kind = "poisson-truncated"

    def __init__(self, m: float, cutoff: int):
        if m <= 0 or cutoff < 1:
            raise ValueError("poisson-truncated needs m > 0 and cutoff >= 1")
        self.m = float(m)
        self.cutoff = int(cutoff)
        k = np.arange(cutoff)
        probs = np.empty(cutoff + 1)
        probs[:-1] = stats.poisson.pmf(k, m)
        probs[-1] = stats.poisson.sf(cutoff - 1, m)
        self.probs = probs
        self.probs.setflags(write=False)
        self._check_probs(self.probs)

    def __repr__(self):
        return f"TruncatedPoissonLaw(m={self.m!r}, cutoff={self.cutoff})"

    def __eq__(self, other):
        return (
            isinstance(other, TruncatedPoissonLaw)
            and self.m == other.m
            and self.cutoff == other.cutoff
        )

    def __hash__(self):
        return hash((self.kind, self.m, self.cutoff))

    def with_mean(self, mean: float) -> "TruncatedPoissonLaw":
        if not 0 < mean < self.cutoff:
            raise UnsupportedRescaleError(
                f"mean {mean} unreachable with cutoff {self.cutoff}"
            )
        m = optimize.brentq(
            lambda x: TruncatedPoissonLaw(x, self.cutoff).mean - mean,
            1e-12,
            10.0 * self.cutoff,
            xtol=1e-15,
            rtol=4 * np.finfo(float).eps,
        )
        return TruncatedPoissonLaw(m, self.cutoff)

    def params(self) -> dict[str, Any]:
        return {"m": self.m, "cutoff": self.cutoff}


class FinitePmfLaw(_FiniteSupportLaw):
    kind = "finite-pmf"

    def __init__(self, p: Sequence[float]):
        self.probs = np.array(p, dtype=float)
        self.probs.setflags(write=False)
        self._check_probs(self.probs)

    def __repr__(self):
        return f"FinitePmfLaw(p={self.probs.tolist()!r})"

    def __eq__(self, other):
        return isinstance(other, FinitePmfLaw) and np.array_equal(self.probs, other.probs)

    def __hash__(self):
        return hash((self.kind, self.probs.tobytes()))

    def with_mean(self, mean: float) -> "FinitePmfLaw":
        raise UnsupportedRescaleError(
            "finite-pmf laws have no canonical mean-rescaled family"
        )

    def params(self) -> dict[str, Any]:
        return {"p": self.probs.tolist()}


def law_from_dict(spec: dict[str, Any]) -> OffspringLaw:
    """Build a law from ``{"kind": ..., "params": {...}}``."""
    kind = spec.get("kind")
    params = spec.get("params", {})
    if kind == "geometric":
        if "r" in params:
            return GeometricLaw(float(params["r"]))
        if "mean" in params:
            return GeometricLaw.from_mean(float(params["mean"]))
        raise ValueError("geometric law needs 'r' or 'mean'")
    if kind == "poisson-truncated":
        return TruncatedPoissonLaw(float(params["m"]), int(params["cutoff"]))
    if kind == "finite-pmf":
        return FinitePmfLaw(params["p"])
    raise ValueError(f"unknown offspring kind {kind!r}")


# ---------------------------------------------------------------------------
# Environment model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnvironmentModel:
    states: tuple[str, ...]
    P: np.ndarray
    laws: tuple[OffspringLaw, ...]

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
            raise StructuralError(f"transition matrix must be square, got shape {P.shape}")
        d = P.shape[0]
        if len(self.states) != d:
            raise StructuralError(f"{len(self.states)} state labels for a {d}x{d} matrix")
        if len(self.laws) != d:
            raise StructuralError(f"{len(self.laws)} offspring laws for {d} states")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "states", tuple(str(s) for s in self.states))
        object.__setattr__(self, "laws", tuple(self.laws))
        means = np.array([law.mean for law in self.laws])
        with np.errstate(divide="ignore"):
            rho = np.log(means)
        rho.setflags(write=False)
        object.__setattr__(self, "_rho", rho)

    @property
    def d(self) -> int:
        return self.P.shape[0]

    @property
    def rho(self) -> np.ndarray:
        return self._rho

    @property
    def means(self) -> np.ndarray:
        return np.array([law.mean for law in self.laws])

    def to_dict(self) -> dict[str, Any]:
        return {
            "states": list(self.states),
            "transition": self.P.tolist(),
            "offspring": [law.to_dict() for law in self.laws],
        }


@dataclass(frozen=True)
class LatticeDiagnostic:
    is_suspect_lattice: bool
    span_estimate: float
    cycles_examined: int
    theta: float = 0.0


@dataclass(frozen=True)
class ValidationReport:
    stochastic_ok: bool
    primitive_ok: bool
    k0: int | None
    moments_ok: bool
    lattice: LatticeDiagnostic

    @property
    def ok(self) -> bool:
        return self.stochastic_ok and self.primitive_ok and self.moments_ok


def check_stochastic(P: np.ndarray) -> None:
    P = np.asarray(P, dtype=float)
    for i, row in enumerate(P):
        if np.any(row < 0) or not np.all(np.isfinite(row)):
            raise StructuralError(f"row {i} has negative or non-finite entries")
        if abs(row.sum() - 1.0) > ROW_TOL:
            raise StructuralError(f"row {i} sums to {row.sum()!r}, not 1")


def primitivity_exponent(P: np.ndarray) -> int | None:
    """Smallest k with P^k > 0 entrywise, searched up to Wielandt's bound."""
    B = (np.asarray(P) > 0).astype(np.int64)
    d = B.shape[0]
    Bk = B.copy()
    for k in range(1, (d - 1) ** 2 + 2):
        if Bk.all():
            return k
        Bk = ((Bk @ B) > 0).astype(np.int64)
    return None


def stationary(P: np.ndarray) -> np.ndarray:
    """Invariant probability of a primitive kernel (Grassmann-Taksar-Heyman)."""
    P = np.asarray(P, dtype=float)
    if primitivity_exponent(P) is None:
        raise StructuralError("kernel is not primitive; run validate_model first")
    A = P.copy()
    d = A.shape[0]
    for k in range(d - 1, 0, -1):
        s = A[k, :k].sum()
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(d)
    pi[0] = 1.0
    for k in range(1, d):
        pi[k] = pi[:k] @ A[:k, k]
    pi /= pi.sum()
    return pi


def dual_kernel(P: np.ndarray, nu: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Time reversal P*(i, j) = nu(j) P(j, i) / nu(i)."""
    P = np.asarray(P, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(nu <= 0):
        raise ConsistencyError("dual kernel needs a positive invariant measure")
    residual = np.max(np.abs(nu @ P - nu))
    if residual > tol:
        raise ConsistencyError(f"nu is not stationary for P (residual {residual:.2e})")
    return nu[None, :] * P.T / nu[:, None]


# -- lattice diagnostic ------------------------------------------------------


def _real_gcd(values: Sequence[float], tol: float, max_den: int) -> float | None:
    """Largest a > 0 with every value in aZ (at tolerance), or None."""
    vals = [v for v in values if abs(v) > tol]
    if not vals:
        return None
    base = min(vals, key=abs)
    fracs = []
    for v in vals:
        r = v / base
        fr = Fraction(r).limit_denominator(max_den)
        if abs(r - float(fr)) > tol * max(1.0, abs(r)):
            return None
        fracs.append(fr)
    den = math.lcm(*(f.denominator for f in fracs))
    num = math.gcd(*(int(f * den) for f in fracs))
    return abs(base) * num / den


def lattice_diagnostic(
    model: EnvironmentModel, tol: float = 1e-9, max_den: int = 1000, max_cycles: int = 100_000
) -> LatticeDiagnostic:
    """Look for (theta, a) with every cycle sum minus length*theta in aZ.

    Simple cycles of length <= d are enumerated.  The raw cycle sums are
    tested first (theta = 0); then theta is eliminated against a reference
    cycle, which is the form the non-lattice condition actually takes.
    Advisory only.
    """
    G = nx.DiGraph()
    d = model.d
    G.add_nodes_from(range(d))
    G.add_edges_from((i, j) for i in range(d) for j in range(d) if model.P[i, j] > 0)
    sums, lengths = [], []
    for cyc in nx.simple_cycles(G, length_bound=d):
        sums.append(float(sum(model.rho[x] for x in cyc)))
        lengths.append(len(cyc))
        if len(sums) >= max_cycles:
            break
    n_cyc = len(sums)
    if n_cyc == 0:
        return LatticeDiagnostic(False, 0.0, 0)

    span = _real_gcd(sums, tol, max_den)
    if span is not None:
        return LatticeDiagnostic(True, span, n_cyc, theta=span)
    if all(abs(s) <= tol for s in sums):
        return LatticeDiagnostic(True, 0.0, n_cyc, theta=0.0)

    ref = int(np.argmin(lengths))
    s0, l0 = sums[ref], lengths[ref]
    eliminated = [l0 * s - l * s0 for s, l in zip(sums, lengths)]
    theta = s0 / l0
    if all(abs(t) <= tol for t in eliminated):
        return LatticeDiagnostic(True, 0.0, n_cyc, theta=theta)
    b = _real_gcd(eliminated, tol, max_den)
    if b is not None:
        return LatticeDiagnostic(True, b / l0, n_cyc, theta=theta)
    return LatticeDiagnostic(False, 0.0, n_cyc)


def validate_model(model: EnvironmentModel, lattice_tol: float = 1e-9) -> ValidationReport:
    check_stochastic(model.P)
    for label, law in zip(model.states, model.laws):
        if not law.mean > 0:
            raise MomentError(f"offspring law of state {label!r} has zero mean")
        if not np.isfinite(law.second_factorial):
            raise MomentError(f"offspring law of state {label!r} has infinite variance")
    k0 = primitivity_exponent(model.P)
    return ValidationReport(
        stochastic_ok=True,
        primitive_ok=k0 is not None,
        k0=k0,
        moments_ok=True,
        lattice=lattice_diagnostic(model, lattice_tol),
    )


# -- regime tuning -----------------------------------------------------------


def shift_means(model: EnvironmentModel, c: float) -> EnvironmentModel:
    """Multiply every offspring mean by exp(-c), i.e. rho -> rho - c."""
    if c == 0:
        return model
    laws = tuple(law.with_mean(law.mean * math.exp(-c)) for law in model.laws)
    return EnvironmentModel(model.states, model.P, laws)


CALIBRATION_TARGETS = ("critical", "intermediate", "weak", "strong")


def calibrate(
    model: EnvironmentModel, target: str, param: float | None = None, tol: float = 1e-12
) -> tuple[EnvironmentModel, float]:
    """Shift the offspring means so that the model lands in ``target``.

    ``param`` is the margin for ``strong`` and the optional critical tilt for
    ``weak`` (default: midpoint of K'(0) and K'(1)).
    """
    from .spectral import K_derivatives

    kp0 = K_derivatives(model, 0.0)[1]
    kp1 = K_derivatives(model, 1.0)[1]
    if target == "critical":
        c = kp0
    elif target == "intermediate":
        c = kp1
    elif target == "strong":
        if param is None or param <= 0:
            raise ValueError("strong target needs a positive margin")
        c = kp1 + param
    elif target == "weak":
        if abs(kp1 - kp0) <= tol:
            raise InfeasibleTargetError(
                "K'(0) == K'(1): constant rho admits no weakly subcritical shift"
            )
        if param is None:
            c = 0.5 * (kp0 + kp1)
        else:
            if not 0 < param < 1:
                raise ValueError("weak target tilt must lie in (0, 1)")
            c = K_derivatives(model, param)[1]
    else:
        raise ValueError(f"unknown target {target!r}; expected one of {CALIBRATION_TARGETS}")
    return shift_means(model, c), c
