"""Compiled inner loops for the Monte Carlo estimators.

Every kernel consumes a block of uniforms ``u[step, path]`` supplied by the
caller and updates per-path state arrays in place, so results depend only on
the uniforms and never on numba's own random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .envmodel import GeometricLaw, OffspringLaw, _FiniteSupportLaw

GEOMETRIC, FINITE = 0, 1
G_SWITCH = 1e-6
G_LIMIT = 1e-9
RESCALE = 1e150


@dataclass(frozen=True, eq=False)
class LawTable:
    kind: np.ndarray
    r: np.ndarray
    pmf: np.ndarray
    mean: np.ndarray
    f2: np.ndarray
    f3: np.ndarray


def law_table(laws: tuple[OffspringLaw, ...]) -> LawTable:
    d = len(laws)
    width = max([law.probs.size for law in laws if isinstance(law, _FiniteSupportLaw)] + [1])
    kind = np.zeros(d, dtype=np.int64)
    r = np.zeros(d)
    pmf = np.zeros((d, width))
    for i, law in enumerate(laws):
        if isinstance(law, GeometricLaw):
            kind[i] = GEOMETRIC
            r[i] = law.r
        elif isinstance(law, _FiniteSupportLaw):
            kind[i] = FINITE
            pmf[i, : law.probs.size] = law.probs
        else:
            raise TypeError(f"no compiled form for {type(law).__name__}")
    return LawTable(
        kind=kind,
        r=r,
        pmf=pmf,
        mean=np.array([law.mean for law in laws]),
        f2=np.array([law.second_factorial for law in laws]),
        f3=np.array([law.third_factorial for law in laws]),
    )


def cumulative_rows(kernel: np.ndarray) -> np.ndarray:
    """Row CDFs with the last reachable column pinned to exactly 1."""
    cum = np.cumsum(kernel, axis=1)
    for x in range(kernel.shape[0]):
        last = np.nonzero(kernel[x] > 0)[0][-1]
        cum[x, last:] = 1.0
    return cum


def grid_lookup(grid: np.ndarray, n_max: int) -> np.ndarray:
    """time -> index into grid, or -1."""
    lut = np.full(n_max + 2, -1, dtype=np.int64)
    lut[np.asarray(grid, dtype=np.int64)] = np.arange(len(grid))
    return lut


@njit(cache=True, nogil=True)
def _next_state(cum, x, u):
    # rows are nondecreasing, so counting passed breakpoints is branch-free
    y = 0
    for k in range(cum.shape[1] - 1):
        y += u >= cum[x, k]
    return y


@njit(cache=True, nogil=True)
def _comp_pgf(kind, r, pmf, i, t):
    if kind[i] == GEOMETRIC:
        return r[i] * t / (1.0 - r[i] + r[i] * t)
    lg = math.log1p(-t) if t < 1.0 else -np.inf
    acc = 0.0
    for k in range(1, pmf.shape[1]):
        p = pmf[i, k]
        if p != 0.0:
            acc += p * (1.0 if lg == -np.inf else -math.expm1(k * lg))
    return acc


@njit(cache=True, nogil=True)
def _g_comp(kind, r, pmf, mean, f2, f3, i, t):
    m = mean[i]
    if t > G_SWITCH:
        return 1.0 / _comp_pgf(kind, r, pmf, i, t) - 1.0 / (m * t)
    if t >= G_LIMIT:
        a = f2[i] / (2.0 * m)
        b = f3[i] / (6.0 * m)
        return (a + (a * a - b) * t) / m
    return f2[i] / (2.0 * m * m)


@njit(cache=True, nogil=True)
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True, nogil=True)
def lf_block(cum, rho, exp_rho, gconst, lam, u, t0, lut, x, S, w, L, out, out_state):
    """Forward Agresti recursion for linear-fractional laws.

    With W_n = exp(S_n) / q_n and constant g = c_i:
    W_{n+1} = 1 + exp(rho(X_{n+1})) (W_n - 1 + c_{X_{n+1}}).
    W is stored as w * exp(L).  Records log(q_n) - lam * S_n at grid times.
    """
    B, C = u.shape
    for s in range(B):
        g = lut[t0 + s + 1]
        for p in range(C):
            y = _next_state(cum, x[p], u[s, p])
            x[p] = y
            S[p] += rho[y]
            if L[p] == 0.0:
                w[p] = 1.0 + exp_rho[y] * (w[p] - 1.0 + gconst[y])
            else:
                inv = math.exp(-L[p])
                w[p] = inv + exp_rho[y] * (w[p] - inv + gconst[y] * inv)
            if w[p] > RESCALE:
                L[p] += math.log(w[p])
                w[p] = 1.0
            if g >= 0:
                out[g, p] = S[p] - (math.log(w[p]) + L[p]) - lam * S[p]
                out_state[g, p] = y


@njit(cache=True, nogil=True)
def store_block(cum, u, t0, x, path):
    B, C = u.shape
    for s in range(B):
        for p in range(C):
            y = _next_state(cum, x[p], u[s, p])
            x[p] = y
            path[t0 + s, p] = y


@njit(cache=True, nogil=True)
def generic_q(path, grid, rho, lam, kind, r, pmf, out, out_state):
    """Backward composition q_n = 1 - f_{X_1} o ... o f_{X_n}(0) per grid time."""
    C = path.shape[1]
    for p in range(C):
        for g in range(grid.shape[0]):
            n = grid[g]
            t = 1.0
            S = 0.0
            for k in range(n - 1, -1, -1):
                i = path[k, p]
                t = _comp_pgf(kind, r, pmf, i, t)
                S += rho[i]
            out[g, p] = math.log(t) - lam * S
            out_state[g, p] = path[n - 1, p]


@njit(cache=True, nogil=True)
def dual_block(cum, rho, kind, r, pmf, mean, f2, f3, u, t0, lut, x, t, acc, S, out, out_state):
    """Forward recursion for q*_m(j) along dual paths.

    Per path: ``t`` = 1 - f_{X*_m} o ... o f_j(0), ``acc`` = log(1/q*_m),
    ``S`` = S*_m.  At step T, q*_{T-1} is recorded with X*_T if T-1 is a grid time.
    """
    B, C = u.shape
    for s in range(B):
        T = t0 + s + 1
        g = lut[T - 1]
        for p in range(C):
            y = _next_state(cum, x[p], u[s, p])
            x[p] = y
            if g >= 0:
                out[g, p] = -acc[p]
                out_state[g, p] = y
            eta = _g_comp(kind, r, pmf, mean, f2, f3, y, t[p])
            S[p] -= rho[y]
            if eta > 0.0:
                acc[p] = _logaddexp(acc[p], -S[p] + math.log(eta))
            t[p] = _comp_pgf(kind, r, pmf, y, t[p])


@njit(cache=True, nogil=True)
def walk_block(cum, rho, y0, u, t0, lut, x, S, alive, out_alive, out_pos):
    """Track tau_y > n and y + S_n; record both at grid times."""
    B, C = u.shape
    for s in range(B):
        g = lut[t0 + s + 1]
        for p in range(C):
            z = _next_state(cum, x[p], u[s, p])
            x[p] = z
            S[p] += rho[z]
            if alive[p] and y0 + S[p] <= 0.0:
                alive[p] = False
            if g >= 0:
                out_alive[g, p] = alive[p]
                out_pos[g, p] = y0 + S[p]
