"""Seeded Monte Carlo estimators for survival probabilities and exit laws.

All chunked estimators split the sample into fixed chunks of ``CHUNK``
paths.  Chunk ``c`` for start state ``i`` draws from its own PCG64 stream,
seeded by ``SeedSequence(master_seed, spawn_key=(stream_id, tag, i, c))``,
and per-chunk moments are merged in chunk order.  Results are therefore
bit-identical for a given seed whatever the number of worker threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from . import _kernels as kern
from .envmodel import EnvironmentModel, check_stochastic, stationary
from .errors import (
    ConfigurationError,
    DomainError,
    FeasibilityError,
    NumericalError,
)
from .pathfn import EnvPath, SurvivalTable, make_path
from .spectral import tilted_chain

log = logging.getLogger(__name__)

CHUNK = 4096
BLOCK = 512
DEFAULT_CAP = 10**6
ESTIMATORS = ("pop", "env", "tilted", "dual")
_TAGS = {"env": 0, "dual": 1, "pop": 2, "walk": 3}


@dataclass(frozen=True)
class SurvivalEstimate:
    mean: float
    stderr: float
    n_samples: int
    estimator: str

    def __post_init__(self):
        if self.stderr < 0 or not np.isfinite(self.stderr):
            raise ValueError(f"invalid standard error {self.stderr}")


@dataclass(frozen=True)
class RandomSource:
    """Master seed plus stream id; every chunk gets an independent child stream."""

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    def generator(self, *key: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            int(self.master_seed), spawn_key=(int(self.stream_id), *map(int, key))
        )
        return np.random.Generator(np.random.PCG64(seq))


def as_source(rng) -> RandomSource:
    if isinstance(rng, RandomSource):
        return rng
    if isinstance(rng, np.random.Generator):
        return RandomSource(int(rng.integers(0, 2**63)))
    if isinstance(rng, (int, np.integer)):
        return RandomSource(int(rng))
    raise TypeError(f"cannot derive a random source from {type(rng).__name__}")


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return as_source(rng).generator()


# ---------------------------------------------------------------------------
# single-path samplers
# ---------------------------------------------------------------------------


def sample_environment(
    kernel: np.ndarray, start: int, n: int, rng, rho: np.ndarray | None = None
) -> EnvPath:
    """X_1..X_n by inverse CDF over the row of the previous state."""
    kernel = np.asarray(kernel, dtype=float)
    check_stochastic(kernel)
    d = kernel.shape[0]
    cum = kern.cumulative_rows(kernel)
    u = as_generator(rng).random(n)
    steps = np.empty(n, dtype=np.int64)
    x = int(start)
    for k in range(n):
        x = int(np.searchsorted(cum[x, : d - 1], u[k], side="right"))
        steps[k] = x
    return make_path(np.zeros(d) if rho is None else rho, start, steps)


@dataclass(frozen=True, eq=False)
class BranchingBatch:
    z: np.ndarray
    state: np.ndarray
    capped: np.ndarray


def _branching_steps(model, x, z, capped, gen, cum, cap):
    """Advance every (X, Z) pair by one generation in place."""
    u = gen.random(x.size)
    x[:] = (u[:, None] >= cum[x]).sum(axis=1)
    for i in range(model.d):
        mask = (x == i) & (z > 0) & ~capped
        if mask.any():
            z[mask] = model.laws[i].sample_sum(gen, z[mask])
    capped |= z > cap


def sample_branching(
    model: EnvironmentModel, start: int, n: int, rng, cap: int = DEFAULT_CAP, size: int | None = None
):
    """Simulate (X, Z) from Z_0 = 1 for n generations.

    Returns ``(Z_n or "capped", X_n)``; with ``size`` a :class:`BranchingBatch`
    of independent trajectories.  A capped trajectory stops evolving once its
    population exceeds ``cap``; 0 is absorbing.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    gen = as_generator(rng)
    m = 1 if size is None else int(size)
    cum = kern.cumulative_rows(model.P)[:, : model.d - 1]
    x = np.full(m, start, dtype=np.int64)
    z = np.ones(m, dtype=np.int64)
    capped = np.zeros(m, dtype=bool)
    for _ in range(n):
        _branching_steps(model, x, z, capped, gen, cum, cap)
    if size is not None:
        return BranchingBatch(z, x, capped)
    return ("capped" if capped[0] else int(z[0])), int(x[0])


# ---------------------------------------------------------------------------
# chunked accumulation
# ---------------------------------------------------------------------------


@dataclass
class _Moments:
    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray) -> "_Moments":
        mean = values.mean(axis=-1)
        dev = values - mean[..., None]
        return cls(values.shape[-1], mean, np.einsum("...c,...c->...", dev, dev))

    def merge(self, other: "_Moments") -> "_Moments":
        # Chan et al. pairwise update
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return _Moments(n, mean, m2)

    def stderr(self) -> np.ndarray:
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def _chunk_sizes(N: int) -> list[int]:
    full, rest = divmod(N, CHUNK)
    return [CHUNK] * full + ([rest] if rest else [])


def _run_chunks(job: Callable[[int, int], _Moments], N: int, workers: int) -> _Moments:
    tasks = list(enumerate(_chunk_sizes(N)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: job(*a), tasks))
    else:
        parts = [job(c, size) for c, size in tasks]
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    return total


def _indicator_values(y: np.ndarray, state: np.ndarray, d: int) -> np.ndarray:
    """(G, C) values and end states -> (G, d, C) values times 1{state = j}."""
    hit = state[:, None, :] == np.arange(d)[None, :, None]
    return np.where(hit, y[:, None, :], 0.0)


def _check_grid(gens: Sequence[int], minimum: int = 1) -> np.ndarray:
    grid = np.asarray(sorted(set(int(n) for n in gens)), dtype=np.int64)
    if grid.size == 0 or grid[0] < minimum:
        raise ConfigurationError(f"generation grid must be nonempty with n >= {minimum}")
    return grid


def _check_samples(N: int) -> None:
    if N < 2:
        raise ConfigurationError("need at least 2 samples for a standard error")


def _check_probability(table: SurvivalTable) -> None:
    # weighted means may sit slightly above 1 by noise, never far
    excess = table.values - 1.0 - 6.0 * table.stderr
    if np.any(excess > 1e-12):
        raise NumericalError(f"estimated probability exceeds 1: {table.values.max()}")


# ---------------------------------------------------------------------------
# environment-marginal estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _EnvPlan:
    model: EnvironmentModel
    kernel: np.ndarray
    lam: float
    log_k: float
    log_v: np.ndarray
    grid: np.ndarray
    linear_fractional: bool
    table: kern.LawTable | None = field(default=None)


def _env_plan(model: EnvironmentModel, lam: float, grid: np.ndarray) -> _EnvPlan:
    if lam == 0.0:
        kernel, log_k, log_v = model.P, 0.0, np.zeros(model.d)
    else:
        chain = tilted_chain(model, lam)
        kernel, log_k, log_v = chain.kernel, float(np.log(chain.k)), np.log(chain.v)
    gconst = [law.g_constant for law in model.laws]
    lf = all(c is not None for c in gconst)
    return _EnvPlan(
        model=model,
        kernel=kernel,
        lam=float(lam),
        log_k=log_k,
        log_v=log_v,
        grid=grid,
        linear_fractional=lf,
        table=None if lf else kern.law_table(model.laws),
    )


def _env_chunk(plan: _EnvPlan, gen: np.random.Generator, start: int, size: int) -> _Moments:
    model = plan.model
    rho = model.rho
    cum = kern.cumulative_rows(plan.kernel)
    n_max = int(plan.grid[-1])
    G = plan.grid.size
    x = np.full(size, start, dtype=np.int64)
    out = np.empty((G, size))
    state = np.empty((G, size), dtype=np.int64)
    if plan.linear_fractional:
        lut = kern.grid_lookup(plan.grid, n_max)
        gconst = np.array([law.g_constant for law in model.laws])
        S, w, L = np.zeros(size), np.ones(size), np.zeros(size)
        for t0 in range(0, n_max, BLOCK):
            u = gen.random((min(BLOCK, n_max - t0), size))
            kern.lf_block(cum, rho, np.exp(rho), gconst, plan.lam, u, t0, lut, x, S, w, L, out, state)
    else:
        path = np.empty((n_max, size), dtype=np.int64)
        for t0 in range(0, n_max, BLOCK):
            u = gen.random((min(BLOCK, n_max - t0), size))
            kern.store_block(cum, u, t0, x, path)
        tb = plan.table
        kern.generic_q(path, plan.grid, rho, plan.lam, tb.kind, tb.r, tb.pmf, out, state)
    y = np.exp(out + plan.log_v[start] - plan.log_v[state])
    return _Moments.of(_indicator_values(y, state, model.d))


def _estimate_env(
    model: EnvironmentModel, lam: float, gens, N: int, rng, workers: int, label: str
) -> dict[int, SurvivalTable]:
    _check_samples(N)
    grid = _check_grid(gens)
    plan = _env_plan(model, lam, grid)
    source = as_source(rng)
    d, G = model.d, grid.size
    means = np.zeros((G, d, d))
    errs = np.zeros((G, d, d))
    for i in range(d):
        def job(c, size, i=i):
            return _env_chunk(plan, source.generator(_TAGS["env"], i, c), i, size)

        mom = _run_chunks(job, N, workers)
        means[:, i, :] = mom.mean
        errs[:, i, :] = mom.stderr()
    scale = np.exp(grid * plan.log_k)[:, None, None]
    return _tables(grid, means * scale, errs * scale, N, label, source, lam)


def _tables(grid, means, errs, N, label, source, lam) -> dict[int, SurvivalTable]:
    out = {}
    for g, n in enumerate(grid):
        table = SurvivalTable(
            int(n),
            means[g],
            "mc",
            stderr=errs[g],
            n_samples=N,
            meta={
                "estimator": label,
                "lambda": lam,
                "seed": source.master_seed,
                "stream": source.stream_id,
            },
        )
        _check_probability(table)
        out[int(n)] = table
    return out


def estimate_qn_mc(
    model: EnvironmentModel, n: int, N: int, rng, workers: int = 1
) -> SurvivalTable:
    """Environment-marginal estimator: mean of q_n 1{X_n = j} over sampled environments."""
    return _estimate_env(model, 0.0, [n], N, rng, workers, "env-marginal")[n]


def estimate_qn_tilted(
    model: EnvironmentModel, lam: float, n: int, N: int, rng, workers: int = 1
) -> SurvivalTable:
    """Paths from the lam-tilted kernel, reweighted by k^n v(i) e^{-lam S_n} / v(X_n)."""
    return _estimate_env(model, lam, [n], N, rng, workers, f"tilted({lam:g})")[n]


# ---------------------------------------------------------------------------
# dual estimator
# ---------------------------------------------------------------------------


def _dual_chunk(model, chain, table, grid, gen, j, size) -> _Moments:
    n_max = int(grid[-1])
    G = grid.size
    cum = kern.cumulative_rows(chain.dual)
    lut = kern.grid_lookup(grid, n_max)
    x = np.full(size, j, dtype=np.int64)
    t0_val = float(model.laws[j].one_minus_pgf(1.0))
    t = np.full(size, t0_val)
    acc = np.full(size, -np.log(t0_val))
    S = np.zeros(size)
    out = np.empty((G, size))
    state = np.empty((G, size), dtype=np.int64)
    steps = n_max + 1
    for t0 in range(0, steps, BLOCK):
        u = gen.random((min(BLOCK, steps - t0), size))
        kern.dual_block(
            cum, model.rho, table.kind, table.r, table.pmf, table.mean, table.f2, table.f3,
            u, t0, lut, x, t, acc, S, out, state,
        )
    return _Moments.of(_indicator_values(np.exp(out), state, model.d))


def _estimate_dual_grid(
    model: EnvironmentModel, dual_gens, N: int, rng, workers: int, columns=None
) -> dict[int, SurvivalTable]:
    """Tables indexed by target generation m = n + 1 for n in ``dual_gens``."""
    _check_samples(N)
    grid = _check_grid(dual_gens, minimum=0)
    chain = tilted_chain(model, 1.0)
    table = kern.law_table(model.laws)
    source = as_source(rng)
    d, G = model.d, grid.size
    nt, v = chain.stat, chain.v
    means = np.full((G, d, d), np.nan)
    errs = np.full((G, d, d), np.nan)
    for j in range(d) if columns is None else columns:
        def job(c, size, j=j):
            gen = source.generator(_TAGS["dual"], j, c)
            return _dual_chunk(model, chain, table, grid, gen, j, size)

        mom = _run_chunks(job, N, workers)
        # prefactor nu~(j) v(i) e^{-rho(j)} / (nu~(i) v(j)), without k^{n+1}
        spatial = nt[j] * v * np.exp(-model.rho[j]) / (nt * v[j])
        means[:, :, j] = mom.mean * spatial
        errs[:, :, j] = mom.stderr() * spatial
    scale = np.exp((grid + 1) * np.log(chain.k))[:, None, None]
    tables = _tables(grid + 1, means * scale, errs * scale, N, "dual(1)", source, 1.0)
    return tables


def estimate_dual(
    model: EnvironmentModel, j: int, n: int, N: int, rng, workers: int = 1
) -> list[SurvivalEstimate]:
    """Column i -> P_i(Z_{n+1} > 0, X_{n+1} = j) from dual chains started at j."""
    table = _estimate_dual_grid(model, [n], N, rng, workers, columns=[j])[n + 1]
    return [table.estimate(i, j) for i in range(model.d)]


# ---------------------------------------------------------------------------
# population estimator
# ---------------------------------------------------------------------------


def _pop_chunk(model, grid, cap, gen, start, size) -> tuple[_Moments, int]:
    d = model.d
    cum = kern.cumulative_rows(model.P)[:, : d - 1]
    x = np.full(size, start, dtype=np.int64)
    z = np.ones(size, dtype=np.int64)
    capped = np.zeros(size, dtype=bool)
    out = np.empty((grid.size, size))
    state = np.empty((grid.size, size), dtype=np.int64)
    g = 0
    for n in range(1, int(grid[-1]) + 1):
        _branching_steps(model, x, z, capped, gen, cum, cap)
        if n == grid[g]:
            out[g] = (z > 0) | capped
            state[g] = x
            g += 1
    return _Moments.of(_indicator_values(out, state, d)), int(capped.sum())


def _estimate_pop(model, gens, N, rng, workers, cap) -> dict[int, SurvivalTable]:
    _check_samples(N)
    grid = _check_grid(gens)
    source = as_source(rng)
    d, G = model.d, grid.size
    means = np.zeros((G, d, d))
    errs = np.zeros((G, d, d))
    n_capped = 0
    for i in range(d):
        caps = {}

        def job(c, size, i=i):
            mom, k = _pop_chunk(model, grid, cap, source.generator(_TAGS["pop"], i, c), i, size)
            caps[c] = k
            return mom

        mom = _run_chunks(job, N, workers)
        n_capped += sum(caps.values())
        means[:, i, :] = mom.mean
        errs[:, i, :] = mom.stderr()
    if n_capped:
        log.info("population estimator: %d paths reached the cap %d", n_capped, cap)
    tables = _tables(grid, means, errs, N, "population", source, 0.0)
    for t in tables.values():
        t.meta["capped"] = n_capped
        t.meta["cap"] = cap
    return tables


def estimate_population(
    model: EnvironmentModel, n: int, N: int, rng, cap: int = DEFAULT_CAP, workers: int = 1
) -> SurvivalTable:
    """Full (X, Z) simulation; capped populations count as surviving."""
    return _estimate_pop(model, [n], N, rng, workers, cap)[n]


def estimate_survival(
    model: EnvironmentModel,
    gens: Sequence[int],
    N: int,
    seed,
    estimator: str = "env",
    lam: float | None = None,
    workers: int = 1,
    cap: int = DEFAULT_CAP,
) -> dict[int, SurvivalTable]:
    """Grid front end: one table per generation n, all from the same paths.

    ``env`` ignores ``lam``; ``tilted`` defaults to lam = 1; ``dual`` uses
    lam = 1 and needs every n >= 1.
    """
    if estimator not in ESTIMATORS:
        raise ConfigurationError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    if estimator == "env":
        return _estimate_env(model, 0.0, gens, N, seed, workers, "env-marginal")
    if estimator == "tilted":
        lam = 1.0 if lam is None else float(lam)
        return _estimate_env(model, lam, gens, N, seed, workers, f"tilted({lam:g})")
    if estimator == "dual":
        if lam not in (None, 1.0):
            raise ConfigurationError("the dual estimator is defined for lambda = 1 only")
        grid = _check_grid(gens)
        return _estimate_dual_grid(model, grid - 1, N, seed, workers)
    return _estimate_pop(model, gens, N, seed, workers, cap)


# ---------------------------------------------------------------------------
# exit times and the conditioned walk
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExitStatistics:
    """Per start state i: P(tau_y > n) and V(i, y) ~ E_i[(y + S_n); tau_y > n]."""

    y: float
    n: int
    p: np.ndarray
    p_stderr: np.ndarray
    v: np.ndarray
    v_stderr: np.ndarray
    n_samples: int


def _check_centered(kernel: np.ndarray, rho: np.ndarray, tol: float = 1e-6) -> None:
    drift = float(stationary(kernel) @ rho)
    if abs(drift) > tol:
        raise DomainError(f"walk is not centered: stationary mean of rho is {drift:.3e}")


def _walk_chunk(cum, rho, y, grid, gen, start, size):
    n_max = int(grid[-1])
    lut = kern.grid_lookup(grid, n_max)
    x = np.full(size, start, dtype=np.int64)
    S = np.zeros(size)
    alive = np.ones(size, dtype=np.bool_)
    out_alive = np.empty((grid.size, size), dtype=np.bool_)
    out_pos = np.empty((grid.size, size))
    for t0 in range(0, n_max, BLOCK):
        u = gen.random((min(BLOCK, n_max - t0), size))
        kern.walk_block(cum, rho, float(y), u, t0, lut, x, S, alive, out_alive, out_pos)
    return out_alive, out_pos


def exit_statistics(
    kernel: np.ndarray,
    rho: np.ndarray,
    y: float,
    n,
    N: int,
    rng,
    workers: int = 1,
) -> ExitStatistics | dict[int, ExitStatistics]:
    """Survival of y + S_k above 0 up to n, for every start state.

    ``n`` may be a list, in which case one result per generation is returned,
    all computed from the same paths.
    """
    kernel = np.asarray(kernel, dtype=float)
    rho = np.asarray(rho, dtype=float)
    check_stochastic(kernel)
    _check_centered(kernel, rho)
    _check_samples(N)
    single = np.ndim(n) == 0
    grid = _check_grid([n] if single else n)
    cum = kern.cumulative_rows(kernel)
    source = as_source(rng)
    d, G = kernel.shape[0], grid.size
    p = np.zeros((G, d))
    pe = np.zeros((G, d))
    v = np.zeros((G, d))
    ve = np.zeros((G, d))
    for i in range(d):
        def job(c, size, i=i):
            gen = source.generator(_TAGS["walk"], i, c)
            al, pos = _walk_chunk(cum, rho, y, grid, gen, i, size)
            return _Moments.of(np.stack([al.astype(float), np.where(al, pos, 0.0)]))

        mom = _run_chunks(job, N, workers)
        se = mom.stderr()
        p[:, i], v[:, i] = mom.mean[0], mom.mean[1]
        pe[:, i], ve[:, i] = se[0], se[1]
    results = {
        int(m): ExitStatistics(float(y), int(m), p[g], pe[g], v[g], ve[g], N)
        for g, m in enumerate(grid)
    }
    return results[int(grid[0])] if single else results


def rayleigh_cdf(t):
    t = np.asarray(t, dtype=float)
    return np.where(t > 0, -np.expm1(-0.5 * t * t), 0.0)


def rayleigh_ks(
    kernel: np.ndarray,
    rho: np.ndarray,
    sigma: float,
    y: float,
    n: int,
    N_accept: int,
    rng,
    start: int = 0,
    min_rate: float = 1e-4,
    max_paths: int = 10**8,
) -> tuple[float, float]:
    """KS distance between (y + S_n)/(sigma sqrt n) given tau_y > n and 1 - e^{-t^2/2}.

    Paths are drawn chunk by chunk and the first ``N_accept`` survivors in
    chunk order are kept.  Returns ``(statistic, acceptance_rate)``.
    """
    kernel = np.asarray(kernel, dtype=float)
    rho = np.asarray(rho, dtype=float)
    check_stochastic(kernel)
    _check_centered(kernel, rho)
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    cum = kern.cumulative_rows(kernel)
    source = as_source(rng)
    grid = np.array([n], dtype=np.int64)
    kept: list[np.ndarray] = []
    n_kept = drawn = c = 0
    while n_kept < N_accept:
        gen = source.generator(_TAGS["walk"], start, c)
        al, pos = _walk_chunk(cum, rho, y, grid, gen, start, CHUNK)
        drawn += CHUNK
        c += 1
        acc = pos[0][al[0]]
        kept.append(acc)
        n_kept += acc.size
        rate = n_kept / drawn
        if (drawn >= 50 * CHUNK and rate < min_rate) or drawn >= max_paths:
            raise FeasibilityError(
                f"acceptance rate {rate:.2e} after {drawn} paths is too low; try a smaller n"
            )
    sample = np.concatenate(kept)[:N_accept] / (sigma * np.sqrt(n))
    stat = sps.kstest(sample, rayleigh_cdf).statistic
    return float(stat), n_kept / drawn
