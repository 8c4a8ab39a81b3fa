"""Transfer operator, Perron data, tilted chains and regime classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envmodel import EnvironmentModel, dual_kernel, primitivity_exponent, stationary
from .errors import ConvergenceError, NumericalError, RegimeError, StructuralError

REGIMES = (
    "critical",
    "strongly-subcritical",
    "intermediately-subcritical",
    "weakly-subcritical",
    "supercritical",
)
LAMBDA_GRID = np.linspace(-1.0, 2.0, 13)


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Perron root ``k`` with right vector ``v`` and left form ``nu``.

    Normalised so that ``sum(nu) == 1`` and ``nu @ v == 1``.  ``gap`` is
    ``1 - |second eigenvalue| / k``, measured by power iteration on the
    remainder ``M - k v nu``.
    """

    lam: float
    k: float
    v: np.ndarray
    nu: np.ndarray
    gap: float
    residual: float
    iterations: int


@dataclass(frozen=True, eq=False)
class TiltedChain:
    lam: float
    kernel: np.ndarray
    stat: np.ndarray
    dual: np.ndarray
    rho: np.ndarray
    decomposition: SpectralDecomposition

    @property
    def k(self) -> float:
        return self.decomposition.k

    @property
    def v(self) -> np.ndarray:
        return self.decomposition.v


@dataclass(frozen=True)
class RegimeReport:
    Kp0: float
    Kp1: float
    regime: str
    lambda_star: float | None
    k_rate: float
    sigma2: float
    tol: float
    kp_star: float | None = None

    def to_dict(self) -> dict:
        return {
            "Kp0": self.Kp0,
            "Kp1": self.Kp1,
            "regime": self.regime,
            "lambda_star": self.lambda_star,
            "k_rate": self.k_rate,
            "sigma2": self.sigma2,
            "tol": self.tol,
            "kp_star": self.kp_star,
        }


def transfer_matrix(model: EnvironmentModel, lam: float) -> np.ndarray:
    """P_lam(i, j) = P(i, j) exp(lam rho(j))."""
    return model.P * np.exp(lam * model.rho)[None, :]


def _power_vector(M: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray, float, int]:
    # Collatz-Wielandt bracket min(Mv/v) <= k <= max(Mv/v) is the stopping rule.
    v = np.ones(M.shape[0])
    lo = hi = np.nan
    for it in range(1, max_iter + 1):
        w = M @ v
        ratio = w / v
        lo, hi = ratio.min(), ratio.max()
        v = w / w.max()
        if hi - lo <= tol * hi:
            k = 0.5 * (lo + hi)
            residual = np.max(np.abs(M @ v - k * v)) / (k * np.max(np.abs(v)))
            return k, v, residual, it
    raise ConvergenceError("power iteration did not converge", (hi - lo) / hi)


def _second_modulus(M: np.ndarray, k: float, v: np.ndarray, nu: np.ndarray) -> float:
    Q = M - k * np.outer(v, nu)
    d = M.shape[0]
    x = np.cos(1.0 + 2.3 * np.arange(d))
    x /= np.linalg.norm(x)
    floor = 1e-13 * k
    logs = []
    for _ in range(200):
        y = Q @ x
        ny = np.linalg.norm(y)
        if ny <= floor:
            return 0.0
        logs.append(np.log(ny))
        x = y / ny
    # complex pairs make single-step growth oscillate; average the tail
    return float(np.exp(np.mean(logs[100:])))


def perron(matrix: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000, lam: float = np.nan) -> SpectralDecomposition:
    M = np.asarray(matrix, dtype=float)
    if np.any(M < 0):
        raise StructuralError("Perron iteration needs a nonnegative matrix")
    if primitivity_exponent(M) is None:
        raise StructuralError("matrix is not primitive")
    k, v, res_v, it_v = _power_vector(M, tol, max_iter)
    k_left, nu, res_nu, it_nu = _power_vector(M.T, tol, max_iter)
    nu = nu / nu.sum()
    v = v / (nu @ v)
    modulus = _second_modulus(M, k, v, nu)
    gap = float(min(1.0, max(0.0, 1.0 - modulus / k)))
    return SpectralDecomposition(
        lam=lam,
        k=float(k),
        v=v,
        nu=nu,
        gap=gap,
        residual=float(max(res_v, res_nu)),
        iterations=max(it_v, it_nu),
    )


def decompose(model: EnvironmentModel, lam: float) -> SpectralDecomposition:
    return perron(transfer_matrix(model, lam), lam=lam)


def tilted_chain(model: EnvironmentModel, lam: float) -> TiltedChain:
    dec = decompose(model, lam)
    M = transfer_matrix(model, lam)
    kernel = M * dec.v[None, :] / (dec.k * dec.v[:, None])
    stat = dec.nu * dec.v
    return TiltedChain(
        lam=lam,
        kernel=kernel,
        stat=stat,
        dual=dual_kernel(kernel, stat),
        rho=model.rho,
        decomposition=dec,
    )


def asymptotic_variance_series(
    kernel: np.ndarray, f: np.ndarray, tol: float = 1e-14, max_terms: int = 1_000_000
) -> tuple[float, int]:
    """pi(fc^2) + 2 sum_{n>=1} pi(fc kernel^n fc), summed until terms fall below tol."""
    kernel = np.asarray(kernel, dtype=float)
    f = np.asarray(f, dtype=float)
    pi = stationary(kernel)
    fc = f - pi @ f
    total = pi @ (fc * fc)
    h = fc.copy()
    for n in range(1, max_terms + 1):
        h = kernel @ h
        term = pi @ (fc * h)
        total += 2.0 * term
        if abs(term) < tol and np.max(np.abs(h)) < tol:
            return float(total), n
    raise ConvergenceError("variance series did not converge", abs(term))


def asymptotic_variance(kernel: np.ndarray, f: np.ndarray, check: bool = True) -> float:
    """Asymptotic variance of the additive functional sum f(X_k).

    Closed form through the fundamental matrix (I - kernel + 1 pi)^-1,
    cross-checked against the truncated autocovariance series.
    """
    kernel = np.asarray(kernel, dtype=float)
    f = np.asarray(f, dtype=float)
    d = kernel.shape[0]
    pi = stationary(kernel)
    fc = f - pi @ f
    A = np.eye(d) - kernel + np.outer(np.ones(d), pi)
    try:
        h = np.linalg.solve(A, fc)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular fundamental system") from exc
    # (Z - I) fc = Z fc - fc
    value = float(pi @ (fc * fc) + 2.0 * pi @ (fc * (h - fc)))
    if check:
        series, _ = asymptotic_variance_series(kernel, f)
        if abs(series - value) > 1e-10 * max(1.0, abs(value)):
            raise NumericalError(
                f"fundamental-matrix variance {value!r} disagrees with series {series!r}"
            )
    return value


def K_derivatives(model: EnvironmentModel, lam: float) -> tuple[float, float, float]:
    """(K, K', K'') at ``lam`` where K = log k."""
    chain = tilted_chain(model, lam)
    K = float(np.log(chain.k))
    Kp = float(chain.stat @ model.rho)
    Kpp = asymptotic_variance(chain.kernel, model.rho)
    return K, Kp, Kpp


def critical_point(model: EnvironmentModel, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Unique zero of K' in (0, 1), by bisection."""
    lo, hi = 0.0, 1.0
    kp_lo = K_derivatives(model, lo)[1]
    kp_hi = K_derivatives(model, hi)[1]
    if not (kp_lo < 0 < kp_hi):
        raise RegimeError(
            f"critical point needs K'(0) < 0 < K'(1), got {kp_lo:.3e}, {kp_hi:.3e}"
        )
    mid = 0.5
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        kp = K_derivatives(model, mid)[1]
        if abs(kp) <= tol or hi - lo < 4 * np.finfo(float).eps:
            return mid
        if kp < 0:
            lo = mid
        else:
            hi = mid
    return mid


def classify(model: EnvironmentModel, tol: float = 1e-9) -> RegimeReport:
    K0, kp0, kpp0 = K_derivatives(model, 0.0)
    K1, kp1, kpp1 = K_derivatives(model, 1.0)
    lam_star = None
    kp_star = None
    if abs(kp0) <= tol:
        regime, k_rate, sigma2 = "critical", 1.0, kpp0
    elif kp0 > tol:
        regime, k_rate, sigma2 = "supercritical", 1.0, kpp0
    elif kp1 < -tol:
        regime, k_rate, sigma2 = "strongly-subcritical", float(np.exp(K1)), kpp1
    elif abs(kp1) <= tol:
        regime, k_rate, sigma2 = "intermediately-subcritical", float(np.exp(K1)), kpp1
    else:
        regime = "weakly-subcritical"
        lam_star = critical_point(model)
        Ks, kp_star, sigma2 = K_derivatives(model, lam_star)
        k_rate = float(np.exp(Ks))
    return RegimeReport(
        Kp0=kp0,
        Kp1=kp1,
        regime=regime,
        lambda_star=lam_star,
        k_rate=k_rate,
        sigma2=sigma2,
        tol=tol,
        kp_star=kp_star,
    )


def k_curve(model: EnvironmentModel, grid=LAMBDA_GRID) -> list[tuple[float, ...]]:
    """Rows (lambda, k, K, K', K'', gap) over ``grid``."""
    rows = []
    for lam in grid:
        dec = decompose(model, float(lam))
        K, Kp, Kpp = K_derivatives(model, float(lam))
        rows.append((float(lam), dec.k, K, Kp, Kpp, dec.gap))
    return rows
