"""Wavepacket statistics and effective-noise diagnostics.

Moments and participation are normalized by the l2 norm, so they are
invariant under global phase and amplitude rescaling.  The subdiffusion
analysis fits the late-time power law M2 ~ t^a on log-resampled data; the
effective-noise theory predicts a = 1/3 with a beta^(4/3) prefactor, and
rests on the assumption that the nonlinear forcing on a tail mode behaves
as rapidly-decorrelating noise, which `noise_autocorrelation` tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disorder import EigenSystem, OverlapTable
from .errors import FitError


def moments(state_or_psi):
    """(M1, M2, participation) of |psi|^2, weighted by the norm."""
    psi = getattr(state_or_psi, "psi", state_or_psi)
    rho = np.abs(np.asarray(psi)) ** 2
    n = rho.sum()
    if n <= 0.0:
        raise ValueError("zero-norm state has no moments")
    x = np.arange(rho.shape[0])
    m1 = float((x * rho).sum() / n)
    m2 = float((((x - m1) ** 2) * rho).sum() / n)
    participation = float(n * n / np.sum(rho * rho))
    return m1, m2, participation


def flat_density(state_or_psi) -> float:
    """Packet density estimate rho = N / participation."""
    psi = getattr(state_or_psi, "psi", state_or_psi)
    rho = np.abs(np.asarray(psi)) ** 2
    n = rho.sum()
    return float(np.sum(rho * rho) / n)


@dataclass
class MomentSeries:
    times: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    participation: np.ndarray
    norm: float = 1.0

    def __post_init__(self):
        if np.any(self.m2 < 0):
            raise ValueError("M2 must be nonnegative")


@dataclass
class ExponentFit:
    exponent: float
    ci: tuple
    window: tuple
    n_points: int
    prefactor: float


@dataclass
class EffectiveNoiseFit:
    """Power-law summary M2 ~ D * t^exponent over the fit window.

    The theory's absolute constants are never fitted here; only scaling
    exponents are meaningful, and `constants` records that explicitly.
    """

    D: float
    exponent: float
    ci: tuple
    window: tuple
    constants: dict = field(
        default_factory=lambda: {"C1": "unknown", "C2": "unknown", "C3": "unknown"}
    )


def _log_resample(times, values, window, n):
    lo, hi = window
    mask = (times >= lo) & (times <= hi) & (values > 0) & (times > 0)
    if mask.sum() < 10:
        raise FitError(f"need >= 10 positive points in window {window}, have {int(mask.sum())}")
    lt, lv = np.log(times[mask]), np.log(values[mask])
    grid = np.linspace(lt[0], lt[-1], max(n, lt.size))
    return grid, np.interp(grid, lt, lv)


def fit_subdiffusion_exponent(times, m2, window, ensemble=None, n_boot: int = 200,
                              seed: int = 0, n_resample: int = 64) -> ExponentFit:
    """Least-squares slope of log M2 vs log t on a log-uniform resampling.

    `ensemble` (realizations x times) enables a bootstrap CI over
    realizations; otherwise the CI is the +-1.96 sigma slope error of the
    single-series fit.
    """
    times = np.asarray(times, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    lt, lv = _log_resample(times, m2, window, n_resample)
    slope, intercept = np.polyfit(lt, lv, 1)
    if ensemble is not None:
        ens = np.asarray(ensemble, dtype=float)
        rng = np.random.default_rng(seed)
        slopes = []
        for _ in range(n_boot):
            pick = rng.integers(0, ens.shape[0], size=ens.shape[0])
            mean = ens[pick].mean(axis=0)
            try:
                bt, bv = _log_resample(times, mean, window, n_resample)
            except FitError:
                continue
            slopes.append(np.polyfit(bt, bv, 1)[0])
        lo, hi = np.percentile(slopes, [2.5, 97.5])
        ci = (float(lo), float(hi))
    else:
        resid = lv - (slope * lt + intercept)
        dof = max(lt.size - 2, 1)
        se = np.sqrt(np.sum(resid**2) / dof / np.sum((lt - lt.mean()) ** 2))
        ci = (float(slope - 1.96 * se), float(slope + 1.96 * se))
    return ExponentFit(
        exponent=float(slope), ci=ci, window=(float(window[0]), float(window[1])),
        n_points=int(lt.size), prefactor=float(np.exp(intercept)),
    )


def beta_scaling_check(beta_series: dict, t_late: float, growth_factor: float = 1.5):
    """Slope of log M2(t_late) vs log beta across ensembles.

    `beta_series` maps beta -> (times, m2).  Ensembles that show no growth
    (late/early M2 ratio below `growth_factor`, e.g. beta = 0) are excluded
    automatically.  Returns (slope, ci, betas_used).
    """
    betas, vals = [], []
    for beta, (times, m2) in sorted(beta_series.items()):
        times = np.asarray(times, dtype=float)
        m2 = np.asarray(m2, dtype=float)
        if beta <= 0:
            continue
        i_late = int(np.argmin(np.abs(times - t_late)))
        i_early = max(0, np.searchsorted(times, t_late / 100.0))
        if m2[i_late] <= growth_factor * m2[i_early]:
            continue
        betas.append(beta)
        vals.append(m2[i_late])
    if len(betas) < 3:
        raise FitError("need >= 3 growing ensembles across beta for a scaling fit")
    lb, lv = np.log(betas), np.log(vals)
    slope, intercept = np.polyfit(lb, lv, 1)
    resid = lv - (slope * lb + intercept)
    dof = max(lb.size - 2, 1)
    denom = np.sum((lb - lb.mean()) ** 2)
    se = np.sqrt(np.sum(resid**2) / dof / denom) if denom > 0 else np.inf
    return float(slope), (float(slope - 1.96 * se), float(slope + 1.96 * se)), betas


def tail_front(state_or_psi, threshold: float):
    """Outermost sites where |psi|^2 exceeds `threshold`, as distances from M1.

    Returns (left, right) distances in sites; raises if the threshold is at
    or above the peak.
    """
    psi = getattr(state_or_psi, "psi", state_or_psi)
    rho = np.abs(np.asarray(psi)) ** 2
    if threshold <= 0 or threshold >= rho.max():
        raise ValueError("threshold must lie in (0, max |psi|^2)")
    m1, _, _ = moments(psi)
    above = np.nonzero(rho > threshold)[0]
    left = max(0.0, m1 - above[0])
    right = max(0.0, above[-1] - m1)
    return float(left), float(right)


def mode_forcing(c_series: np.ndarray, times: np.ndarray, eig: EigenSystem,
                 overlaps: OverlapTable, n: int, beta: float) -> np.ndarray:
    """Nonlinear forcing F_n(t) felt by mode n from the packet modes.

    Evaluates beta * sum_{m1 m2 m3 in packet} V_n^{m1 m2 m3} c*_{m1} c_{m2}
    c_{m3} exp(i(E_n + E_{m1} - E_{m2} - E_{m3}) t) through the real-space
    factorization of the overlap sums (identical to the quadruple sum
    restricted to the packet mode set).
    """
    packet = list(overlaps.modes)
    c = np.asarray(c_series, dtype=np.complex128)
    times = np.asarray(times, dtype=float)
    if c.shape != (len(packet), times.size):
        raise ValueError("c_series must have shape (len(packet modes), len(times))")
    U = eig.modes[:, packet]
    E = eig.energies[packet]
    un = eig.modes[:, n]
    En = eig.energies[n]
    out = np.empty(times.size, dtype=np.complex128)
    for j, t in enumerate(times):
        amp = c[:, j] * np.exp(-1j * E * t)
        phi = U @ amp
        out[j] = beta * np.exp(1j * En * t) * np.sum(un * (np.abs(phi) ** 2) * phi)
    return out


@dataclass
class NoiseCorrelation:
    lags: np.ndarray
    corr: np.ndarray
    corr0: float
    integral: complex
    integral_converged: bool
    classification: str
    correlation_time: float
    window_ok: bool
    note: str = ""


def noise_autocorrelation(series: np.ndarray, dt_sample: float,
                          max_lag_fraction: float = 0.5,
                          decay_threshold: float = 0.1) -> NoiseCorrelation:
    """Empirical autocorrelation C(tau) = <F*(t) F(t+tau)> over the window.

    Classifies the decay: 'decaying' when the normalized tail falls below
    `decay_threshold`, otherwise 'non-decaying' ('oscillatory-non-decaying'
    when the real part keeps changing sign).  A window shorter than 10
    correlation times is reported, not fatal.
    """
    f = np.asarray(series, dtype=np.complex128)
    n = f.size
    if n < 8:
        raise ValueError("series too short for an autocorrelation estimate")
    nlag = max(2, int(n * max_lag_fraction))
    corr = np.empty(nlag, dtype=np.complex128)
    for k in range(nlag):
        corr[k] = np.mean(np.conj(f[: n - k]) * f[k:])
    c0 = float(np.abs(corr[0]))
    if c0 == 0.0:
        return NoiseCorrelation(
            lags=np.arange(nlag) * dt_sample, corr=corr, corr0=0.0, integral=0.0j,
            integral_converged=True, classification="decaying", correlation_time=0.0,
            window_ok=True, note="zero signal",
        )
    cn = np.abs(corr) / c0
    below = np.nonzero(cn < np.exp(-1.0))[0]
    tau_c = float(below[0] * dt_sample) if below.size else float(nlag * dt_sample)
    tail = cn[nlag // 2 :]
    decaying = bool(np.mean(tail) < decay_threshold)
    sign_changes = int(np.sum(np.diff(np.sign(corr.real[cn > 1e-3])) != 0))
    if decaying:
        cls = "decaying"
    elif sign_changes >= 3:
        cls = "oscillatory-non-decaying"
    else:
        cls = "non-decaying"
    cum = np.cumsum(corr) * dt_sample
    quarter = max(1, nlag // 4)
    ref = np.abs(cum[-1])
    var = np.max(np.abs(cum[-quarter:] - cum[-1]))
    converged = bool(decaying and (ref == 0.0 or var < 0.25 * max(ref, c0 * dt_sample)))
    window_len = n * dt_sample
    window_ok = bool(window_len >= 10.0 * tau_c)
    note = "" if window_ok else (
        f"window {window_len:.3g} shorter than 10 correlation times ({10 * tau_c:.3g})"
    )
    return NoiseCorrelation(
        lags=np.arange(nlag) * dt_sample, corr=corr, corr0=c0,
        integral=complex(cum[-1]), integral_converged=converged,
        classification=cls, correlation_time=tau_c, window_ok=window_ok, note=note,
    )
