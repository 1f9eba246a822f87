"""Finite-lattice chaos probability and its scaling collapse.

A finite periodic ring is classified as regular when its leading Lyapunov
exponent is consistent with the 1/T decay of a zero exponent, and chaotic
when the running exponent plateaus above that envelope.  The regularity
probability P(rho, W, L) measured over disorder ensembles obeys
P = R^L with R independent of L, and the transformed quantity
Q = P0/(1 - P0) collapses onto Q = W^-alpha q(rho / W^alpha1) with
power-law asymptotes q ~ c1 x^-zeta (small x) and c2 x^-eta (large x).

All ensemble dynamics run in rescaled units: hopping J' = 1/(1+W), on-site
energies uniform on [-W/(1+W), W/(1+W)], unit nonlinearity, and initial
uniform-amplitude states of norm rho*L with random site phases (the phase
draw is part of each sample's seed stream).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import _tangent
from .disorder import DisorderRealization, ModelParams
from .dynamics import WavepacketState
from .errors import FitError
from .seeding import derive_seed


@dataclass(frozen=True)
class RescaledParams:
    """Invariant parameter combination for the finite-lattice ensembles."""

    W: float
    J_r: float
    w_r: float
    beta_r: float
    norm_r: float
    rho: float | None = None

    def as_tuple(self):
        return (self.W, self.J_r, self.w_r, self.beta_r, self.norm_r)


def rescale(J: float, w: float, beta: float, norm: float, L: int | None = None) -> RescaledParams:
    """Map (J, w, beta, N) to the rescaled model with c = 1/(J(1+W)).

    W = w/(2J); the rescaled hopping is 1/(1+W), the potential support
    becomes [-W/(1+W), W/(1+W)], and the nonlinearity is absorbed into the
    norm N' = beta*N/(J(1+W)).  Re-applying the map to an already rescaled
    model (with the absorbed beta = 1) is the identity.
    """
    if J <= 0:
        raise ValueError("J must be positive")
    W = w / (2.0 * J)
    c = 1.0 / (J * (1.0 + W))
    J_r = 1.0 / (1.0 + W)
    w_r = w * c
    beta_r = beta * c
    norm_r = beta * norm * c
    rho = norm_r / L if L else None
    return RescaledParams(W=W, J_r=J_r, w_r=w_r, beta_r=beta_r, norm_r=norm_r, rho=rho)


@dataclass
class LyapunovResult:
    exponents: np.ndarray       # time-averaged, descending-ish order
    running_times: np.ndarray
    running_max: np.ndarray     # leading running exponent at the sample times
    running_all: np.ndarray     # (n_samples, n_exp)
    T: float
    dt: float
    renorm_interval: int


def _kinetic_propagator(L: int, J: float, dt: float) -> np.ndarray:
    """Dense exp(-i dt H_hop) on a periodic ring via the circulant basis."""
    k = np.arange(L)
    lam = -2.0 * J * np.cos(2.0 * np.pi * k / L)
    F = np.fft.fft(np.eye(L), axis=0) / np.sqrt(L)
    return (F.conj().T * np.exp(-1j * dt * lam)) @ F


def lyapunov_spectrum(state: WavepacketState, params: ModelParams, T: float,
                      n_exp: int = 4, renorm_interval: int = 10, dt: float = 0.1,
                      n_running: int = 96, tangent_seed: int = 0) -> LyapunovResult:
    """Tangent-space Lyapunov exponents of the split-step flow.

    Requires periodic boundaries.  Returns time-averaged exponents plus the
    running series of the leading exponent used by the classifier.  On
    tangent overflow the evolution retries with a smaller
    reorthonormalization interval.
    """
    if params.boundary != "periodic":
        raise ValueError("Lyapunov ensembles use periodic boundary conditions")
    if params.sigma != 1.0:
        raise ValueError("tangent dynamics implemented for the cubic model only")
    L = state.L
    if n_exp < 1 or n_exp > 2 * L:
        raise ValueError("need 1 <= n_exp <= 2L")
    nsteps = max(int(round(T / dt)), n_running)
    sample_steps = np.unique(
        np.clip(np.round(np.geomspace(max(renorm_interval, 4), nsteps, n_running)), 1, nsteps)
    ).astype(np.int64)
    Uk = _kinetic_propagator(L, params.J, dt)
    rng = np.random.default_rng(np.uint64(tangent_seed & (2**64 - 1)))

    interval = int(renorm_interval)
    for _attempt in range(4):
        psi = state.psi.astype(np.complex128).copy()
        tang = np.zeros((n_exp, L), dtype=np.complex128)
        for i in range(n_exp):
            if i < L:
                tang[i, i] = 1.0
            else:
                tang[i, i - L] = 1.0j
        # random real mixture keeps the set generic without biasing the span
        mix = rng.normal(size=(n_exp, n_exp))
        tang = (mix @ tang.reshape(n_exp, -1)).reshape(n_exp, L)
        logs = np.zeros(n_exp)
        running = np.zeros((sample_steps.size, n_exp))
        eps_half = 0.5 * dt * state.realization.epsilons
        hb = 0.5 * dt * params.beta
        status = _tangent.run_tangent(psi, tang, eps_half, hb, Uk, interval,
                                      sample_steps, logs, running)
        if status == 0:
            times = sample_steps * dt
            run_all = running / times[:, None]
            order = np.argsort(run_all[-1])[::-1]
            return LyapunovResult(
                exponents=run_all[-1][order],
                running_times=times,
                running_max=run_all.max(axis=1),
                running_all=run_all[:, order],
                T=float(nsteps * dt), dt=dt, renorm_interval=interval,
            )
        interval = max(1, interval // 4)
    raise FitError("tangent evolution kept overflowing at renorm_interval=1")


def classify_regular(result: LyapunovResult, T: float | None = None,
                     slope_regular: float = -0.8, slope_chaotic: float = -0.3) -> str:
    """'regular' when the running lambda_max decays like 1/T, 'chaotic' when
    it plateaus, 'indeterminate' between the two slope thresholds."""
    T = result.T if T is None else T
    t = result.running_times
    lam = result.running_max
    tail = t >= T / 10.0
    if tail.sum() < 4:
        tail = np.arange(t.size) >= max(0, t.size - 8)
    lt = t[tail]
    lv = lam[tail]
    if np.any(lv <= 0):
        return "regular"
    slope = np.polyfit(np.log(lt), np.log(lv), 1)[0]
    if slope <= slope_regular:
        return "regular"
    if slope >= slope_chaotic:
        return "chaotic"
    return "indeterminate"


@dataclass
class ChaosEnsembleRecord:
    rho: float
    W: float
    L: int
    n_samples: int
    n_regular: int
    n_chaotic: int
    n_indeterminate: int
    P: float
    ci: tuple
    lam_max: list
    classifications: list
    low_quality: bool
    master_seed: int
    T: float
    dt: float
    n_exp: int
    exact: bool = False

    def to_dict(self) -> dict:
        return {
            "rho": self.rho, "W": self.W, "L": self.L,
            "n_samples": self.n_samples, "n_regular": self.n_regular,
            "n_chaotic": self.n_chaotic, "n_indeterminate": self.n_indeterminate,
            "P": self.P, "ci_low": self.ci[0], "ci_high": self.ci[1],
            "lam_max": self.lam_max, "classifications": self.classifications,
            "low_quality": self.low_quality, "master_seed": self.master_seed,
            "T": self.T, "dt": self.dt, "n_exp": self.n_exp, "exact": self.exact,
        }


def wilson_ci(k: int, n: int, z: float = 1.96) -> tuple:
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def chaos_sample(rho: float, W: float, L: int, seed: int, T: float = 1e5,
                 dt: float = 0.1, n_exp: int = 4, renorm_interval: int = 10,
                 slope_regular: float = -0.8, slope_chaotic: float = -0.3):
    """One classified ensemble member; returns (classification, lam_max)."""
    rng = np.random.default_rng(np.uint64(seed & (2**64 - 1)))
    bound = W / (1.0 + W)
    eps = rng.uniform(-bound, bound, size=L)
    realization = DisorderRealization(seed=seed, L=L, w=2.0 * bound, epsilons=eps)
    params = ModelParams(J=1.0 / (1.0 + W), beta=1.0, sigma=1.0, boundary="periodic")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=L)
    psi = np.sqrt(rho) * np.exp(1j * phases)
    state = WavepacketState(t=0.0, psi=psi, params=params, realization=realization)
    res = lyapunov_spectrum(state, params, T, n_exp=n_exp,
                            renorm_interval=renorm_interval, dt=dt,
                            tangent_seed=derive_seed(seed, 1))
    cls = classify_regular(res, slope_regular=slope_regular, slope_chaotic=slope_chaotic)
    return cls, float(res.running_max[-1])


def regularity_probability(rho: float, W: float, L: int, n_samples: int,
                           master_seed: int, T: float = 1e5, dt: float = 0.1,
                           n_exp: int = 4, renorm_interval: int = 10,
                           slope_regular: float = -0.8, slope_chaotic: float = -0.3,
                           sample_results=None) -> ChaosEnsembleRecord:
    """Ensemble estimate of P(rho, W, L) with a Wilson binomial CI.

    `sample_results` may carry precomputed (classification, lam_max) pairs
    (e.g. from a parallel map); otherwise samples are computed here, seeded
    by derive_seed(master_seed, index).  Indeterminate samples are excluded
    from P and flagged when they exceed 20%.
    """
    if n_samples < 20:
        raise ValueError("need at least 20 samples per ensemble cell")
    if rho == 0.0:
        return ChaosEnsembleRecord(
            rho=rho, W=W, L=L, n_samples=n_samples, n_regular=n_samples,
            n_chaotic=0, n_indeterminate=0, P=1.0, ci=(1.0, 1.0),
            lam_max=[0.0] * n_samples, classifications=["regular"] * n_samples,
            low_quality=False, master_seed=master_seed, T=T, dt=dt, n_exp=n_exp,
            exact=True,
        )
    if sample_results is None:
        sample_results = [
            chaos_sample(rho, W, L, derive_seed(master_seed, i), T=T, dt=dt,
                         n_exp=n_exp, renorm_interval=renorm_interval,
                         slope_regular=slope_regular, slope_chaotic=slope_chaotic)
            for i in range(n_samples)
        ]
    cls = [c for c, _ in sample_results]
    lam = [l for _, l in sample_results]
    n_reg = cls.count("regular")
    n_cha = cls.count("chaotic")
    n_ind = cls.count("indeterminate")
    decided = n_reg + n_cha
    P = n_reg / decided if decided else float("nan")
    ci = wilson_ci(n_reg, decided) if decided else (0.0, 1.0)
    return ChaosEnsembleRecord(
        rho=rho, W=W, L=L, n_samples=n_samples, n_regular=n_reg, n_chaotic=n_cha,
        n_indeterminate=n_ind, P=P, ci=ci, lam_max=lam, classifications=cls,
        low_quality=bool(n_ind > 0.2 * n_samples), master_seed=master_seed,
        T=T, dt=dt, n_exp=n_exp,
    )


def scaling_R(record: ChaosEnsembleRecord):
    """R = P^(1/L) with the CI propagated; P = 0 maps to R = 0 (boundary)."""
    if record.P == 0.0:
        return 0.0, (0.0, record.ci[1] ** (1.0 / record.L)), True
    R = record.P ** (1.0 / record.L)
    ci = (record.ci[0] ** (1.0 / record.L), record.ci[1] ** (1.0 / record.L))
    return R, ci, False


def q_transform(P0: float) -> float:
    """Q = P0/(1 - P0); P0 = 1 maps to inf."""
    if not 0.0 <= P0 <= 1.0:
        raise ValueError("P0 must lie in [0, 1]")
    if P0 == 1.0:
        return float("inf")
    return P0 / (1.0 - P0)


def q_inverse(Q: float) -> float:
    """P0 = 1/(1 + 1/Q); exact round-trip of q_transform."""
    if Q == 0.0:
        return 0.0
    if np.isinf(Q):
        return 1.0
    return 1.0 / (1.0 + 1.0 / Q)


@dataclass
class ScalingFit:
    alpha: float
    alpha1: float
    zeta: float
    eta: float
    c1: float
    c2: float
    uncertainties: dict
    residual: float
    tied_alpha: bool = True

    def __post_init__(self):
        if self.zeta <= 0 or self.eta <= 0:
            raise ValueError("fitted zeta and eta must be positive")


def q_master_curve(x, c1: float, zeta: float, c2: float, eta: float):
    """Smooth crossover with q ~ c1 x^-zeta (small x) and c2 x^-eta (large x)."""
    x = np.asarray(x, dtype=float)
    return 1.0 / (x**zeta / c1 + x**eta / c2)


def q_scaling_model(rho, W, alpha, alpha1, c1, zeta, c2, eta):
    rho = np.asarray(rho, dtype=float)
    W = np.asarray(W, dtype=float)
    return W ** (-alpha) * q_master_curve(rho / W**alpha1, c1, zeta, c2, eta)


def collapse_fit(rho, W, Q, tie_alpha: bool = True, alpha1_probe: float = 1.75) -> ScalingFit:
    """Joint fit of the scaling form to Q(rho, W) samples.

    Requires >= 3 distinct W values and >= 5 rho values per W; refuses
    grids whose scaled coordinates do not overlap between any pair of W
    groups (no collapse information).
    """
    rho = np.asarray(rho, dtype=float)
    W = np.asarray(W, dtype=float)
    Q = np.asarray(Q, dtype=float)
    mask = Q > 0
    rho, W, Q = rho[mask], W[mask], Q[mask]
    wvals = np.unique(W)
    if wvals.size < 3:
        raise FitError("need >= 3 distinct W values; alpha is unidentifiable otherwise")
    for wv in wvals:
        if np.unique(rho[W == wv]).size < 5:
            raise FitError(f"need >= 5 rho values at W={wv}")
    # overlap check in scaled coordinates with the probe exponent
    spans = [np.log(rho[W == wv] / wv**alpha1_probe) for wv in wvals]
    overlaps = any(
        min(a.max(), b.max()) > max(a.min(), b.min())
        for i, a in enumerate(spans) for b in spans[i + 1 :]
    )
    if not overlaps:
        raise FitError("scaled coordinate ranges do not overlap between W groups")

    logQ = np.log(Q)

    def unpack(p):
        if tie_alpha:
            alpha = alpha1 = p[0]
            zeta, eta, lc1, lc2 = p[1], p[2], p[3], p[4]
        else:
            alpha, alpha1, zeta, eta, lc1, lc2 = p
        return alpha, alpha1, zeta, eta, lc1, lc2

    def resid(p):
        alpha, alpha1, zeta, eta, lc1, lc2 = unpack(p)
        x = rho / W**alpha1
        with np.errstate(over="ignore"):
            denom = x**zeta / np.exp(lc1) + x**eta / np.exp(lc2)
        return logQ + alpha * np.log(W) + np.log(denom)

    # rough initialization from the small-x asymptote at the median W
    x0_zeta, x0_eta = 2.0, 5.0
    med = wvals[len(wvals) // 2]
    sel = W == med
    slope, itc = np.polyfit(np.log(rho[sel] / med**alpha1_probe), logQ[sel], 1)
    x0_zeta = max(0.5, -slope)
    lc1_0 = itc + alpha1_probe * 0 + 1.75 * np.log(med)
    p0 = ([alpha1_probe, x0_zeta, max(x0_zeta + 2.0, x0_eta), lc1_0, lc1_0 - 5.0]
          if tie_alpha else
          [alpha1_probe, alpha1_probe, x0_zeta, max(x0_zeta + 2.0, x0_eta), lc1_0, lc1_0 - 5.0])
    sol = least_squares(resid, p0, method="lm", max_nfev=20000)
    if not sol.success and np.max(np.abs(sol.fun)) > 1.0:
        raise FitError(f"collapse fit did not converge: {sol.message}")
    alpha, alpha1, zeta, eta, lc1, lc2 = unpack(sol.x)
    if eta < zeta:  # asymptote labels swapped; re-express in canonical order
        zeta, eta = eta, zeta
        lc1, lc2 = lc2, lc1
    dof = max(len(logQ) - sol.x.size, 1)
    res_var = float(np.sum(sol.fun**2) / dof)
    try:
        cov = res_var * np.linalg.inv(sol.jac.T @ sol.jac)
        errs = np.sqrt(np.abs(np.diag(cov)))
    except np.linalg.LinAlgError:
        errs = np.full(sol.x.size, np.nan)
    names = (["alpha", "zeta", "eta", "log_c1", "log_c2"] if tie_alpha
             else ["alpha", "alpha1", "zeta", "eta", "log_c1", "log_c2"])
    return ScalingFit(
        alpha=float(alpha), alpha1=float(alpha1), zeta=float(zeta), eta=float(eta),
        c1=float(np.exp(lc1)), c2=float(np.exp(lc2)),
        uncertainties=dict(zip(names, errs.tolist())),
        residual=float(np.sqrt(np.mean(sol.fun**2))), tied_alpha=tie_alpha,
    )


def p_chaos_fixed_norm(L: float, norm: float, W: float, fit: ScalingFit,
                       L0: float) -> float:
    """Chaos probability at fixed total norm on a lattice of length L:

        P_ch ~ L^(1-zeta) N^zeta W^(alpha(1-zeta)) / (c1 L0).
    """
    zeta, alpha = fit.zeta, fit.alpha
    return float(L ** (1.0 - zeta) * norm**zeta * W ** (alpha * (1.0 - zeta))
                 / (fit.c1 * L0))
