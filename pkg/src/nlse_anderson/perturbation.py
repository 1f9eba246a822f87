"""Renormalized time-dependent perturbation expansion in the nonlinearity.

Starting from a single linear mode (c_n(0) = delta_{n,n0}) the mode
amplitudes are expanded as c_n = sum_k beta^k c_n^(k) + Q_n, with phases
carried by renormalized energies E'_n = E_n + beta E_n^(1) + ... that are
never expanded in beta.  The energy corrections are fixed by requiring
that no time-independent (secular) term survives on the right-hand side of
any order's equation, so every c_n^(k) stays bounded; a term counts as
secular only when its total phase vanishes identically as a combination of
mode energies, never by a numeric near-zero test (accidental small
denominators are a different problem and are left alone).

Determination schedule for the corrections (cubic nonlinearity):

  E^(1)_n0 = V(n0,n0,n0,n0)            cancels the order-1 constant
  E^(1)_n  = 2 V(n,n0,n,n0), n != n0   cancels the order-2 constants
  E^(2)_n0 = -3 sum_m V(m,n0,n0,n0)^2 / (E'_m - E'_n0)

Higher corrections have no closed form at reasonable cost: processing
order k >= 3 first integrates that order with the new corrections set to
zero, reads the residual secular constant off the linear trend of
c_n^(k)(t), and solves for E^(k)_n0 and E^(k-1)_{n != n0} before the
production pass.  The final-order corrections for n != n0 lie beyond the
truncation and stay zero.

Each order is integrated on a fine grid with the linear phase handled
exactly within every step (exponential trapezoidal rule in the frame of
the packet carrier E'_n0), and the linearized remainder equation

    i dQ_n/dt = W_n(t) + sum_m M_nm(t) Q_m + sum_m Mbar_nm(t) Q_m^*

is co-integrated to produce ||Q_lin||_2(t), whose first crossing of 0.1
defines the validity horizon t*.  W, M, Mbar are obtained by substituting
c = c~ + Q into the full equation and collecting the Q-independent
residual and the terms linear in Q, Q^*.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.stats import normaltest

from .disorder import EigenSystem, OverlapTable
from .errors import FitError, NumericalFailure
from .seeding import derive_seed

_DC1_FLOOR = 1e-12


@dataclass
class ExpansionState:
    """Order-by-order coefficients, energy corrections, and the remainder."""

    order: int
    beta: float
    modes: tuple
    n0: int
    t_grid: np.ndarray
    coeffs: np.ndarray              # (order+1, M, T) complex c_n^(k) at checkpoints
    energy_corrections: np.ndarray  # (order, M) real; row l-1 holds E^(l)
    renormalized: np.ndarray        # E'_n on the retained set
    bare: np.ndarray                # E_n on the retained set
    assembled: np.ndarray           # (M, T) complex, c~ = sum_k beta^k c^(k)
    remainder: np.ndarray           # (M, T) complex, Q_lin at checkpoints
    w_series: np.ndarray            # (M, T) complex, remainder inhomogeneity (bare frame)
    field_series: np.ndarray        # (L, T) complex, truncated field psi~(x, t)
    qnorm_times: np.ndarray
    qnorm: np.ndarray               # ||Q_lin||_2 on the dense subsample
    qmag: np.ndarray                # (M, Tq) per-mode |Q_lin|
    h: float
    secular_cancellation: bool
    modes_matrix: np.ndarray = None  # (L, M) retained eigenvectors
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    @property
    def n0_local(self) -> int:
        return self.modes.index(self.n0)


def _phi_weights(theta: np.ndarray):
    """w1 = int_0^1 e^{i th s} ds, w2 = int_0^1 s e^{i th s} ds (stable at 0)."""
    theta = np.asarray(theta, dtype=np.float64)
    z = 1j * theta
    small = np.abs(theta) < 1e-4
    zs = np.where(small, 1.0, z)  # avoid 0/0 in the vectorized branch
    ez = np.exp(z)
    w1 = np.where(small, 1.0 + z / 2.0 + z**2 / 6.0 + z**3 / 24.0, (ez - 1.0) / zs)
    w2 = np.where(small, 0.5 + z / 3.0 + z**2 / 8.0 + z**3 / 30.0,
                  (ez * (z - 1.0) + 1.0) / zs**2)
    return w1, w2


class _Expander:
    """Integration engine shared by the secular-fit and production passes."""

    def __init__(self, eig: EigenSystem, overlaps: OverlapTable, beta: float,
                 order: int, n0: int, h: float, secular_cancellation: bool = True):
        if n0 not in overlaps.modes:
            raise KeyError(f"initial mode {n0} is not in the retained set")
        if order < 0:
            raise ValueError("order must be >= 0")
        self.eig = eig
        self.overlaps = overlaps
        self.beta = float(beta)
        self.order = int(order)
        self.h = float(h)
        self.modes = list(overlaps.modes)
        self.M = len(self.modes)
        self.i0 = self.modes.index(n0)
        self.n0 = n0
        self.U = np.ascontiguousarray(overlaps.submatrix())
        self.E0 = eig.energies[self.modes].copy()
        self.cancel = bool(secular_cancellation)
        # overlap entries entering the closed-form corrections
        self.V_cross = np.array([overlaps.value(m, n0, m, n0) for m in self.modes])
        self.V_first = np.array([overlaps.value(m, n0, n0, n0) for m in self.modes])
        self.Ecorr = np.zeros((self.order, self.M)) if self.order else np.zeros((0, self.M))
        self.diagnostics = {}

    # ----- energy bookkeeping

    def renormalized(self) -> np.ndarray:
        Ep = self.E0.copy()
        if self.cancel:
            for l in range(1, self.Ecorr.shape[0] + 1):
                Ep = Ep + self.beta**l * self.Ecorr[l - 1]
        return Ep

    def dc1(self) -> np.ndarray:
        """Constant part of c^(1): V(m,n0,n0,n0)/(E'_m - E'_n0), zero at n0."""
        Ep = self.renormalized()
        delta = Ep - Ep[self.i0]
        out = np.zeros(self.M)
        safe = np.abs(delta) > 0
        out[safe] = self.V_first[safe] / delta[safe]
        out[self.i0] = 0.0
        return out

    def set_low_order_corrections(self):
        if not self.cancel or self.order < 1:
            return
        E1 = 2.0 * self.V_cross.copy()
        E1[self.i0] = self.V_cross[self.i0]
        self.Ecorr[0] = E1
        if self.order >= 2:
            u = self.dc1()
            contrib = self.V_first * u
            contrib[self.i0] = 0.0
            self.Ecorr[1, self.i0] = -3.0 * float(np.sum(contrib))

    def fit_higher_corrections(self, fit_t_end: float, fit_stride: int = 0):
        """Two-pass determination of E^(k)_n0 and E^(k-1)_{n != n0}, k >= 3."""
        if not self.cancel:
            return
        if fit_stride <= 0:
            fit_stride = max(1, int(round(fit_t_end / self.h)) // 512)
        for k in range(3, self.order + 1):
            res = self.integrate(k, fit_t_end, sample_stride=fit_stride)
            ts, cs = res["samples"]
            if ts.size < 8:
                raise FitError("secular-fit window too short for a trend estimate")
            tc = ts - ts.mean()
            denom = float(np.sum(tc * tc))
            sigma = (tc @ (cs - cs.mean(axis=0))) / denom  # complex slope per mode
            ek = 1j * sigma
            self.Ecorr[k - 1, self.i0] = float(ek[self.i0].real)
            u = self.dc1()
            mask = (np.abs(u) > _DC1_FLOOR)
            mask[self.i0] = False
            corr = np.zeros(self.M)
            corr[mask] = (ek[mask] / u[mask]).real
            self.Ecorr[k - 2, mask] = corr[mask]
            self.diagnostics[f"secular_fit_order_{k}"] = {
                "imag_residual_n0": float(abs(ek[self.i0].imag)),
                "max_imag_residual": float(np.max(np.abs((ek[mask] / u[mask]).imag)))
                if mask.any() else 0.0,
                "window": (0.0, float(fit_t_end)),
            }

    # ----- integration

    def _order_envelopes(self, Phi, b, Ecorr, K, car_plus):
        """gamma_k = -i e^{+i carrier t} (g_k - sum_l E^(l) b_{k-l}) for k=1..K.

        Phi holds the per-order real-space fields; computed incrementally by
        the caller when advancing, so this is only used at t = 0.
        """
        gam = np.empty((K, self.M), dtype=np.complex128)
        for k in range(1, K + 1):
            acc = np.zeros(self.U.shape[0], dtype=np.complex128)
            for r in range(0, k):
                rem = k - 1 - r
                for s in range(0, rem + 1):
                    acc += np.conj(Phi[:, r]) * Phi[:, s] * Phi[:, rem - s]
            gk = self.U.T @ acc
            for l in range(1, min(k, Ecorr.shape[0]) + 1):
                gk = gk - Ecorr[l - 1] * b[k - l]
            gam[k - 1] = -1j * car_plus * gk
        return gam

    def _w_field(self, b, gam, bpow, Ep, t):
        """Truncated field psi~, |psi~|^2, and remainder inhomogeneity W (bare frame).

        W = (E - E') b~ + beta * cubic(b~) - i e^{-i carrier t} sum_k beta^k gamma_k.
        """
        btil = bpow @ b
        F = self.U @ btil
        rho = F.real * F.real + F.imag * F.imag
        W = (self.E0 - Ep) * btil + self.beta * (self.U.T @ (rho * F))
        if gam.shape[0]:
            gsum = bpow[1:] @ gam
            W = W - 1j * np.exp(-1j * Ep[self.i0] * t) * gsum
        return F, rho, W

    def integrate(self, K: int, t_end: float, *, checkpoints=None,
                  sample_stride: int = 0, with_remainder: bool = False,
                  qnorm_stride: int = 0):
        """March orders 0..K (optionally plus the remainder) to t_end."""
        h = self.h
        nsteps = max(1, int(round(t_end / h)))
        Ecorr = self.Ecorr if self.cancel else np.zeros_like(self.Ecorr)
        Ep = self.renormalized()
        carrier = Ep[self.i0]
        prop = np.exp(-1j * Ep * h)
        w1, w2 = _phi_weights((Ep - carrier) * h)
        wa = w1 - w2
        propq = np.exp(-1j * self.E0 * h)
        w1q, w2q = _phi_weights((self.E0 - carrier) * h)
        waq = w1q - w2q
        bpow = self.beta ** np.arange(K + 1)

        b = np.zeros((K + 1, self.M), dtype=np.complex128)
        b[0, self.i0] = 1.0
        Phi = np.zeros((self.U.shape[0], K + 1), dtype=np.complex128)
        Phi[:, 0] = self.U[:, self.i0]
        gam = self._order_envelopes(Phi, b, Ecorr, K, 1.0)

        q = np.zeros(self.M, dtype=np.complex128)
        if with_remainder:
            F, rho, W = self._w_field(b, gam, bpow, Ep, 0.0)
            gamq = -1j * W  # q = 0 at t = 0, carrier phase = 1
        qnorm_t, qnorm_v, qmag_v = [], [], []

        cp_steps = {}
        if checkpoints is not None:
            for tc in checkpoints:
                cp_steps[int(round(tc / h))] = float(tc)
        cp_c = {}
        cp_q = {}
        cp_w = {}
        cp_f = {}

        def record_checkpoint(step, t):
            rot = np.exp(1j * Ep * t)
            cp_c[t] = b * rot[None, :]
            if with_remainder:
                cp_q[t] = q * rot
                Ft, _, Wt = self._w_field(b, gam, bpow, Ep, t)
                cp_w[t] = Wt
                cp_f[t] = Ft

        if 0 in cp_steps:
            record_checkpoint(0, 0.0)

        samples, sample_t = [], []
        Lx = self.U.shape[0]
        acc = np.empty(Lx, dtype=np.complex128)
        tmp = np.empty(Lx, dtype=np.complex128)
        b_new = np.zeros_like(b)
        for step in range(1, nsteps + 1):
            t_old = (step - 1) * h
            t_new = step * h
            car_old = np.exp(-1j * carrier * t_old)
            car_plus_new = np.exp(1j * carrier * t_new)

            b_new[:] = 0.0
            b_new[0, self.i0] = np.exp(-1j * Ep[self.i0] * t_new)
            np.multiply(self.U[:, self.i0], b_new[0, self.i0], out=Phi[:, 0])
            for k in range(1, K + 1):
                acc[:] = 0.0
                for r in range(0, k):
                    rem = k - 1 - r
                    np.conj(Phi[:, r], out=tmp)
                    for s in range(0, rem + 1):
                        acc += tmp * Phi[:, s] * Phi[:, rem - s]
                gk = self.U.T @ acc
                for l in range(1, min(k, Ecorr.shape[0]) + 1):
                    gk -= Ecorr[l - 1] * b_new[k - l]
                gam_new = (-1j * car_plus_new) * gk
                b_new[k] = prop * (b[k] + (car_old * h) * (gam[k - 1] * wa + gam_new * w2))
                gam[k - 1] = gam_new
                Phi[:, k] = self.U @ b_new[k]
            b, b_new = b_new, b

            if with_remainder:
                F, rho, W = self._w_field(b, gam, bpow, Ep, t_new)
                gq_old = gamq
                q_new = propq * (q + (car_old * h) * (gq_old * w1q))  # predictor
                Uq = self.U @ q_new
                coup = self.U.T @ (2.0 * rho * Uq + (F * F) * np.conj(Uq))
                gq_new = (-1j * car_plus_new) * (W + self.beta * coup)
                q = propq * (q + (car_old * h) * (gq_old * waq + gq_new * w2q))
                gamq = gq_new
                if qnorm_stride and (step % qnorm_stride == 0 or step == nsteps):
                    qnorm_t.append(t_new)
                    qnorm_v.append(float(np.linalg.norm(q)))
                    qmag_v.append(np.abs(q))

            if sample_stride and step % sample_stride == 0:
                samples.append(b[K] * np.exp(1j * Ep * t_new))
                sample_t.append(t_new)
            if step in cp_steps:
                record_checkpoint(step, cp_steps[step])
            if (step & 255) == 0 or step == nsteps:
                if not np.all(np.isfinite(b.view(np.float64))):
                    raise NumericalFailure("expansion integration overflowed", t=t_new)
                if with_remainder and not np.all(np.isfinite(q.view(np.float64))):
                    raise NumericalFailure("remainder integration overflowed", t=t_new)

        return {
            "cp_c": cp_c, "cp_q": cp_q, "cp_w": cp_w, "cp_f": cp_f,
            "samples": (np.asarray(sample_t), np.asarray(samples)),
            "qnorm": (np.asarray(qnorm_t), np.asarray(qnorm_v),
                      np.asarray(qmag_v).T if qmag_v else np.zeros((self.M, 0))),
            "Ep": Ep,
        }


def expand(eig: EigenSystem, overlaps: OverlapTable, beta: float, order: int,
           t_grid, *, n0: int | None = None, h: float = 0.02,
           fit_t_end: float | None = None, secular_cancellation: bool = True,
           qnorm_stride: int = 0) -> ExpansionState:
    """Compute the renormalized expansion with remainder control.

    `t_grid` lists the checkpoint times at which coefficients are stored
    (snapped to the fine step `h`).  `n0` defaults to the retained mode
    with the largest weight at the center of the retained set.  Secular
    cancellation can be disabled as a negative control; coefficients then
    grow linearly in time.
    """
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    if np.any(t_grid < 0):
        raise ValueError("t_grid times must be >= 0")
    t_end = float(t_grid.max())
    if n0 is None:
        centers = eig.centers[list(overlaps.modes)]
        mid = float(np.median(centers))
        weights = np.abs(eig.modes[int(round(mid)), list(overlaps.modes)])
        n0 = overlaps.modes[int(np.argmax(weights))]

    ex = _Expander(eig, overlaps, beta, order, n0, h,
                   secular_cancellation=secular_cancellation)
    ex.set_low_order_corrections()
    if order >= 3 and secular_cancellation:
        window = min(t_end, 400.0) if fit_t_end is None else min(fit_t_end, t_end)
        ex.fit_higher_corrections(window)

    checkpoints = np.unique(np.round(t_grid / h).astype(np.int64)) * h
    if qnorm_stride <= 0:
        qnorm_stride = max(1, int(round(t_end / h)) // 2048)
    res = ex.integrate(order, t_end, checkpoints=checkpoints,
                       with_remainder=True, qnorm_stride=qnorm_stride)

    times = np.array(sorted(res["cp_c"].keys()))
    M = ex.M
    coeffs = np.empty((order + 1, M, times.size), dtype=np.complex128)
    for j, t in enumerate(times):
        coeffs[:, :, j] = res["cp_c"][t]
    bpow = beta ** np.arange(order + 1)
    assembled = np.tensordot(bpow, coeffs, axes=(0, 0))
    remainder = np.stack([res["cp_q"][t] for t in times], axis=1) if res["cp_q"] else np.zeros((M, times.size), dtype=np.complex128)
    w_series = np.stack([res["cp_w"][t] for t in times], axis=1) if res["cp_w"] else np.zeros((M, times.size), dtype=np.complex128)
    field_series = np.stack([res["cp_f"][t] for t in times], axis=1) if res["cp_f"] else np.zeros((ex.U.shape[0], times.size), dtype=np.complex128)
    qt, qv, qm = res["qnorm"]

    return ExpansionState(
        order=order, beta=float(beta), modes=tuple(ex.modes), n0=int(n0),
        t_grid=times, coeffs=coeffs,
        energy_corrections=ex.Ecorr.copy(),
        renormalized=res["Ep"], bare=ex.E0.copy(),
        assembled=assembled, remainder=remainder, w_series=w_series,
        field_series=field_series,
        qnorm_times=qt, qnorm=qv, qmag=qm, h=h,
        secular_cancellation=secular_cancellation,
        modes_matrix=ex.U.copy(),
        diagnostics=dict(ex.diagnostics),
    )


def assemble(expansion: ExpansionState, eig: EigenSystem, beta: float, t: float) -> np.ndarray:
    """Real-space truncated solution psi~(x, t) at a stored checkpoint."""
    if abs(beta - expansion.beta) > 0:
        raise ValueError("beta differs from the expansion's beta")
    tg = expansion.t_grid
    if t < tg[0] - 0.5 * expansion.h or t > tg[-1] + 0.5 * expansion.h:
        raise ValueError(f"t={t} outside the computed grid [{tg[0]}, {tg[-1]}]")
    j = int(np.argmin(np.abs(tg - t)))
    if abs(tg[j] - t) > 0.51 * expansion.h:
        raise ValueError(f"t={t} does not match a stored checkpoint")
    ct = expansion.assembled[:, j]
    phases = np.exp(-1j * expansion.renormalized * tg[j])
    U = eig.modes[:, list(expansion.modes)]
    return U @ (ct * phases)


@dataclass
class RemainderOperator:
    """W_n(t), M_nm(t), Mbar_nm(t) of the linearized remainder equation.

    Sampled on the expansion's checkpoint grid.  `w_bare` and the couplings
    built from the stored field are in the bare-mode frame; accessors expose
    the rotating-frame matrices of the textbook form.  All pieces vanish
    identically at beta = 0.
    """

    times: np.ndarray
    bare: np.ndarray
    renormalized: np.ndarray
    carrier: float
    beta: float
    w_bare: np.ndarray               # (M, T)
    field: np.ndarray | None         # (L, T) truncated field, None = no coupling
    modes_matrix: np.ndarray | None  # (L, M)

    def w_rotating(self) -> np.ndarray:
        return np.exp(1j * np.outer(self.renormalized, self.times)) * self.w_bare

    def coupling_bare(self, j: int) -> np.ndarray:
        M = self.bare.shape[0]
        if self.field is None or self.beta == 0.0:
            return np.zeros((M, M), dtype=np.complex128)
        U = self.modes_matrix
        f2 = np.abs(self.field[:, j]) ** 2
        return 2.0 * self.beta * ((U.T * f2[None, :]) @ U).astype(np.complex128)

    def conjugate_coupling_bare(self, j: int) -> np.ndarray:
        M = self.bare.shape[0]
        if self.field is None or self.beta == 0.0:
            return np.zeros((M, M), dtype=np.complex128)
        U = self.modes_matrix
        return self.beta * ((U.T * (self.field[:, j] ** 2)[None, :]) @ U)

    def coupling(self, j: int) -> np.ndarray:
        """Rotating-frame M_nm(t_j), including the diagonal E_n - E'_n shift."""
        t = self.times[j]
        ph = np.exp(1j * self.renormalized * t)
        out = ph[:, None] * self.coupling_bare(j) * np.conj(ph)[None, :]
        out = out + np.diag(self.bare - self.renormalized).astype(np.complex128)
        return out

    def conjugate_coupling(self, j: int) -> np.ndarray:
        """Rotating-frame Mbar_nm(t_j)."""
        t = self.times[j]
        ph = np.exp(1j * self.renormalized * t)
        return ph[:, None] * self.conjugate_coupling_bare(j) * ph[None, :]


def remainder_operator(expansion: ExpansionState, beta: float) -> RemainderOperator:
    if abs(beta - expansion.beta) > 0:
        raise ValueError("beta differs from the expansion's beta")
    has_field = expansion.field_series.size > 0
    return RemainderOperator(
        times=expansion.t_grid.copy(),
        bare=expansion.bare.copy(),
        renormalized=expansion.renormalized.copy(),
        carrier=float(expansion.renormalized[expansion.n0_local]),
        beta=float(beta),
        w_bare=expansion.w_series.copy(),
        field=expansion.field_series.copy() if has_field else None,
        modes_matrix=expansion.modes_matrix.copy() if has_field else None,
    )


def remainder_evolve(op: RemainderOperator, t_grid=None, modes_matrix: np.ndarray | None = None):
    """Integrate the linear remainder equation on the operator's grid.

    Q(0) = 0.  Returns (times, Q (M, T) bare-frame, ||Q||_2 (T,)).  The
    accuracy is set by the operator's sampling; the co-integrated remainder
    inside `expand` uses the fine internal grid and is the production path.
    """
    times = op.times if t_grid is None else np.asarray(t_grid, dtype=float)
    if t_grid is not None and not np.allclose(times, op.times):
        raise ValueError("t_grid must match the operator's stored grid")
    U = modes_matrix if modes_matrix is not None else op.modes_matrix
    if op.field is not None and U is None:
        raise ValueError("modes_matrix required to apply the stored-field coupling")
    M, T = op.w_bare.shape
    q = np.zeros(M, dtype=np.complex128)
    out = np.zeros((M, T), dtype=np.complex128)
    norms = np.zeros(T)

    def gamma(j, qv):
        acc = op.w_bare[:, j].astype(np.complex128).copy()
        if op.field is not None and op.beta != 0.0:
            Uq = U @ qv
            f = op.field[:, j]
            acc = acc + 2.0 * op.beta * (U.T @ ((np.abs(f) ** 2) * Uq))
            acc = acc + op.beta * (U.T @ ((f * f) * np.conj(Uq)))
        return -1j * np.exp(1j * op.carrier * times[j]) * acc

    g_old = gamma(0, q)
    for j in range(1, T):
        hstep = times[j] - times[j - 1]
        if hstep <= 0:
            raise ValueError("operator grid times must be strictly increasing")
        propq = np.exp(-1j * op.bare * hstep)
        w1q, w2q = _phi_weights((op.bare - op.carrier) * hstep)
        waq = w1q - w2q
        car_old = np.exp(-1j * op.carrier * times[j - 1])
        q_new = propq * (q + car_old * hstep * (g_old * (waq + w2q)))
        for _ in range(2):
            g_new = gamma(j, q_new)
            q_new = propq * (q + car_old * hstep * (g_old * waq + g_new * w2q))
        q = q_new
        g_old = g_new
        if not np.all(np.isfinite(q.view(np.float64))):
            raise NumericalFailure("remainder integration overflowed", t=float(times[j]))
        out[:, j] = q
        norms[j] = float(np.linalg.norm(q))
    return times, out, norms


@dataclass
class TStarResult:
    t_star: float
    extrapolated: bool
    crossed: bool
    degenerate: bool = False
    slope: float | None = None
    threshold: float = 0.1


def t_star(times, norm_series, threshold: float = 0.1, tail_fraction: float = 0.25,
           allow_extrapolation: bool = True) -> TStarResult:
    """First crossing of ||Q_lin||_2 = threshold, or a linear extrapolation.

    If the window never reaches the threshold, the tail (last
    `tail_fraction` of the samples) must be monotone increasing; a linear
    fit then extrapolates the crossing, flagged as such.  A norm that is
    identically zero yields t* = inf, flagged degenerate.
    """
    times = np.asarray(times, dtype=float)
    ns = np.asarray(norm_series, dtype=float)
    if times.size != ns.size or times.size < 2:
        raise ValueError("need matching time/norm series with >= 2 samples")
    if np.all(ns < 1e-300):
        return TStarResult(t_star=np.inf, extrapolated=False, crossed=False,
                           degenerate=True, threshold=threshold)
    above = np.nonzero(ns >= threshold)[0]
    if above.size:
        j = int(above[0])
        if j == 0:
            return TStarResult(float(times[0]), False, True, threshold=threshold)
        t0, t1 = times[j - 1], times[j]
        v0, v1 = ns[j - 1], ns[j]
        frac = (threshold - v0) / (v1 - v0) if v1 > v0 else 1.0
        return TStarResult(float(t0 + frac * (t1 - t0)), False, True, threshold=threshold)
    if not allow_extrapolation:
        return TStarResult(np.nan, False, False, threshold=threshold)
    ntail = max(2, int(np.ceil(times.size * tail_fraction)))
    tt, vv = times[-ntail:], ns[-ntail:]
    if np.any(np.diff(vv) < -1e-12 * max(vv.max(), 1e-300)):
        raise FitError("norm series tail is not monotone; refusing extrapolation")
    slope, intercept = np.polyfit(tt, vv, 1)
    if slope <= 0:
        raise FitError("norm series tail has nonpositive slope; cannot extrapolate")
    ts = (threshold - intercept) / slope
    return TStarResult(float(ts), True, False, slope=float(slope), threshold=threshold)


@dataclass
class DominantModeSubtraction:
    subtracted: tuple
    qnorm_times: np.ndarray
    qnorm: np.ndarray
    tstar: TStarResult
    baseline_tstar: TStarResult


def subtract_dominant_modes(expansion: ExpansionState, count: int,
                            threshold: float = 0.1) -> DominantModeSubtraction:
    """Drop the `count` largest remainder contributors and recompute t*.

    Modes are ranked by their time-averaged |Q_lin_n| (the dominant ones sit
    near the initial site); removing them from the norm extends the
    validity window.  count may equal the retained-set size, in which case
    the norm is identically zero and t* is flagged degenerate.
    """
    M = expansion.n_modes
    if count < 0 or count > M:
        raise ValueError(f"count must be in [0, {M}]")
    if expansion.qmag.size == 0:
        raise ValueError("expansion carries no remainder samples")
    base = t_star(expansion.qnorm_times, expansion.qnorm, threshold=threshold)
    ranking = np.argsort(expansion.qmag.mean(axis=1))[::-1]
    drop = ranking[:count]
    keep = np.ones(M, dtype=bool)
    keep[drop] = False
    sub_norm = np.sqrt(np.sum(expansion.qmag[keep] ** 2, axis=0))
    ts = t_star(expansion.qnorm_times, sub_norm, threshold=threshold)
    return DominantModeSubtraction(
        subtracted=tuple(int(expansion.modes[i]) for i in drop),
        qnorm_times=expansion.qnorm_times.copy(), qnorm=sub_norm,
        tstar=ts, baseline_tstar=base,
    )


@dataclass
class SmallDenominatorStats:
    l: int
    s: float
    n_samples: int
    estimate: float
    ci: tuple
    running_mean: np.ndarray
    normality_pvalue: float | None
    normal_at_5pct: bool | None
    diverged: bool
    f_samples: np.ndarray


def small_denominator_stats(l: int, s: float, w: float, n_samples: int,
                            master_seed: int, *, L: int = 64, J: float = 1.0,
                            coefficient_sampler=None,
                            normality_subsample: int = 500) -> SmallDenominatorStats:
    """Monte-Carlo statistics of f_l = sum_i c_i E_i over disorder draws.

    E_i are `l` distinct eigenvalues (uniformly chosen indices) of the
    linear chain per realization; c_i come from `coefficient_sampler(rng,
    l)` (default: all ones).  Reports the running estimate of <|f_l|^-s>
    with a CLT confidence interval and, for the standardized f_l, a
    normality test at 5%.
    """
    if not (0.0 < s < 1.0):
        raise ValueError("s must lie in (0, 1)")
    if l < 1 or l > L:
        raise ValueError("need 1 <= l <= L")
    if coefficient_sampler is None:
        coefficient_sampler = lambda rng, m: np.ones(m)
    f_vals = np.empty(n_samples)
    off = -J * np.ones(L - 1)
    for i in range(n_samples):
        seed = derive_seed(master_seed, i)
        rng = np.random.default_rng(np.uint64(seed))
        eps = rng.uniform(-0.5 * w, 0.5 * w, size=L)
        energies = eigh_tridiagonal(eps, off, eigvals_only=True)
        idx = rng.choice(L, size=l, replace=False)
        coeff = np.asarray(coefficient_sampler(rng, l), dtype=float)
        f_vals[i] = float(np.dot(coeff, energies[idx]))
    g = np.abs(f_vals) ** (-s)
    running = np.cumsum(g) / np.arange(1, n_samples + 1)
    est = float(running[-1])
    se = float(np.std(g, ddof=1) / np.sqrt(n_samples))
    ci = (est - 1.96 * se, est + 1.96 * se)
    half = running[n_samples // 2 :]
    diverged = bool(np.max(half) - np.min(half) > 0.5 * abs(est))
    pval = None
    normal = None
    if l >= 2 and n_samples >= 64:
        sub = f_vals[: min(normality_subsample, n_samples)]
        z = (sub - sub.mean()) / sub.std(ddof=1)
        pval = float(normaltest(z).pvalue)
        normal = bool(pval > 0.05)
    return SmallDenominatorStats(
        l=l, s=s, n_samples=n_samples, estimate=est, ci=ci, running_mean=running,
        normality_pvalue=pval, normal_at_5pct=normal, diverged=diverged,
        f_samples=f_vals,
    )
