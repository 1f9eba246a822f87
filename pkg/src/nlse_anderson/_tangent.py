"""Compiled tangent-space split-step for Lyapunov spectra on periodic rings.

The state advances with the same local/kinetic/local composition as the
production integrator; each tangent vector is propagated by the exact
linearization of that map.  The nonlinear coupling makes the tangent map
only real-linear (it involves delta psi*), so orthonormalization uses the
real inner product Re<u, v>, i.e. modified Gram-Schmidt on the underlying
real 2L-dimensional tangent space.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _local_half(psi, tang, eps_half, hb):
    L = psi.shape[0]
    n_exp = tang.shape[0]
    for x in range(L):
        p = psi[x]
        a2 = p.real * p.real + p.imag * p.imag
        th = eps_half[x] + hb * a2
        rot = complex(np.cos(th), -np.sin(th))
        for i in range(n_exp):
            v = tang[i, x]
            dth = 2.0 * hb * (p.real * v.real + p.imag * v.imag)
            tang[i, x] = rot * (v - 1j * p * dth)
        psi[x] = rot * p
    return 0


@numba.njit(cache=True)
def _renormalize(tang, logs):
    """Real-inner-product MGS; adds log norms to `logs`."""
    n_exp, L = tang.shape
    for i in range(n_exp):
        nrm2 = 0.0
        for x in range(L):
            v = tang[i, x]
            nrm2 += v.real * v.real + v.imag * v.imag
        nrm = np.sqrt(nrm2)
        logs[i] += np.log(nrm)
        inv = 1.0 / nrm
        for x in range(L):
            tang[i, x] = tang[i, x] * inv
        for j in range(i + 1, n_exp):
            dot = 0.0
            for x in range(L):
                u = tang[i, x]
                v = tang[j, x]
                dot += u.real * v.real + u.imag * v.imag
            for x in range(L):
                tang[j, x] = tang[j, x] - dot * tang[i, x]
    return 0


@numba.njit(cache=True)
def run_tangent(psi, tang, eps_half, hb, Uk, renorm_interval, sample_steps,
                logs, running):
    """Advance with tangent vectors; record running max exponents.

    `sample_steps` are the (sorted) step counts at which the current
    running exponents lambda_i = logs_i / t are stored into `running`
    (shape (len(sample_steps), n_exp)).  Returns 0, or 1 on overflow.
    """
    n_exp = tang.shape[0]
    nsteps = sample_steps[-1]
    si = 0
    for step in range(1, nsteps + 1):
        _local_half(psi, tang, eps_half, hb)
        psi[:] = np.dot(Uk, psi)
        for i in range(n_exp):
            tang[i, :] = np.dot(Uk, tang[i])
        _local_half(psi, tang, eps_half, hb)
        take_sample = si < sample_steps.shape[0] and step == sample_steps[si]
        if step % renorm_interval == 0 or take_sample or step == nsteps:
            _renormalize(tang, logs)
            for i in range(n_exp):
                if not np.isfinite(logs[i]):
                    return 1
        if take_sample:
            for i in range(n_exp):
                running[si, i] = logs[i]
            si += 1
    return 0
