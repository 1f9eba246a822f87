"""Disorder realizations, the Anderson lattice Hamiltonian, and mode geometry.

The linear problem is the 1D tight-binding chain

    (H psi)(x) = -J [psi(x+1) + psi(x-1)] + eps_x psi(x),

with i.i.d. on-site energies eps_x uniform on [-w/2, w/2].  All of its
eigenstates are exponentially localized; this module computes the spectrum,
the modes, their localization centers/lengths, and the four-mode overlap
sums that couple modes through the cubic nonlinearity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .errors import DiagonalizationError

BOUNDARIES = ("open", "periodic")


@dataclass(frozen=True)
class DisorderRealization:
    """One draw of the on-site potential, reproducible from (seed, L, w)."""

    seed: int
    L: int
    w: float
    epsilons: np.ndarray

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=np.float64)
        object.__setattr__(self, "epsilons", eps)
        if eps.shape != (self.L,):
            raise ValueError(f"expected {self.L} on-site energies, got shape {eps.shape}")
        half = 0.5 * self.w
        if self.w > 0 and (np.any(eps < -half) or np.any(eps > half)):
            raise ValueError("on-site energies outside [-w/2, w/2]")


@dataclass(frozen=True)
class ModelParams:
    """Lattice model parameters: hopping J, nonlinearity beta*|psi|^(2*sigma)."""

    J: float = 1.0
    beta: float = 0.0
    sigma: float = 1.0
    boundary: str = "open"

    def __post_init__(self):
        if self.J <= 0:
            raise ValueError("hopping J must be positive")
        if self.sigma <= 0:
            raise ValueError("nonlinearity exponent sigma must be positive")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")


def generate_disorder(seed: int, L: int, w: float) -> DisorderRealization:
    """Draw L i.i.d. uniform on-site energies on [-w/2, w/2].

    Pure function of (seed, L, w): the same arguments reproduce the same
    sequence bit-for-bit.
    """
    if L < 1:
        raise ValueError("lattice size L must be >= 1")
    if w < 0:
        raise ValueError("disorder width w must be >= 0")
    rng = np.random.default_rng(np.uint64(seed & (2**64 - 1)))
    eps = rng.uniform(-0.5 * w, 0.5 * w, size=L)
    if w == 0.0:
        eps = np.zeros(L)
    return DisorderRealization(seed=seed, L=L, w=w, epsilons=eps)


def save_realization(path, realization: DisorderRealization) -> None:
    """Write a realization as plain text: header + one energy per line."""
    with open(path, "w") as fh:
        fh.write(f"# seed={realization.seed} L={realization.L} w={realization.w!r}\n")
        for e in realization.epsilons:
            fh.write(f"{float(e)!r}\n")


def load_realization(path) -> DisorderRealization:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError("missing realization header line")
        fields = dict(tok.split("=") for tok in header[1:].split())
        eps = np.array([float(line) for line in fh if line.strip()])
    return DisorderRealization(
        seed=int(fields["seed"]), L=int(fields["L"]), w=float(fields["w"]), epsilons=eps
    )


@dataclass(frozen=True)
class AndersonHamiltonian:
    """Symmetric tridiagonal operator (plus corner couplings if periodic)."""

    diag: np.ndarray
    J: float
    boundary: str = "open"

    @property
    def L(self) -> int:
        return self.diag.shape[0]

    def to_dense(self) -> np.ndarray:
        L = self.L
        H = np.diag(self.diag.astype(np.float64))
        off = -self.J * np.ones(L - 1)
        H += np.diag(off, 1) + np.diag(off, -1)
        if self.boundary == "periodic" and L > 2:
            H[0, -1] += -self.J
            H[-1, 0] += -self.J
        return H

    def apply(self, psi: np.ndarray) -> np.ndarray:
        """Matrix-vector product, valid for real or complex psi."""
        out = self.diag * psi
        out[:-1] += -self.J * psi[1:]
        out[1:] += -self.J * psi[:-1]
        if self.boundary == "periodic" and self.L > 2:
            out[0] += -self.J * psi[-1]
            out[-1] += -self.J * psi[0]
        return out


def build_hamiltonian(realization: DisorderRealization, params: ModelParams) -> AndersonHamiltonian:
    """Assemble H with diagonal eps_x and hopping -J (sign of the kinetic term)."""
    if realization.L < 2:
        raise ValueError("need at least two sites for a hopping term")
    return AndersonHamiltonian(
        diag=realization.epsilons.copy(), J=params.J, boundary=params.boundary
    )


@dataclass(frozen=True)
class EigenSystem:
    """Full spectrum of the linear problem with mode geometry.

    `modes[:, n]` is the real orthonormal eigenvector u_n(x); energies are
    sorted ascending.  Centers are mean positions x_n = sum_x x*u_n(x)^2 and
    localization lengths come from a log-tail fit of |u_n| (inf for modes
    without a resolvable exponential tail, e.g. at w=0).
    """

    energies: np.ndarray
    modes: np.ndarray
    centers: np.ndarray
    loc_lengths: np.ndarray
    inverse_lengths: np.ndarray

    @property
    def L(self) -> int:
        return self.energies.shape[0]

    def mode(self, n: int) -> np.ndarray:
        return self.modes[:, n]


def _localization_length(u: np.ndarray, center: float) -> float:
    """-1/slope of a least-squares fit of ln|u| vs |x - x_n| on the tails."""
    x = np.arange(u.shape[0])
    d = np.abs(x - center)
    mask = (d > 2.0) & (np.abs(u) > 1e-12)
    if mask.sum() < 2:
        return np.inf
    slope = np.polyfit(d[mask], np.log(np.abs(u[mask])), 1)[0]
    if slope >= -1e-12:
        return np.inf
    return -1.0 / slope


def diagonalize(hamiltonian: AndersonHamiltonian) -> EigenSystem:
    """Full eigendecomposition with centers and localization lengths.

    Open chains use the tridiagonal solver; periodic chains fall back to the
    dense symmetric solver.
    """
    L = hamiltonian.L
    try:
        if hamiltonian.boundary == "open":
            off = -hamiltonian.J * np.ones(L - 1)
            energies, modes = sla.eigh_tridiagonal(hamiltonian.diag, off)
        else:
            energies, modes = sla.eigh(hamiltonian.to_dense())
    except np.linalg.LinAlgError as exc:  # pragma: no cover - rare LAPACK failure
        raise DiagonalizationError(
            f"eigensolver failed for L={L}, boundary={hamiltonian.boundary}: {exc}"
        ) from exc

    order = np.argsort(energies, kind="stable")
    energies = np.ascontiguousarray(energies[order])
    modes = np.ascontiguousarray(modes[:, order])

    x = np.arange(L)
    weights = modes**2
    centers = x @ weights
    loc_lengths = np.array(
        [_localization_length(modes[:, n], centers[n]) for n in range(L)]
    )
    with np.errstate(divide="ignore"):
        inverse_lengths = np.where(np.isfinite(loc_lengths), 1.0 / loc_lengths, 0.0)
    return EigenSystem(
        energies=energies,
        modes=modes,
        centers=centers,
        loc_lengths=loc_lengths,
        inverse_lengths=inverse_lengths,
    )


def overlap_sum(eig: EigenSystem, n: int, m1: int, m2: int, m3: int) -> float:
    """Exact four-mode overlap V = sum_x u_n u_m1 u_m2 u_m3.

    Symmetric under any permutation of the four indices; |V| <= 1 for
    orthonormal modes.
    """
    key = sorted((n, m1, m2, m3))
    U = eig.modes
    return float(np.sum(U[:, key[0]] * U[:, key[1]] * U[:, key[2]] * U[:, key[3]]))


@dataclass
class OverlapTable:
    """Overlap sums over a retained mode set, with a co-localization prefilter.

    Quadruples whose localization centers are mutually farther apart than
    `cutoff_multiple` times the larger localization length are skipped and
    reported as (approximate) zero; everything else is computed exactly and
    memoized under a permutation-canonical key.
    """

    eig: EigenSystem
    modes: tuple
    cutoff_multiple: float = 8.0
    policy: str = field(init=False)
    _values: dict = field(default_factory=dict, repr=False)
    _flags: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.modes = tuple(int(m) for m in self.modes)
        if len(set(self.modes)) != len(self.modes):
            raise ValueError("retained mode list contains duplicates")
        self.policy = f"center-distance prefilter at {self.cutoff_multiple} x xi"

    def _prefiltered(self, quad) -> bool:
        if not np.isfinite(self.cutoff_multiple):
            return False
        c = self.eig.centers[list(quad)]
        xi = self.eig.loc_lengths[list(quad)]
        xi = np.where(np.isfinite(xi), xi, self.eig.L)
        spread = c.max() - c.min()
        return bool(spread > self.cutoff_multiple * xi.max())

    def value(self, n: int, m1: int, m2: int, m3: int) -> float:
        quad = tuple(sorted((n, m1, m2, m3)))
        for m in quad:
            if m not in self._mode_set():
                raise KeyError(f"mode {m} not in the retained set")
        if quad in self._values:
            return self._values[quad]
        if self._prefiltered(quad):
            v, exact = 0.0, False
        else:
            v, exact = overlap_sum(self.eig, *quad), True
        self._values[quad] = v
        self._flags[quad] = exact
        return v

    def is_exact(self, n: int, m1: int, m2: int, m3: int) -> bool:
        quad = tuple(sorted((n, m1, m2, m3)))
        if quad not in self._flags:
            self.value(*quad)
        return self._flags[quad]

    def _mode_set(self):
        if not hasattr(self, "_modeset_cache"):
            self._modeset_cache = frozenset(self.modes)
        return self._modeset_cache

    def submatrix(self) -> np.ndarray:
        """Mode matrix restricted to the retained set, shape (L, M)."""
        return self.eig.modes[:, list(self.modes)]


def build_overlap_table(
    eig: EigenSystem, modes, cutoff_multiple: float = 8.0
) -> OverlapTable:
    return OverlapTable(eig=eig, modes=tuple(modes), cutoff_multiple=cutoff_multiple)


def modes_near(eig: EigenSystem, x0: float, radius: float) -> np.ndarray:
    """Indices of modes whose localization centers lie within `radius` of x0."""
    return np.nonzero(np.abs(eig.centers - x0) <= radius)[0]
