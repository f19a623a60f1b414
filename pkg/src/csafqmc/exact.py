"""Exact statevector tools: sector bases, ground states, expectations, overlaps.

These double as the contextual-subspace solver and as the ground-truth oracle
for the Monte Carlo code at desk scale.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, DimensionError
from .pauli import PauliOperator, popcount

log = logging.getLogger(__name__)

DENSE_LIMIT = 1024
DEGENERACY_GAP = 1e-6


@dataclass(frozen=True)
class StateVector:
    """Amplitudes over computational basis states.

    With ``basis=None`` the amplitude array covers all ``2**n_qubits`` states.
    Otherwise ``basis`` is a sorted array of basis-state integers and
    ``amplitudes[i]`` belongs to ``basis[i]``; this keeps large particle-sector
    states cheap.
    """

    n_qubits: int
    amplitudes: np.ndarray
    basis: np.ndarray | None = None

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128).ravel()
        object.__setattr__(self, "amplitudes", amps)
        if self.basis is None:
            if len(amps) != 1 << self.n_qubits:
                raise DimensionError(f"expected {1 << self.n_qubits} amplitudes, got {len(amps)}")
        else:
            b = np.asarray(self.basis, dtype=np.uint64).ravel()
            if len(b) != len(amps):
                raise DimensionError("basis and amplitudes differ in length")
            if len(b) > 1 and np.any(np.diff(b.astype(np.int64)) <= 0):
                order = np.argsort(b)
                b, amps = b[order], amps[order]
                if np.any(np.diff(b.astype(np.int64)) == 0):
                    raise ValueError("duplicate basis states")
                object.__setattr__(self, "amplitudes", amps)
            object.__setattr__(self, "basis", b)

    @classmethod
    def basis_state(cls, n_qubits: int, index: int) -> "StateVector":
        return cls(n_qubits, [1.0], [index])

    @classmethod
    def from_dict(cls, n_qubits: int, terms: dict[int, complex]) -> "StateVector":
        keys = sorted(terms)
        return cls(n_qubits, [terms[k] for k in keys], keys)

    @property
    def states(self) -> np.ndarray:
        if self.basis is None:
            return np.arange(1 << self.n_qubits, dtype=np.uint64)
        return self.basis

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        n = self.norm()
        if n == 0:
            raise ValueError("cannot normalize the zero vector")
        return StateVector(self.n_qubits, self.amplitudes / n, self.basis)

    def to_dense(self) -> np.ndarray:
        if self.basis is None:
            return self.amplitudes.copy()
        if self.n_qubits > 26:
            raise DimensionError("refusing to densify more than 26 qubits")
        out = np.zeros(1 << self.n_qubits, dtype=np.complex128)
        out[self.basis.astype(np.int64)] = self.amplitudes
        return out

    def as_dict(self, tol: float = 0.0) -> dict[int, complex]:
        keep = np.abs(self.amplitudes) > tol
        return {int(s): complex(a) for s, a in zip(self.states[keep], self.amplitudes[keep])}

    def amplitude_of(self, states) -> np.ndarray:
        """Amplitudes of arbitrary basis states (zero outside the support)."""
        s = np.asarray(states, dtype=np.uint64)
        if self.basis is None:
            return self.amplitudes[s.astype(np.int64)]
        pos = np.minimum(np.searchsorted(self.basis, s), len(self.basis) - 1)
        hit = self.basis[pos] == s
        return np.where(hit, self.amplitudes[pos], 0.0)


@dataclass(frozen=True)
class SectorBasis:
    """Sorted list of basis states spanning a restricted subspace.

    The usual case is fixed ``(n_alpha, n_beta)`` with spin orbitals blocked
    as alpha ``0..M-1`` then beta ``M..2M-1``.
    """

    n_qubits: int
    states: np.ndarray
    n_alpha: int | None = None
    n_beta: int | None = None

    @classmethod
    def particle(cls, n_spatial: int, n_alpha: int, n_beta: int) -> "SectorBasis":
        if not (0 <= n_alpha <= n_spatial and 0 <= n_beta <= n_spatial):
            raise ValueError("electron counts out of range")
        alphas = _combinations_as_ints(range(n_spatial), n_alpha)
        betas = _combinations_as_ints(range(n_spatial, 2 * n_spatial), n_beta)
        states = (betas[:, None] | alphas[None, :]).ravel()
        return cls(2 * n_spatial, np.sort(states), n_alpha, n_beta)

    @classmethod
    def from_states(cls, n_qubits: int, states) -> "SectorBasis":
        return cls(n_qubits, np.unique(np.asarray(states, dtype=np.uint64)))

    def __len__(self) -> int:
        return len(self.states)

    def restrict(self, keep) -> "SectorBasis":
        keep = np.asarray(keep, dtype=bool)
        return SectorBasis(self.n_qubits, self.states[keep], self.n_alpha, self.n_beta)

    def index(self, states) -> tuple[np.ndarray, np.ndarray]:
        """Positions of ``states`` in the basis plus a membership mask."""
        s = np.asarray(states, dtype=np.uint64)
        pos = np.minimum(np.searchsorted(self.states, s), len(self.states) - 1)
        return pos, self.states[pos] == s

    def expected_size(self) -> int | None:
        if self.n_alpha is None:
            return None
        m = self.n_qubits // 2
        return comb(m, self.n_alpha) * comb(m, self.n_beta)


def _combinations_as_ints(modes, k: int) -> np.ndarray:
    out = [sum(1 << m for m in c) for c in itertools.combinations(modes, k)]
    return np.array(out, dtype=np.uint64)


def particle_counts(states, n_spatial: int) -> tuple[np.ndarray, np.ndarray]:
    """``(n_alpha, n_beta)`` of each basis state under the blocked ordering."""
    s = np.asarray(states, dtype=np.uint64)
    amask = np.uint64((1 << n_spatial) - 1)
    return popcount(s & amask), popcount(s >> np.uint64(n_spatial))


@dataclass(frozen=True)
class GroundState:
    energy: float
    state: StateVector
    residual: float
    gap: float
    degenerate: bool
    iterations: int = 0


def ground_state(
    op: PauliOperator,
    sector: SectorBasis | None = None,
    *,
    tol: float = 1e-8,
    max_iter: int = 1000,
    dense_limit: int = DENSE_LIMIT,
) -> GroundState:
    """Lowest eigenpair of a Hermitian operator.

    Small problems go through dense ``eigh``. Larger ones use Davidson on the
    sparse matrix, restricted to ``sector`` when given (exact only if ``op``
    conserves that subspace).

    Raises:
        ConvergenceError: Davidson failed to reach ``tol``; carries the best
            residual norm.
    """
    if sector is not None and sector.n_qubits != op.n_qubits:
        raise DimensionError(f"sector is on {sector.n_qubits} qubits, operator on {op.n_qubits}")
    basis = None if sector is None else sector.states
    dim = (1 << op.n_qubits) if basis is None else len(basis)
    if dim == 0:
        raise ValueError("empty sector")
    mat = op.to_sparse(basis)
    if np.all(mat.data.imag == 0):
        mat = mat.real
    if dim <= dense_limit:
        w, v = np.linalg.eigh(mat.toarray())
        vec = v[:, 0]
        res = float(np.linalg.norm(mat @ vec - w[0] * vec))
        gap = float(w[1] - w[0]) if dim > 1 else np.inf
        energy, iters = float(w[0]), 0
    else:
        energy, vec, res, gap, iters = davidson(mat, tol=tol, max_iter=max_iter)
    vec = _fix_phase(vec)
    degenerate = gap < DEGENERACY_GAP
    if degenerate:
        log.warning("ground state is (near-)degenerate: gap %.2e Ha", gap)
    state = StateVector(op.n_qubits, vec, basis)
    return GroundState(energy, state, res, gap, degenerate, iters)


def _fix_phase(vec: np.ndarray) -> np.ndarray:
    """Make the largest component real positive, for reproducible output."""
    vec = np.asarray(vec, dtype=np.complex128)
    k = int(np.argmax(np.abs(vec)))
    return vec * (abs(vec[k]) / vec[k])


def davidson(mat, *, tol: float = 1e-8, max_iter: int = 1000, max_space: int = 40, seed: int = 7):
    """Davidson iteration for the lowest eigenpair of a sparse Hermitian matrix.

    Diagonal preconditioner, full (twice-applied) Gram-Schmidt and thick
    restart keeping the two lowest Ritz vectors. The start vector is the basis
    state with the lowest diagonal element plus a small seeded admixture, so
    the run is deterministic but cannot be trapped in a symmetry block that
    excludes the ground state.

    Returns:
        ``(energy, vector, residual, gap_estimate, iterations)``. The gap is the
        Ritz estimate of the second eigenvalue minus the first.
    """
    dim = mat.shape[0]
    diag = np.real(mat.diagonal())
    dtype = mat.dtype
    rng = np.random.default_rng(seed)
    x0 = np.zeros(dim, dtype=dtype)
    x0[int(np.argmin(diag))] = 1.0
    noise = rng.standard_normal(dim)
    x0 = x0 + 1e-3 * noise / np.linalg.norm(noise)
    V = np.zeros((dim, max_space + 2), dtype=dtype)
    AV = np.zeros_like(V)
    V[:, 0] = x0 / np.linalg.norm(x0)
    AV[:, 0] = mat @ V[:, 0]
    k = 1
    best = np.inf
    theta, x, gap = 0.0, V[:, 0], np.inf
    for it in range(1, max_iter + 1):
        T = V[:, :k].conj().T @ AV[:, :k]
        T = 0.5 * (T + T.conj().T)
        w, s = np.linalg.eigh(T)
        theta = float(w[0])
        gap = float(w[1] - w[0]) if k > 1 else np.inf
        x = V[:, :k] @ s[:, 0]
        ax = AV[:, :k] @ s[:, 0]
        r = ax - theta * x
        rn = float(np.linalg.norm(r))
        best = min(best, rn)
        if rn <= tol:
            return theta, x / np.linalg.norm(x), rn, gap, it
        if k >= max_space:
            keep = min(2, k)
            V[:, :keep] = V[:, :k] @ s[:, :keep]
            AV[:, :keep] = AV[:, :k] @ s[:, :keep]
            k = keep
        denom = theta - diag
        denom = np.where(np.abs(denom) < 1e-8, 1e-8, denom)
        t = r / denom
        for _ in range(2):
            t = t - V[:, :k] @ (V[:, :k].conj().T @ t)
        tn = np.linalg.norm(t)
        if tn < 1e-12:
            t = r.copy()
            for _ in range(2):
                t = t - V[:, :k] @ (V[:, :k].conj().T @ t)
            tn = np.linalg.norm(t)
            if tn < 1e-14:
                break
        V[:, k] = t / tn
        AV[:, k] = mat @ V[:, k]
        k += 1
    raise ConvergenceError("Davidson did not converge", best)


def _as_vector(psi: StateVector, n_qubits: int) -> StateVector:
    if not isinstance(psi, StateVector):
        raise TypeError(f"expected StateVector, got {type(psi).__name__}")
    if psi.n_qubits != n_qubits:
        raise DimensionError(f"state has {psi.n_qubits} qubits, operator {n_qubits}")
    return psi


def apply_operator(op: PauliOperator, psi: StateVector) -> StateVector:
    """``op |psi>`` as a sparse StateVector over the reachable states."""
    psi = _as_vector(psi, op.n_qubits)
    nz = psi.amplitudes != 0
    src, amp = psi.states[nz], psi.amplitudes[nz]
    acc_s = np.zeros(0, dtype=np.uint64)
    acc_a = np.zeros(0, dtype=np.complex128)
    chunk = max(1, 2_000_000 // max(len(src), 1))
    for start in range(0, len(op), chunk):
        part = PauliOperator(op.n_qubits, op.xs[start:start + chunk], op.zs[start:start + chunk],
                             op.coeffs[start:start + chunk], drop_tol=0.0)
        tgt, a = part.apply_to_basis(src)
        acc_s, acc_a = _merge(np.concatenate([acc_s, tgt.ravel()]),
                              np.concatenate([acc_a, (a * amp[None, :]).ravel()]))
    return StateVector(op.n_qubits, acc_a, acc_s)


def _merge(states: np.ndarray, amps: np.ndarray):
    uniq, inv = np.unique(states, return_inverse=True)
    out = np.zeros(len(uniq), dtype=np.complex128)
    np.add.at(out, inv, amps)
    return uniq, out


def expectation(op: PauliOperator, psi: StateVector) -> complex:
    """``<psi|op|psi>`` without forming the operator matrix."""
    return _braket(psi, op, psi)


def _braket(bra: StateVector, op: PauliOperator, ket: StateVector) -> complex:
    opk = apply_operator(op, ket)
    return complex(np.vdot(bra.amplitude_of(opk.states), opk.amplitudes))


def overlap(psi: StateVector, phi) -> complex:
    """``<psi|phi>`` for two StateVectors or a StateVector and a Slater determinant.

    Determinants are expanded over the support of ``psi`` via minors, so no
    dense vector is formed.
    """
    if isinstance(phi, StateVector):
        if phi.n_qubits != psi.n_qubits:
            raise DimensionError(f"qubit counts differ: {psi.n_qubits} vs {phi.n_qubits}")
        if psi.basis is None and phi.basis is None:
            return complex(np.vdot(psi.amplitudes, phi.amplitudes))
        if psi.basis is not None and (phi.basis is None or len(psi.basis) <= len(phi.basis)):
            return complex(np.vdot(psi.amplitudes, phi.amplitude_of(psi.basis)))
        return complex(np.vdot(psi.amplitude_of(phi.basis), phi.amplitudes))
    amplitudes = getattr(phi, "amplitudes", None)
    if amplitudes is None:
        raise TypeError(f"cannot take overlap with {type(phi).__name__}")
    if phi.n_qubits != psi.n_qubits:
        raise DimensionError(f"qubit counts differ: {psi.n_qubits} vs {phi.n_qubits}")
    states = psi.states
    nz = psi.amplitudes != 0
    return complex(np.vdot(psi.amplitudes[nz], phi.amplitudes(states[nz])))


def fci_ground_state(h, *, tol: float = 1e-8) -> GroundState:
    """FCI ground state of a molecular Hamiltonian in its own particle sector."""
    from .pauli import jordan_wigner

    sector = SectorBasis.particle(h.n_spatial, h.n_alpha, h.n_beta)
    return ground_state(jordan_wigner(h), sector, tol=tol)


def sparse_matrix(op: PauliOperator, sector: SectorBasis | None = None) -> sp.csr_matrix:
    return op.to_sparse(None if sector is None else sector.states)
