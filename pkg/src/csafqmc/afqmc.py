"""Phaseless AFQMC with sparse multi-determinant trial wavefunctions.

Walkers are spin-blocked Slater determinants stored as ``(M, n_alpha)`` and
``(M, n_beta)`` orbital matrices. The two-body interaction is decoupled with
Cholesky vectors ``L_g``: ``H = E0 + K + 1/2 sum_g L_g^2`` with
``K = h - 1/2 sum_g L_g L_g`` and ``L_g = sum_pq L^g_pq E_pq``. The
Hubbard-Stratonovich fields couple to ``v_g = i (L_g - mf_g)`` where
``mf_g = <HF|L_g|HF>`` is the mean-field shift.

Mixed estimators ``<T|O|phi>`` are evaluated by expanding ``O|T>`` over
alpha and beta occupation strings, so each reduces to
``d_alpha^T C_O d_beta`` with ``d`` the vectors of walker minors. That is
exact even for singular minors, which occur for walkers initialized on HF.
The per-determinant Green's function route (``*_wick`` functions) is kept as
an independent cross-check.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.sparse

from .chem import CholeskyFactorization, MolecularHamiltonian, hf_bitstring
from .contextual import TrialWavefunction
from .errors import DimensionError, ValidationError, WeightCollapseError
from .exact import StateVector, apply_operator
from .pauli import jordan_wigner, popcount

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
OVERLAP_FLOOR = 1e-14


# -- determinants -------------------------------------------------------------

def _occupied(bits: int, offset: int, m: int) -> list[int]:
    return [p for p in range(m) if (bits >> (p + offset)) & 1]


@dataclass(frozen=True)
class SlaterDeterminant:
    """``prod_k (sum_p A_pk a^dag_p) prod_k (sum_p B_pk a^dag_{p+M}) |0>``."""

    matrix_alpha: np.ndarray
    matrix_beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix_alpha, dtype=np.complex128)
        b = np.asarray(self.matrix_beta, dtype=np.complex128)
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise DimensionError("alpha and beta blocks need shapes (M, n_alpha) and (M, n_beta)")
        object.__setattr__(self, "matrix_alpha", a)
        object.__setattr__(self, "matrix_beta", b)

    @property
    def n_spatial(self) -> int:
        return self.matrix_alpha.shape[0]

    @property
    def n_qubits(self) -> int:
        return 2 * self.n_spatial

    @property
    def n_alpha(self) -> int:
        return self.matrix_alpha.shape[1]

    @property
    def n_beta(self) -> int:
        return self.matrix_beta.shape[1]

    @classmethod
    def from_occupation(cls, n_spatial: int, state: int) -> "SlaterDeterminant":
        eye = np.eye(n_spatial)
        return cls(eye[:, _occupied(state, 0, n_spatial)], eye[:, _occupied(state, n_spatial, n_spatial)])

    @classmethod
    def hartree_fock(cls, n_spatial: int, n_alpha: int, n_beta: int) -> "SlaterDeterminant":
        return cls.from_occupation(n_spatial, hf_bitstring(n_spatial, n_alpha, n_beta))

    @classmethod
    def random(cls, n_spatial: int, n_alpha: int, n_beta: int, rng) -> "SlaterDeterminant":
        def block(n):
            z = rng.standard_normal((n_spatial, n)) + 1j * rng.standard_normal((n_spatial, n))
            return np.linalg.qr(z)[0]
        return cls(block(n_alpha), block(n_beta))

    def amplitudes(self, states) -> np.ndarray:
        """``<s|phi>`` for basis states ``s`` (zero outside the particle sector)."""
        states = np.asarray(states, dtype=np.uint64)
        m = self.n_spatial
        out = np.zeros(len(states), dtype=np.complex128)
        amask = np.uint64((1 << m) - 1)
        na = popcount(states & amask)
        nb = popcount(states >> np.uint64(m))
        ok = np.flatnonzero((na == self.n_alpha) & (nb == self.n_beta))
        if len(ok) == 0:
            return out
        occ_a = _bits_to_occ(states[ok] & amask, m, self.n_alpha)
        occ_b = _bits_to_occ(states[ok] >> np.uint64(m), m, self.n_beta)
        out[ok] = _minors(self.matrix_alpha, occ_a) * _minors(self.matrix_beta, occ_b)
        return out

    def to_state(self) -> StateVector:
        if self.n_qubits > 20:
            raise DimensionError("densifying more than 20 qubits is not supported")
        states = np.arange(1 << self.n_qubits, dtype=np.uint64)
        return StateVector(self.n_qubits, self.amplitudes(states))


def _bits_to_occ(bits: np.ndarray, m: int, n: int) -> np.ndarray:
    """Rows of ascending occupied indices for each bit pattern."""
    mask = ((bits[:, None] >> np.arange(m, dtype=np.uint64)[None, :]) & np.uint64(1)).astype(bool)
    idx = np.broadcast_to(np.arange(m), mask.shape)
    return idx[mask].reshape(len(bits), n)


def _small_det(a: np.ndarray) -> np.ndarray:
    """Closed-form determinants for stacks of 0x0 to 3x3 matrices."""
    k = a.shape[-1]
    if k == 0:
        return np.ones(a.shape[:-2], dtype=a.dtype)
    if k == 1:
        return a[..., 0, 0]
    if k == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    if k == 3:
        return (a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
                - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
                + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]))
    return np.linalg.det(a)


def _minors(phi: np.ndarray, occ: np.ndarray) -> np.ndarray:
    """``det(phi[occ_i, :])`` for each row of ``occ``; batched over leading walker axes.

    When more than half the orbitals are occupied, Jacobi's complementary
    minor identity is used: with ``Q = [phi | W^H]`` and ``W`` an orthonormal
    basis of the orthogonal complement, ``det(phi[A]) = s_A det(Q) det(W[:, A^c])``.
    """
    m, n = phi.shape[-2:]
    if n == 0:
        return np.ones(phi.shape[:-2] + (occ.shape[0],), dtype=np.complex128)
    k = m - n
    if n <= 3 or k >= n:
        return _small_det(phi[..., occ, :])
    full = np.linalg.qr(phi, mode="complete")[0]
    perp = full[..., n:]
    det_q = np.linalg.det(np.concatenate([phi, perp], axis=-1))
    mask = np.ones((occ.shape[0], m), dtype=bool)
    mask[np.arange(occ.shape[0])[:, None], occ] = False
    comp = np.broadcast_to(np.arange(m), mask.shape)[mask].reshape(occ.shape[0], k)
    sign = np.where((occ.sum(axis=1) + n * (n - 1) // 2) % 2, -1.0, 1.0)
    w = np.swapaxes(perp.conj(), -1, -2)
    sub = np.swapaxes(w[..., :, comp], -3, -2)
    return sign * det_q[..., None] * _small_det(sub)


# -- occupation-string spaces ------------------------------------------------

class StringSpace:
    """All occupation strings of ``n`` electrons in ``m`` orbitals."""

    def __init__(self, m: int, n: int):
        self.m, self.n = m, n
        combos = list(combinations(range(m), n))
        self.occ = np.array(combos, dtype=np.int64).reshape(len(combos), n)
        self.bits = (np.left_shift(1, self.occ).sum(axis=1) if n else np.zeros(1, np.int64)).astype(np.int64)
        self.lookup = {int(b): i for i, b in enumerate(self.bits)}

    def __len__(self) -> int:
        return len(self.bits)

    def excitations(self, rows=None):
        """Nonzero entries of ``a^dag_p a_q`` in string space.

        Returns ``(row, col, p, q, sign)`` arrays with
        ``<row|a^dag_p a_q|col> = sign``; ``rows`` restricts the bra strings.
        """
        keep = set(range(len(self))) if rows is None else {int(r) for r in rows}
        out = []
        for j, b in enumerate(self.bits.tolist()):
            for q in range(self.m):
                if not (b >> q) & 1:
                    continue
                s1 = -1 if bin(b & ((1 << q) - 1)).count("1") % 2 else 1
                b1 = b ^ (1 << q)
                for p in range(self.m):
                    if (b1 >> p) & 1:
                        continue
                    s2 = -1 if bin(b1 & ((1 << p) - 1)).count("1") % 2 else 1
                    i = self.lookup[b1 | (1 << p)]
                    if i in keep:
                        out.append((i, j, p, q, s1 * s2))
        arr = np.array(out, dtype=np.int64).reshape(-1, 5)
        return tuple(arr[:, k] for k in range(5))

    def one_body(self, mats: np.ndarray) -> np.ndarray:
        """Dense string-space matrices of ``sum_pq X_pq a^dag_p a_q`` for a stack of ``X``."""
        mats = np.asarray(mats)
        out = np.zeros(mats.shape[:-2] + (len(self), len(self)), dtype=np.result_type(mats, float))
        rows, cols, ps, qs, signs = self.excitations()
        if len(rows):
            np.add.at(out, (..., rows, cols), mats[..., ps, qs] * signs)
        return out


def _string_split(states: np.ndarray, m: int):
    states = np.asarray(states, dtype=np.uint64)
    return (states & np.uint64((1 << m) - 1)).astype(np.int64), (states >> np.uint64(m)).astype(np.int64)


class TrialProjector:
    """Precomputed ``O|T>`` matrices over (alpha string, beta string) pairs.

    ``coef`` holds the conjugated trial coefficients; ``ham`` the conjugated
    ``H|T>`` (exact integrals). One-body mixed quantities go through the
    unnormalized Green's function ``<T|a^dag_p a_q|phi>``, assembled from the
    excitations whose bra string lies in the trial's support.
    """

    def __init__(self, trial: TrialWavefunction, h: MolecularHamiltonian | None = None,
                 chol: CholeskyFactorization | None = None):
        m = trial.n_qubits // 2
        na, nb = trial.sector
        if h is not None and (h.n_spatial, h.n_alpha, h.n_beta) != (m, na, nb):
            raise DimensionError("trial and Hamiltonian describe different spaces or sectors")
        self.m, self.n_alpha, self.n_beta = m, na, nb
        self.space_a = StringSpace(m, na)
        self.space_b = StringSpace(m, nb)
        self.coef = self._matrix(trial.states, trial.amplitudes).conj()
        self.ham = None
        if h is not None:
            ht = apply_operator(jordan_wigner(h), trial.to_state())
            self.ham = self._matrix(ht.states, ht.amplitudes).conj()
        self.factors = chol.factors if chol is not None else np.zeros((0, m, m))
        self._gather_a = self._gather(self.space_a, np.flatnonzero(np.any(self.coef != 0, axis=1)))
        self._gather_b = self._gather(self.space_b, np.flatnonzero(np.any(self.coef != 0, axis=0)))

    def _gather(self, space: StringSpace, support):
        rows, cols, p, q, sign = space.excitations(support)
        pq = scipy.sparse.csr_matrix(
            (sign.astype(float), (np.arange(len(rows)), p * self.m + q)), shape=(len(rows), self.m * self.m))
        return rows, cols, pq

    def _matrix(self, states, amps) -> np.ndarray:
        a, b = _string_split(states, self.m)
        inside = (popcount(a) == self.n_alpha) & (popcount(b) == self.n_beta)
        if np.any(np.abs(amps[~inside]) > 1e-10):
            raise ValidationError("operator image leaves the trial's particle sector")
        a, b, amps = a[inside], b[inside], amps[inside]
        out = np.zeros((len(self.space_a), len(self.space_b)), dtype=np.complex128)
        ia = np.array([self.space_a.lookup[int(x)] for x in a], dtype=np.int64)
        ib = np.array([self.space_b.lookup[int(x)] for x in b], dtype=np.int64)
        np.add.at(out, (ia, ib), amps)
        return out

    def minors(self, phi_a: np.ndarray, phi_b: np.ndarray):
        return _minors(phi_a, self.space_a.occ), _minors(phi_b, self.space_b.occ)

    def overlap(self, da: np.ndarray, db: np.ndarray) -> np.ndarray:
        return np.sum((da @ self.coef) * db, axis=-1)

    def green(self, da: np.ndarray, db: np.ndarray):
        """Unnormalized ``<T|a^dag_p a_q|phi>`` for alpha and beta, shape ``(..., M, M)``."""
        u = db @ self.coef.T           # sum_b C*_ab d_b
        v = da @ self.coef             # sum_a d_a C*_ab
        out = []
        for (rows, cols, pq), left, right in ((self._gather_a, u, da), (self._gather_b, v, db)):
            lead = left.shape[:-1]
            vals = (left[..., rows] * right[..., cols]).reshape(int(np.prod(lead)), len(rows))
            g = (pq.T @ vals.T).T if len(rows) else np.zeros((vals.shape[0], self.m * self.m), complex)
            out.append(np.asarray(g).reshape(lead + (self.m, self.m)))
        return out[0], out[1]

    def mixed_cholesky(self, da: np.ndarray, db: np.ndarray) -> np.ndarray:
        """``<T|L_g|phi>`` for all ``g`` (unnormalized)."""
        if len(self.factors) == 0:
            return np.zeros(da.shape[:-1] + (0,), dtype=np.complex128)
        ga, gb = self.green(da, db)
        flat = (ga + gb).reshape(ga.shape[:-2] + (-1,))
        return flat @ self.factors.reshape(len(self.factors), -1).T

    def mixed_energy(self, da: np.ndarray, db: np.ndarray) -> np.ndarray:
        if self.ham is None:
            raise ValidationError("projector built without a Hamiltonian")
        return np.sum((da @ self.ham) * db, axis=-1)


def _as_trial(t) -> TrialWavefunction:
    if isinstance(t, TrialWavefunction):
        return t
    if isinstance(t, StateVector):
        return TrialWavefunction.from_state(t, tol=1e-14)
    raise TypeError(f"expected TrialWavefunction, got {type(t).__name__}")


def _check_det(t: TrialWavefunction, d: SlaterDeterminant) -> None:
    if d.n_qubits != t.n_qubits:
        raise DimensionError(f"trial on {t.n_qubits} qubits, determinant on {d.n_qubits}")


# -- public estimators ---------------------------------------------------------

def trial_overlap(t: TrialWavefunction, d: SlaterDeterminant) -> complex:
    """``<T|phi> = sum_i conj(c_i) det(A_i) det(B_i)``."""
    t = _as_trial(t)
    _check_det(t, d)
    return complex(np.vdot(t.amplitudes, d.amplitudes(t.states)))


def mean_field_shift(chol: CholeskyFactorization, n_alpha: int, n_beta: int) -> np.ndarray:
    """``<HF|L_g|HF>``: traces of each factor over occupied orbitals, both spins."""
    if chol.n_factors == 0:
        return np.zeros(0)
    diag = np.einsum("gpp->gp", chol.factors)
    return diag[:, :n_alpha].sum(axis=1) + diag[:, :n_beta].sum(axis=1)


def _cap(xbar: np.ndarray, cap: float | None):
    if cap is None:
        return xbar, 0
    mag = np.abs(xbar)
    over = mag > cap
    if np.any(over):
        xbar = np.where(over, xbar * (cap / np.where(over, mag, 1.0)), xbar)
    return xbar, int(over.sum())


def force_bias(t, d: SlaterDeterminant, chol: CholeskyFactorization, dt: float, *,
               mean_field: np.ndarray | None = None, cap: float | None = None,
               return_caps: bool = False):
    """``xbar_g = -sqrt(dt) <T|v_g|phi>/<T|phi>`` with ``v_g = i (L_g - mf_g)``.

    ``mean_field=None`` means no subtraction (``mf = 0``). ``cap`` bounds
    ``|xbar_g|``; ``return_caps`` also returns the number of capped entries.
    """
    t = _as_trial(t)
    _check_det(t, d)
    if chol.n_factors == 0:
        return (np.zeros(0, complex), 0) if return_caps else np.zeros(0, complex)
    proj = TrialProjector(t, None, chol)
    da, db = proj.minors(d.matrix_alpha, d.matrix_beta)
    ov = proj.overlap(da, db)
    if abs(ov) < OVERLAP_FLOOR:
        raise ValidationError("vanishing trial overlap")
    mixed = proj.mixed_cholesky(da, db) / ov
    mf = np.zeros(chol.n_factors) if mean_field is None else np.asarray(mean_field)
    xbar, n = _cap(-1j * np.sqrt(dt) * (mixed - mf), cap)
    return (xbar, n) if return_caps else xbar


def local_energy(t, d: SlaterDeterminant, h: MolecularHamiltonian) -> float | complex:
    """Mixed estimator ``<T|H|phi>/<T|phi>`` with the exact integrals."""
    t = _as_trial(t)
    _check_det(t, d)
    proj = TrialProjector(t, h, None)
    da, db = proj.minors(d.matrix_alpha, d.matrix_beta)
    ov = proj.overlap(da, db)
    if abs(ov) < OVERLAP_FLOOR:
        raise ValidationError("vanishing trial overlap")
    return complex(proj.mixed_energy(da, db) / ov)


# -- Green's function cross-check ----------------------------------------------

def _green_functions(t: TrialWavefunction, d: SlaterDeterminant):
    """Per-determinant weights ``conj(c_i) <D_i|phi>`` and mixed Green's functions.

    ``G[p, q] = <D_i|a^dag_p a_q|phi>/<D_i|phi>`` per spin; determinants with a
    singular minor are skipped (they carry zero overlap but this route cannot
    recover their excitation contributions).
    """
    m = d.n_spatial
    out = []
    for s, c in zip(t.states, t.amplitudes):
        blocks = []
        ok = True
        for phi, offset, n in ((d.matrix_alpha, 0, d.n_alpha), (d.matrix_beta, m, d.n_beta)):
            occ = _occupied(int(s), offset, m)
            g = np.zeros((m, m), dtype=np.complex128)
            if n:
                sub = phi[occ, :]
                det = np.linalg.det(sub)
                if abs(det) < 1e-12:
                    ok = False
                    break
                theta = phi @ np.linalg.inv(sub)
                g[occ, :] = theta.T
            else:
                det = 1.0
            blocks.append((det, g))
        if ok:
            (da, ga), (db, gb) = blocks
            out.append((np.conj(c) * da * db, ga, gb))
    return out


def local_energy_wick(t, d: SlaterDeterminant, h: MolecularHamiltonian) -> complex:
    """Local energy from generalized Wick contractions of each determinant."""
    t = _as_trial(t)
    num = den = 0.0
    for w, ga, gb in _green_functions(t, d):
        e1 = np.einsum("pq,pq->", h.h1, ga + gb)
        g = ga + gb
        direct = 0.5 * np.einsum("pqrs,pq,rs->", h.eri, g, g)
        exch = -0.5 * sum(np.einsum("pqrs,ps,rq->", h.eri, gs, gs) for gs in (ga, gb))
        num += w * (h.core_energy + e1 + direct + exch)
        den += w
    return complex(num / den)


def force_bias_wick(t, d: SlaterDeterminant, chol: CholeskyFactorization, dt: float,
                    mean_field: np.ndarray | None = None) -> np.ndarray:
    t = _as_trial(t)
    num = np.zeros(chol.n_factors, dtype=np.complex128)
    den = 0.0
    for w, ga, gb in _green_functions(t, d):
        num += w * np.einsum("gpq,pq->g", chol.factors, ga + gb)
        den += w
    mf = np.zeros(chol.n_factors) if mean_field is None else mean_field
    return -1j * np.sqrt(dt) * (num / den - mf)


# -- propagation ---------------------------------------------------------------

@dataclass
class Walker:
    det: SlaterDeterminant
    weight: float = 1.0
    phase: float = 0.0
    overlap_cache: complex = 1.0 + 0j


@dataclass
class PropagatorContext:
    """Everything a propagation step needs besides the walker and trial."""

    dt: float
    one_body_half: np.ndarray
    cholesky: CholeskyFactorization
    energy_shift: float
    mean_field: np.ndarray
    constant: float
    rng: np.random.Generator
    taylor_order: int = 6
    force_cap: float | None = None
    cap_events: int = 0
    killed: int = 0

    @classmethod
    def build(cls, h: MolecularHamiltonian, chol: CholeskyFactorization, dt: float, *,
              seed=0, energy_shift: float = 0.0, mean_field_subtraction: bool = True,
              taylor_order: int = 6, force_cap: float | str | None = "default") -> "PropagatorContext":
        if dt <= 0:
            raise ValueError("dt must be positive")
        L = chol.factors
        if mean_field_subtraction and chol.n_factors:
            mf = mean_field_shift(chol, h.n_alpha, h.n_beta)
        else:
            mf = np.zeros(chol.n_factors)
        k = h.h1 - 0.5 * np.einsum("gpr,grq->pq", L, L) if chol.n_factors else h.h1.copy()
        k_shifted = k + np.einsum("g,gpq->pq", mf, L) if chol.n_factors else k
        const = h.core_energy - 0.5 * float(mf @ mf)
        half = scipy.linalg.expm(-0.5 * dt * k_shifted)
        if force_cap == "default":
            force_cap = 1.0 / np.sqrt(dt)
        rng = np.random.Generator(np.random.Philox(seed))
        return cls(dt, half, chol, energy_shift, mf, const, rng, taylor_order, force_cap)


def _apply_two_body(phi: np.ndarray, field: np.ndarray, ctx: PropagatorContext) -> np.ndarray:
    """Taylor-expanded ``exp(i sqrt(dt) sum_g s_g L_g)`` acting on orbital blocks."""
    if ctx.cholesky.n_factors == 0:
        return phi
    m = phi.shape[-2]
    a = (1j * np.sqrt(ctx.dt) * field) @ ctx.cholesky.factors.reshape(-1, m * m)
    a = a.reshape(field.shape[:-1] + (m, m))
    out = phi.copy()
    term = phi
    for k in range(1, ctx.taylor_order + 1):
        term = a @ term / k
        out = out + term
    return out


def propagate_orbitals(phi: np.ndarray, field: np.ndarray, ctx: PropagatorContext) -> np.ndarray:
    """``B(field)`` on orbital matrices, without the scalar mean-field factor."""
    phi = ctx.one_body_half @ phi
    phi = _apply_two_body(phi, field, ctx)
    return ctx.one_body_half @ phi


def _weight_factor(ratio, x, xbar, field, ctx):
    """Phaseless importance factor and the overlap-ratio phase."""
    cmf = -1j * np.sqrt(ctx.dt) * (field @ ctx.mean_field) if len(ctx.mean_field) else 0.0
    o = ratio * np.exp(cmf)
    fb = np.exp(np.sum(x * xbar, axis=-1) - 0.5 * np.sum(xbar * xbar, axis=-1))
    theta = np.angle(o)
    scale = np.exp(-ctx.dt * (ctx.constant - ctx.energy_shift))
    return np.abs(o * fb) * np.maximum(0.0, np.cos(theta)) * scale, theta


def propagate_step(w: Walker, ctx: PropagatorContext, t, x: np.ndarray | None = None,
                   projector: TrialProjector | None = None) -> Walker:
    """One importance-sampled, phaseless step for a single walker.

    ``x`` may be supplied (for tests); otherwise it is drawn from ``ctx.rng``.
    """
    t = _as_trial(t)
    proj = projector or TrialProjector(t, None, ctx.cholesky)
    if w.weight <= 0:
        return w
    da, db = proj.minors(w.det.matrix_alpha, w.det.matrix_beta)
    ov = proj.overlap(da, db)
    if abs(ov) < OVERLAP_FLOOR:
        return Walker(w.det, 0.0, w.phase, ov)
    xbar, ncap = _cap(-1j * np.sqrt(ctx.dt) * (proj.mixed_cholesky(da, db) / ov - ctx.mean_field), ctx.force_cap)
    ctx.cap_events += ncap
    if x is None:
        x = ctx.rng.standard_normal(ctx.cholesky.n_factors)
    field = x - xbar
    pa = propagate_orbitals(w.det.matrix_alpha, field, ctx)
    pb = propagate_orbitals(w.det.matrix_beta, field, ctx)
    if not (np.all(np.isfinite(pa)) and np.all(np.isfinite(pb))):
        ctx.killed += 1
        log.warning("non-finite walker after propagation; killed")
        return Walker(w.det, 0.0, w.phase, ov)
    new_ov = proj.overlap(*proj.minors(pa, pb))
    factor, theta = _weight_factor(new_ov / ov, x, xbar, field, ctx)
    return Walker(SlaterDeterminant(pa, pb), float(w.weight * factor), float(theta), complex(new_ov))


# -- ensemble driver -------------------------------------------------------------

@dataclass
class EnergyEstimate:
    block_means: list[float]
    mean: float
    stderr: float
    n_blocks: int
    steps_per_block: int
    n_equilibration: int = 0
    total_weights: list[float] = field(default_factory=list)
    cap_events: list[int] = field(default_factory=list)
    local_energy_spread: list[float] = field(default_factory=list)
    killed: int = 0

    def blocks_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["block", "energy", "total_weight", "cap_events"])
        for i, (e, w, c) in enumerate(zip(self.block_means, self.total_weights, self.cap_events)):
            wr.writerow([i, f"{e:.12f}", f"{w:.10g}", c])
        return buf.getvalue()


def blocking_stderr(series) -> float:
    """Standard error from Flyvbjerg-Petersen reblocking.

    Picks the smallest block size ``B`` with ``B^3 > 2 n (sigma_B/sigma_0)^4``
    (Wolff's criterion, as in common reblocking tools); falls back to the
    largest level with at least 4 blocks.
    """
    x = np.asarray(series, dtype=float)
    n0 = len(x)
    if n0 < 2:
        return float("nan") if n0 == 0 else 0.0
    levels = []
    while len(x) >= 4:
        se = x.std(ddof=1) / np.sqrt(len(x))
        levels.append((len(x), se))
        x = 0.5 * (x[0:len(x) // 2 * 2:2] + x[1:len(x) // 2 * 2:2])
    if not levels:
        return float(np.std(series, ddof=1) / np.sqrt(n0))
    s0 = levels[0][1] * np.sqrt(levels[0][0])
    if s0 == 0:
        return 0.0
    for k, (n, se) in enumerate(levels):
        sigma = se * np.sqrt(n)
        if (2 ** k) ** 3 > 2 * n0 * (sigma / s0) ** 4:
            return float(se)
    return float(levels[-1][1])


def pair_branch(weights: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Pair-branching population control.

    Repeatedly pairs the heaviest and the lightest walker while the heaviest
    exceeds twice the mean or the lightest is below half of it. With
    probability ``w_big / (w_big + w_small)`` the heavy walker is copied over
    the light one, otherwise the reverse; both get ``(w_big + w_small)/2``.
    Total weight is conserved exactly. Returns ``(parent_index, new_weights)``.
    """
    w = np.asarray(weights, dtype=float).copy()
    parent = np.arange(len(w))
    mean = w.mean()
    if mean <= 0:
        return parent, w
    for _ in range(4 * len(w)):
        i_big = int(np.argmax(w))
        i_small = int(np.argmin(w))
        if i_big == i_small or (w[i_big] <= 2 * mean and w[i_small] >= 0.5 * mean):
            break
        total = w[i_big] + w[i_small]
        if rng.random() < w[i_big] / total:
            parent[i_small] = parent[i_big]
        else:
            parent[i_big] = parent[i_small]
        w[i_big] = w[i_small] = 0.5 * total
    return parent, w


@dataclass
class AFQMCParams:
    n_walkers: int = 600
    n_blocks: int = 600
    steps_per_block: int = 25
    dt: float = 0.005
    seed: int = 0
    equilibration: float = 0.1
    taylor_order: int = 6
    mean_field_subtraction: bool = True
    force_cap: float | str | None = "default"

    def validate(self) -> None:
        for name in ("n_walkers", "n_blocks", "steps_per_block"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.equilibration < 1:
            raise ValueError("equilibration fraction must lie in [0, 1)")


class _Ensemble:
    """Walker population held as stacked arrays."""

    def __init__(self, phi_a, phi_b, proj: TrialProjector, overlap_fn=None):
        self.phi_a, self.phi_b = phi_a, phi_b
        n = phi_a.shape[0]
        self.weights = np.ones(n)
        self.phases = np.zeros(n)
        self.proj = proj
        self.overlap_fn = overlap_fn
        self.refresh()

    def refresh(self):
        self.da, self.db = self.proj.minors(self.phi_a, self.phi_b)
        self.overlaps = self.proj.overlap(self.da, self.db)
        self.guide = self.overlaps if self.overlap_fn is None else self.overlap_fn(self.phi_a, self.phi_b)

    def orthonormalize(self):
        self.phi_a = np.linalg.qr(self.phi_a)[0]
        self.phi_b = np.linalg.qr(self.phi_b)[0]
        self.refresh()

    def take(self, parent):
        self.phi_a = self.phi_a[parent]
        self.phi_b = self.phi_b[parent]
        self.phases = self.phases[parent]
        self.da, self.db, self.overlaps = self.da[parent], self.db[parent], self.overlaps[parent]
        self.guide = self.guide[parent]


def initial_determinant(t: TrialWavefunction, h: MolecularHamiltonian) -> SlaterDeterminant:
    """HF, unless the trial barely overlaps it; then the trial's leading determinant."""
    hf = SlaterDeterminant.hartree_fock(h.n_spatial, h.n_alpha, h.n_beta)
    if abs(trial_overlap(t, hf)) >= 1e-8:
        return hf
    lead = int(t.states[int(np.argmax(np.abs(t.amplitudes)))])
    log.info("trial overlap with HF below 1e-8; walkers start from the leading trial determinant")
    return SlaterDeterminant.from_occupation(h.n_spatial, lead)


def run_afqmc(h: MolecularHamiltonian, chol: CholeskyFactorization, t, params: AFQMCParams | dict,
              *, on_block=None, walker_dump=None, overlap_fn=None) -> EnergyEstimate:
    """Phaseless AFQMC energy estimate guided by trial ``t``.

    Every ``steps_per_block`` steps: measure the mixed energy, QR-orthonormalize
    the walkers (the overlap cache is recomputed, so the R factors never enter
    the weights), pair-branch, and set the energy shift to the running mean.
    ``on_block(i, energy)`` and ``walker_dump(i, weights, phases, e_loc)`` are
    optional hooks.

    ``overlap_fn(phi_alpha, phi_beta)``, if given, supplies the ``<T|phi>``
    values that enter the importance-sampling weight ratio (for example a
    shadow estimate); force bias and local energy stay exact.
    """
    if isinstance(params, dict):
        params = AFQMCParams(**params)
    params.validate()
    t = _as_trial(t)
    if t.sector != (h.n_alpha, h.n_beta):
        raise ValidationError(f"trial sector {t.sector} differs from ({h.n_alpha}, {h.n_beta})")
    proj = TrialProjector(t, h, chol)
    d0 = initial_determinant(t, h)
    nw = params.n_walkers
    ens = _Ensemble(np.repeat(d0.matrix_alpha[None], nw, axis=0),
                    np.repeat(d0.matrix_beta[None], nw, axis=0), proj, overlap_fn)
    e0 = float(np.real(proj.mixed_energy(ens.da[:1], ens.db[:1])[0] / ens.overlaps[0]))
    ctx = PropagatorContext.build(h, chol, params.dt, seed=params.seed, energy_shift=e0,
                                  mean_field_subtraction=params.mean_field_subtraction,
                                  taylor_order=params.taylor_order, force_cap=params.force_cap)
    sqdt = np.sqrt(params.dt)
    blocks, weights_log, caps_log, spread_log = [], [], [], []
    for b in range(params.n_blocks):
        caps_before = ctx.cap_events
        for _ in range(params.steps_per_block):
            _ensemble_step(ens, ctx, sqdt)
        alive = ens.weights > 0
        total = float(ens.weights.sum())
        if total < 1e-12 * nw:
            raise WeightCollapseError(f"total walker weight collapsed to {total:.3e} in block {b}")
        ov = np.where(alive, ens.overlaps, 1.0)
        e_loc = proj.mixed_energy(ens.da, ens.db) / ov
        wz = ens.weights * np.exp(1j * ens.phases)
        energy = float(np.real(np.sum(wz * e_loc) / np.sum(wz)))
        if walker_dump is not None:
            walker_dump(b, ens.weights.copy(), ens.phases.copy(), e_loc.copy())
        blocks.append(energy)
        weights_log.append(total)
        caps_log.append(ctx.cap_events - caps_before)
        spread_log.append(float(np.std(np.real(e_loc[alive]))) if alive.any() else float("nan"))
        ens.orthonormalize()
        parent, neww = pair_branch(ens.weights, ctx.rng)
        ens.take(parent)
        ens.weights = neww * (nw / neww.sum())
        n_eq = int(np.floor(params.equilibration * (b + 1)))
        ctx.energy_shift = float(np.mean(blocks[n_eq:]))
        if on_block is not None:
            on_block(b, energy)
    n_eq = int(np.floor(params.equilibration * params.n_blocks))
    kept = np.asarray(blocks[n_eq:])
    return EnergyEstimate(
        block_means=blocks,
        mean=float(kept.mean()),
        stderr=blocking_stderr(kept),
        n_blocks=params.n_blocks,
        steps_per_block=params.steps_per_block,
        n_equilibration=n_eq,
        total_weights=weights_log,
        cap_events=caps_log,
        local_energy_spread=spread_log,
        killed=ctx.killed,
    )


def _ensemble_step(ens: _Ensemble, ctx: PropagatorContext, sqdt: float) -> None:
    nw = len(ens.weights)
    ng = ctx.cholesky.n_factors
    alive = ens.weights > 0
    ov = np.where(alive, ens.overlaps, 1.0)
    if ng:
        mixed = ens.proj.mixed_cholesky(ens.da, ens.db) / ov[:, None]
        xbar, ncap = _cap(-1j * sqdt * (mixed - ctx.mean_field[None, :]), ctx.force_cap)
        xbar[~alive] = 0.0
        ctx.cap_events += ncap
    else:
        xbar = np.zeros((nw, 0), dtype=np.complex128)
    x = ctx.rng.standard_normal((nw, ng))
    field = x - xbar
    pa = propagate_orbitals(ens.phi_a, field, ctx)
    pb = propagate_orbitals(ens.phi_b, field, ctx)
    bad = ~(np.isfinite(pa).all(axis=(1, 2)) & np.isfinite(pb).all(axis=(1, 2)))
    if bad.any():
        ctx.killed += int(bad.sum())
        log.warning("%d walkers became non-finite and were killed", int(bad.sum()))
        pa[bad] = ens.phi_a[bad]
        pb[bad] = ens.phi_b[bad]
    da, db = ens.proj.minors(pa, pb)
    new_ov = ens.proj.overlap(da, db)
    if ens.overlap_fn is None:
        new_guide, ratio = new_ov, new_ov / ov
    else:
        new_guide = ens.overlap_fn(pa, pb)
        old = np.where(alive & (np.abs(ens.guide) > 0), ens.guide, 1.0)
        ratio = new_guide / old
    factor, theta = _weight_factor(ratio, x, xbar, field, ctx)
    factor = np.where(alive & ~bad & np.isfinite(factor), factor, 0.0)
    ens.phi_a, ens.phi_b = pa, pb
    ens.da, ens.db = da, db
    dead_ov = np.abs(new_ov) < OVERLAP_FLOOR
    ens.overlaps = np.where(dead_ov, 1.0, new_ov)
    ens.guide = np.where(dead_ov, 1.0, new_guide)
    ens.weights = np.where(dead_ov, 0.0, ens.weights * factor)
    ens.phases = np.where(alive, theta, ens.phases)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, walkers: list[Walker], ctx: PropagatorContext | None = None) -> None:
    """Versioned ``.npz`` walker checkpoint."""
    data = {
        "version": np.array(CHECKPOINT_VERSION),
        "phi_alpha": np.stack([w.det.matrix_alpha for w in walkers]),
        "phi_beta": np.stack([w.det.matrix_beta for w in walkers]),
        "weights": np.array([w.weight for w in walkers]),
        "phases": np.array([w.phase for w in walkers]),
        "overlaps": np.array([w.overlap_cache for w in walkers]),
    }
    if ctx is not None:
        data["energy_shift"] = np.array(ctx.energy_shift)
        data["rng_state"] = np.array(str(ctx.rng.bit_generator.state))
    np.savez(path, **data)


def load_checkpoint(path) -> tuple[list[Walker], dict]:
    with np.load(path, allow_pickle=False) as f:
        version = int(f["version"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        walkers = [
            Walker(SlaterDeterminant(a, b), float(w), float(p), complex(o))
            for a, b, w, p, o in zip(f["phi_alpha"], f["phi_beta"], f["weights"], f["phases"], f["overlaps"])
        ]
        extra = {k: f[k].item() for k in ("energy_shift", "rng_state") if k in f}
    return walkers, extra
