"""Symplectic Pauli algebra and the Jordan-Wigner map.

A Pauli word on ``n`` qubits is stored as two integer bitmasks ``(x, z)``;
bit ``q`` of each mask refers to qubit ``q``. The Hermitian string for a pair
of masks is ``sigma(x, z) = prod_q i^(x_q z_q) X_q^x_q Z_q^z_q``, so ``Y = iXZ``
and products reduce to XORs plus a phase counted from popcounts.

Computational basis convention: ``Z|0> = +|0>``, a basis index is
``sum_q b_q 2^q`` and bit ``b_q = 1`` means spin orbital ``q`` is occupied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, ValidationError

DROP_TOL = 1e-12
MAX_QUBITS = 32

_PHASES = (1.0 + 0j, 1j, -1.0 + 0j, -1j)


def popcount(a):
    """Bit count of an integer or of every entry of an integer array."""
    if isinstance(a, (int, np.integer)):
        return int(a).bit_count()
    return np.bitwise_count(np.asarray(a, dtype=np.uint64)).astype(np.int64)


def _product_phase(x1, z1, x2, z2):
    """Power of i picked up by sigma(x1, z1) @ sigma(x2, z2)."""
    x3 = x1 ^ x2
    z3 = z1 ^ z2
    return (popcount(x1 & z1) + popcount(x2 & z2) - popcount(x3 & z3) + 2 * popcount(z1 & x2)) % 4


@dataclass(frozen=True)
class PauliWord:
    """A single Pauli word ``i^phase * sigma(x, z)``.

    ``phase`` is an exponent of ``i`` in ``{0, 1, 2, 3}``.
    """

    n_qubits: int
    x: int = 0
    z: int = 0
    phase: int = 0

    def __post_init__(self):
        if not 0 <= self.n_qubits <= MAX_QUBITS:
            raise DimensionError(f"n_qubits must be in 0..{MAX_QUBITS}, got {self.n_qubits}")
        full = (1 << self.n_qubits) - 1
        if self.x & ~full or self.z & ~full:
            raise DimensionError("bitmask exceeds n_qubits")
        object.__setattr__(self, "phase", self.phase % 4)

    @classmethod
    def identity(cls, n_qubits: int) -> "PauliWord":
        return cls(n_qubits)

    @classmethod
    def from_string(cls, label: str, phase: int = 0) -> "PauliWord":
        """Build from a label such as ``"ZIY"``; character ``k`` acts on qubit ``k``."""
        x = z = 0
        for q, ch in enumerate(label.upper()):
            if ch in "XY":
                x |= 1 << q
            if ch in "ZY":
                z |= 1 << q
            if ch not in "IXYZ":
                raise ValueError(f"bad Pauli character {ch!r}")
        return cls(len(label), x, z, phase)

    @classmethod
    def from_sparse(cls, ops: Mapping[int, str], n_qubits: int, phase: int = 0) -> "PauliWord":
        """Build from ``{qubit: 'X'|'Y'|'Z'}``."""
        label = ["I"] * n_qubits
        for q, ch in ops.items():
            if not 0 <= q < n_qubits:
                raise DimensionError(f"qubit {q} out of range for {n_qubits} qubits")
            label[q] = ch
        return cls.from_string("".join(label), phase)

    @property
    def coefficient(self) -> complex:
        return _PHASES[self.phase]

    @property
    def support(self) -> int:
        return self.x | self.z

    @property
    def weight(self) -> int:
        return popcount(self.support)

    @property
    def is_diagonal(self) -> bool:
        return self.x == 0

    def label(self) -> str:
        out = []
        for q in range(self.n_qubits):
            xb, zb = (self.x >> q) & 1, (self.z >> q) & 1
            out.append("IZXY"[xb * 2 + zb])
        return "".join(out)

    def __str__(self) -> str:
        return f"{('+', '+i', '-', '-i')[self.phase]}{self.label()}"

    def __mul__(self, other: "PauliWord") -> "PauliWord":
        return multiply(self, other)

    def commutes_with(self, other: "PauliWord") -> bool:
        return commutes(self, other)


def _check_same(a: PauliWord, b: PauliWord) -> None:
    if a.n_qubits != b.n_qubits:
        raise DimensionError(f"qubit counts differ: {a.n_qubits} vs {b.n_qubits}")


def multiply(a: PauliWord, b: PauliWord) -> PauliWord:
    """Product ``a @ b`` with the accumulated phase."""
    _check_same(a, b)
    ph = a.phase + b.phase + _product_phase(a.x, a.z, b.x, b.z)
    return PauliWord(a.n_qubits, a.x ^ b.x, a.z ^ b.z, ph)


def commutes(a: PauliWord, b: PauliWord) -> bool:
    """True iff the symplectic form of ``a`` and ``b`` is even."""
    _check_same(a, b)
    return (popcount(a.x & b.z) + popcount(a.z & b.x)) % 2 == 0


def _keys(xs: np.ndarray, zs: np.ndarray, n: int) -> np.ndarray:
    return (xs.astype(np.uint64) << np.uint64(n)) | zs.astype(np.uint64)


class PauliOperator:
    """Weighted sum of Pauli words, stored as parallel arrays.

    Terms are unique ``(x, z)`` pairs sorted by key, with coefficients of
    magnitude below ``DROP_TOL`` removed. Instances are treated as immutable.
    """

    __slots__ = ("n_qubits", "xs", "zs", "coeffs")

    def __init__(self, n_qubits: int, xs=(), zs=(), coeffs=(), *, drop_tol: float = DROP_TOL):
        if not 0 <= n_qubits <= MAX_QUBITS:
            raise DimensionError(f"n_qubits must be in 0..{MAX_QUBITS}, got {n_qubits}")
        xs = np.asarray(xs, dtype=np.uint64).ravel()
        zs = np.asarray(zs, dtype=np.uint64).ravel()
        coeffs = np.asarray(coeffs, dtype=np.complex128).ravel()
        if not (len(xs) == len(zs) == len(coeffs)):
            raise ValueError("xs, zs and coeffs must have equal length")
        full = np.uint64((1 << n_qubits) - 1)
        if len(xs) and (np.any(xs & ~full) or np.any(zs & ~full)):
            raise DimensionError("bitmask exceeds n_qubits")
        if len(xs):
            keys = _keys(xs, zs, n_qubits)
            uniq, inv = np.unique(keys, return_inverse=True)
            summed = np.zeros(len(uniq), dtype=np.complex128)
            np.add.at(summed, inv, coeffs)
            keep = np.abs(summed) >= drop_tol
            uniq = uniq[keep]
            coeffs = summed[keep]
            zmask = np.uint64((1 << n_qubits) - 1)
            xs = uniq >> np.uint64(n_qubits)
            zs = uniq & zmask
        self.n_qubits = n_qubits
        self.xs = xs
        self.zs = zs
        self.coeffs = coeffs
        for arr in (self.xs, self.zs, self.coeffs):
            arr.flags.writeable = False

    # construction helpers -------------------------------------------------
    @classmethod
    def zero(cls, n_qubits: int) -> "PauliOperator":
        return cls(n_qubits)

    @classmethod
    def identity(cls, n_qubits: int, coeff: complex = 1.0) -> "PauliOperator":
        return cls(n_qubits, [0], [0], [coeff])

    @classmethod
    def from_word(cls, word: PauliWord, coeff: complex = 1.0) -> "PauliOperator":
        return cls(word.n_qubits, [word.x], [word.z], [coeff * word.coefficient])

    @classmethod
    def from_terms(cls, terms: Iterable[tuple[PauliWord, complex]], n_qubits: int) -> "PauliOperator":
        xs, zs, cs = [], [], []
        for w, c in terms:
            if w.n_qubits != n_qubits:
                raise DimensionError("word qubit count does not match operator")
            xs.append(w.x)
            zs.append(w.z)
            cs.append(c * w.coefficient)
        return cls(n_qubits, xs, zs, cs)

    @classmethod
    def from_dict(cls, terms: Mapping[str, complex]) -> "PauliOperator":
        """``{"ZZI": 0.5, "XII": 1.0}`` style construction."""
        words = [(PauliWord.from_string(k), v) for k, v in terms.items()]
        if not words:
            raise ValueError("empty dict gives no qubit count; use PauliOperator.zero")
        return cls.from_terms(words, words[0][0].n_qubits)

    # basic protocol --------------------------------------------------------
    def __len__(self) -> int:
        return len(self.coeffs)

    def __iter__(self):
        for x, z, c in zip(self.xs, self.zs, self.coeffs):
            yield PauliWord(self.n_qubits, int(x), int(z)), complex(c)

    def to_dict(self) -> dict[str, complex]:
        return {w.label(): c for w, c in self}

    def __repr__(self) -> str:
        head = ", ".join(f"{c:.4g}*{w.label()}" for w, c in list(self)[:6])
        more = "" if len(self) <= 6 else f", ... ({len(self)} terms)"
        return f"PauliOperator({self.n_qubits}q: {head}{more})"

    def coefficient(self, word: PauliWord) -> complex:
        """Coefficient of ``sigma(word.x, word.z)`` (word phase is ignored)."""
        key = _keys(np.array([word.x]), np.array([word.z]), self.n_qubits)[0]
        keys = _keys(self.xs, self.zs, self.n_qubits)
        i = np.searchsorted(keys, key)
        if i < len(keys) and keys[i] == key:
            return complex(self.coeffs[i])
        return 0.0j

    def _check(self, other: "PauliOperator") -> None:
        if self.n_qubits != other.n_qubits:
            raise DimensionError(f"qubit counts differ: {self.n_qubits} vs {other.n_qubits}")

    def __add__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            other = PauliOperator.identity(self.n_qubits, other)
        self._check(other)
        return PauliOperator(
            self.n_qubits,
            np.concatenate([self.xs, other.xs]),
            np.concatenate([self.zs, other.zs]),
            np.concatenate([self.coeffs, other.coeffs]),
        )

    __radd__ = __add__

    def __neg__(self):
        return PauliOperator(self.n_qubits, self.xs, self.zs, -self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return PauliOperator(self.n_qubits, self.xs, self.zs, self.coeffs * other)
        if isinstance(other, PauliWord):
            other = PauliOperator.from_word(other)
        self._check(other)
        if len(self) == 0 or len(other) == 0:
            return PauliOperator.zero(self.n_qubits)
        x1, z1 = self.xs[:, None], self.zs[:, None]
        x2, z2 = other.xs[None, :], other.zs[None, :]
        ph = _product_phase(x1, z1, x2, z2)
        coef = self.coeffs[:, None] * other.coeffs[None, :] * np.array(_PHASES)[ph]
        return PauliOperator(self.n_qubits, (x1 ^ x2).ravel(), (z1 ^ z2).ravel(), coef.ravel())

    def __rmul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return self * other
        return NotImplemented

    def __truediv__(self, scalar):
        return self * (1.0 / scalar)

    def adjoint(self) -> "PauliOperator":
        return PauliOperator(self.n_qubits, self.xs, self.zs, np.conj(self.coeffs))

    def equals(self, other: "PauliOperator", atol: float = 1e-12) -> bool:
        diff = self - other
        return len(diff) == 0 or bool(np.max(np.abs(diff.coeffs)) <= atol)

    def is_hermitian(self, atol: float = 1e-10) -> bool:
        return len(self) == 0 or bool(np.max(np.abs(self.coeffs.imag)) <= atol)

    def chop(self, tol: float) -> "PauliOperator":
        keep = np.abs(self.coeffs) >= tol
        return PauliOperator(self.n_qubits, self.xs[keep], self.zs[keep], self.coeffs[keep])

    def real(self) -> "PauliOperator":
        return PauliOperator(self.n_qubits, self.xs, self.zs, self.coeffs.real)

    # structure -------------------------------------------------------------
    @property
    def diagonal_mask(self) -> np.ndarray:
        return self.xs == 0

    def select(self, mask) -> "PauliOperator":
        mask = np.asarray(mask, dtype=bool)
        return PauliOperator(self.n_qubits, self.xs[mask], self.zs[mask], self.coeffs[mask])

    def constant(self) -> complex:
        return self.coefficient(PauliWord.identity(self.n_qubits))

    # action on basis states ------------------------------------------------
    def apply_to_basis(self, states: np.ndarray):
        """Act on integer basis states.

        Returns ``(targets, amplitudes)`` of shape ``(n_terms, n_states)``:
        term ``k`` maps ``|s>`` to ``amplitudes[k, j] |targets[k, j]>``.
        """
        s = np.asarray(states, dtype=np.uint64)[None, :]
        x = self.xs[:, None]
        z = self.zs[:, None]
        sign = 1 - 2 * (popcount(z & s) % 2)
        ph = np.array(_PHASES)[popcount(x & z) % 4]
        return s ^ x, self.coeffs[:, None] * ph * sign

    def diagonal(self, states: np.ndarray) -> np.ndarray:
        """``<s|op|s>`` for each basis state."""
        d = self.select(self.diagonal_mask)
        if len(d) == 0:
            return np.zeros(len(states), dtype=np.complex128)
        _, amps = d.apply_to_basis(states)
        return amps.sum(axis=0)

    def to_sparse(self, basis: np.ndarray | None = None) -> sp.csr_matrix:
        """Sparse matrix in the full space or restricted to a sorted ``basis``.

        Matrix elements leaving the restricted basis are discarded, which is
        exact when the operator conserves the subspace.
        """
        if basis is None:
            dim = 1 << self.n_qubits
            states = np.arange(dim, dtype=np.uint64)
        else:
            states = np.asarray(basis, dtype=np.uint64)
            dim = len(states)
        rows, cols, vals = [], [], []
        col_idx = np.arange(dim)
        chunk = max(1, 2_000_000 // max(dim, 1))
        for start in range(0, len(self), chunk):
            part = PauliOperator(
                self.n_qubits,
                self.xs[start:start + chunk],
                self.zs[start:start + chunk],
                self.coeffs[start:start + chunk],
                drop_tol=0.0,
            )
            tgt, amp = part.apply_to_basis(states)
            if basis is None:
                r = tgt.astype(np.int64)
                ok = np.ones_like(r, dtype=bool)
            else:
                pos = np.searchsorted(states, tgt)
                pos = np.minimum(pos, dim - 1)
                ok = states[pos] == tgt
                r = pos
            rows.append(r[ok])
            cols.append(np.broadcast_to(col_idx, tgt.shape)[ok])
            vals.append(amp[ok])
        if not rows:
            return sp.csr_matrix((dim, dim), dtype=np.complex128)
        m = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
        )
        return m.tocsr()

    def to_matrix(self) -> np.ndarray:
        if self.n_qubits > 14:
            raise DimensionError("dense matrices are limited to 14 qubits")
        return self.to_sparse().toarray()


def word_matrix(word: PauliWord) -> np.ndarray:
    """Dense matrix of a single word (phase included)."""
    return PauliOperator.from_word(word).to_matrix()


# -- Clifford rotations ---------------------------------------------------

def apply_rotation(op: PauliOperator, r: PauliWord, angle_quarter_turns: int = 1) -> PauliOperator:
    """Conjugate ``op`` by ``R = exp(i k pi/4 r)``: returns ``R^dag op R``.

    Only Clifford angles are supported, so the result is exact: words that
    commute with ``r`` are unchanged, anticommuting words ``w`` become
    ``i sin(k pi/2) w r + cos(k pi/2) w``.
    """
    if r.n_qubits != op.n_qubits:
        raise DimensionError(f"qubit counts differ: {op.n_qubits} vs {r.n_qubits}")
    if r.phase % 2:
        raise ValidationError("rotation generator must be Hermitian (phase +1 or -1)")
    k = angle_quarter_turns % 4
    sign = 1 if r.phase == 0 else -1
    if k == 0 or len(op) == 0:
        return op
    anti = (popcount(op.xs & np.uint64(r.z)) + popcount(op.zs & np.uint64(r.x))) % 2 == 1
    if not np.any(anti):
        return op
    if k == 2:
        coeffs = np.where(anti, -op.coeffs, op.coeffs)
        return PauliOperator(op.n_qubits, op.xs, op.zs, coeffs)
    s = sign * (1 if k == 1 else -1)
    xs, zs, cs = op.xs[anti], op.zs[anti], op.coeffs[anti]
    ph = _product_phase(xs, zs, np.uint64(r.x), np.uint64(r.z))
    new = cs * (1j * s) * np.array(_PHASES)[ph]
    keep = ~anti
    return PauliOperator(
        op.n_qubits,
        np.concatenate([op.xs[keep], xs ^ np.uint64(r.x)]),
        np.concatenate([op.zs[keep], zs ^ np.uint64(r.z)]),
        np.concatenate([op.coeffs[keep], new]),
    )


def rotation_matrix(r: PauliWord, angle_quarter_turns: int = 1) -> np.ndarray:
    """Dense ``exp(i k pi/4 r)``, for oracles on small registers."""
    theta = angle_quarter_turns * np.pi / 4
    p = word_matrix(r)
    return np.cos(theta) * np.eye(p.shape[0]) + 1j * np.sin(theta) * p


# -- Jordan-Wigner --------------------------------------------------------

def ladder(p: int, n_qubits: int, dagger: bool) -> PauliOperator:
    """``a_p`` or ``a_p^dag`` as ``Z_{<p} (X_p +- iY_p)/2``."""
    low = (1 << p) - 1
    s = -1j if dagger else 1j
    return PauliOperator(n_qubits, [1 << p, 1 << p], [low, low | (1 << p)], [0.5, 0.5 * s])


def hopping(p: int, q: int, n_qubits: int) -> PauliOperator:
    """``a_p^dag a_q``."""
    return ladder(p, n_qubits, True) * ladder(q, n_qubits, False)


def fermion_operator(ops: Iterable[tuple[int, bool]], n_qubits: int, coeff: complex = 1.0) -> PauliOperator:
    """Product of ladder operators given as ``(index, is_creation)`` pairs, left to right."""
    out = PauliOperator.identity(n_qubits, coeff)
    for p, dag in ops:
        out = out * ladder(p, n_qubits, dag)
    return out


def jordan_wigner(h) -> PauliOperator:
    """Qubit Hamiltonian for a :class:`~csafqmc.chem.MolecularHamiltonian`.

    Spin orbitals are blocked: alpha orbitals on qubits ``0..M-1``, beta on
    ``M..2M-1``. Uses ``a_p^ a_r^ a_s a_q = E_pq E_rs - delta_qr E_ps`` on the
    spin-summed excitation operators ``E_pq``.
    """
    h.validate()
    m = h.n_spatial
    n = 2 * m
    if n > MAX_QUBITS:
        raise DimensionError(f"{n} spin orbitals exceed the {MAX_QUBITS}-qubit limit")
    e = {}
    for p in range(m):
        for q in range(m):
            e[p, q] = hopping(p, q, n) + hopping(p + m, q + m, n)
    v = h.eri
    k_eff = h.h1 - 0.5 * np.einsum("pqqs->ps", v)
    parts = [PauliOperator.identity(n, h.core_energy)]
    for p in range(m):
        for q in range(m):
            if abs(k_eff[p, q]) > DROP_TOL:
                parts.append(e[p, q] * k_eff[p, q])
    pairs = [(p, q) for p in range(m) for q in range(m)]
    for a, (p, q) in enumerate(pairs):
        for (r, s) in pairs[a:]:
            val = v[p, q, r, s]
            if abs(val) <= DROP_TOL:
                continue
            prod = e[p, q] * e[r, s]
            if (r, s) != (p, q):
                prod = prod + e[r, s] * e[p, q]
            parts.append(prod * (0.5 * val))
    return _sum_all(parts, n)


def _sum_all(parts: list[PauliOperator], n: int) -> PauliOperator:
    if not parts:
        return PauliOperator.zero(n)
    return PauliOperator(
        n,
        np.concatenate([p.xs for p in parts]),
        np.concatenate([p.zs for p in parts]),
        np.concatenate([p.coeffs for p in parts]),
    )


def number_operator(n_qubits: int, modes: Iterable[int] | None = None) -> PauliOperator:
    modes = range(n_qubits) if modes is None else modes
    out = PauliOperator.zero(n_qubits)
    for p in modes:
        out = out + hopping(p, p, n_qubits)
    return out
