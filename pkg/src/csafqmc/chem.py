"""Molecular integrals: FCIDUMP input, Cholesky factors, mean-field reference."""

from __future__ import annotations

import io
import json
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TextIO

import numpy as np

from .errors import NotPSDError, ParseError, ValidationError

SYM_TOL = 1e-10
# symmetric repeats written by other codes may differ in the last digit
DUPLICATE_TOL = 1e-12
DEFAULT_CHOLESKY_TOL = 1e-6


@dataclass(frozen=True)
class MolecularHamiltonian:
    """Spin-free electronic Hamiltonian in an orthonormal orbital basis.

    ``eri[p, q, r, s]`` is the chemist-notation integral ``(pq|rs)``.
    """

    n_spatial: int
    n_alpha: int
    n_beta: int
    core_energy: float
    h1: np.ndarray
    eri: np.ndarray
    orbsym: tuple[int, ...] = ()

    @property
    def n_qubits(self) -> int:
        return 2 * self.n_spatial

    @property
    def n_electrons(self) -> int:
        return self.n_alpha + self.n_beta

    def validate(self, tol: float = SYM_TOL) -> None:
        m = self.n_spatial
        if self.h1.shape != (m, m) or self.eri.shape != (m, m, m, m):
            raise ValidationError("integral shapes do not match n_spatial")
        if not (0 <= self.n_alpha <= m and 0 <= self.n_beta <= m):
            raise ValidationError("electron counts exceed the number of orbitals")
        if np.max(np.abs(self.h1 - self.h1.T), initial=0.0) > tol:
            raise ValidationError("one-body integrals are not symmetric")
        v = self.eri
        for perm in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
            if np.max(np.abs(v - v.transpose(perm)), initial=0.0) > tol:
                raise ValidationError(f"two-body integrals break permutational symmetry {perm}")


_HEADER_KEY = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=")


def _parse_header(text: str, line: int) -> dict[str, list[int]]:
    body = text.strip()
    if not body.upper().startswith("&FCI"):
        raise ParseError("header must start with &FCI", line)
    body = body[4:]
    keys = list(_HEADER_KEY.finditer(body))
    out: dict[str, list[int]] = {}
    for k, match in enumerate(keys):
        end = keys[k + 1].start() if k + 1 < len(keys) else len(body)
        items = [t for t in re.split(r"[,\s]+", body[match.end():end]) if t]
        try:
            out[match.group(1).upper()] = [int(t) for t in items]
        except ValueError:
            out[match.group(1).upper()] = []
    return out


def parse_fcidump(stream: TextIO | str) -> MolecularHamiltonian:
    """Read an FCIDUMP file (path, text, or open stream).

    Indices are 1-based. ``0 0 0 0`` is the core energy, ``i j 0 0`` the
    one-body integral, anything else ``(ij|kl)``. Entries are expanded over the
    8-fold permutational symmetry; a repeated canonical entry overwrites the
    earlier one, with a warning when the values differ. ORBSYM is kept but otherwise unused.
    """
    if isinstance(stream, Path):
        text = stream.read_text()
    elif isinstance(stream, str):
        text = stream if "&FCI" in stream.upper() else Path(stream).read_text()
    else:
        text = stream.read()
    lines = text.splitlines()

    header_parts = []
    start = None
    for i, raw in enumerate(lines):
        m = re.search(r"&END|(^|\s)/\s*$", raw, flags=re.I)
        if m:
            header_parts.append(raw[: m.start()])
            start = i + 1
            break
        header_parts.append(raw)
    if start is None:
        raise ParseError("header is not terminated by &END or /", len(lines))
    hdr = _parse_header("\n".join(header_parts), 1)
    for key in ("NORB", "NELEC"):
        if key not in hdr or len(hdr[key]) != 1:
            raise ParseError(f"header is missing {key}", 1)
    norb, nelec = hdr["NORB"][0], hdr["NELEC"][0]
    ms2 = hdr.get("MS2", [0])[0] if hdr.get("MS2") else 0
    if norb <= 0 or nelec < 0:
        raise ParseError("NORB must be positive and NELEC non-negative", 1)
    if (nelec + ms2) % 2 or abs(ms2) > nelec:
        raise ParseError(f"NELEC={nelec} and MS2={ms2} are inconsistent", 1)
    n_alpha, n_beta = (nelec + ms2) // 2, (nelec - ms2) // 2
    if n_alpha > norb or n_beta > norb:
        raise ParseError(f"NELEC={nelec} does not fit in NORB={norb}", 1)

    h1 = np.zeros((norb, norb))
    eri = np.zeros((norb, norb, norb, norb))
    core = 0.0
    seen_h: set = set()
    seen_v: set = set()
    for lineno, raw in enumerate(lines[start:], start=start + 1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ParseError(f"expected 'value i j k l', got {raw.strip()!r}", lineno)
        try:
            val = float(parts[0].replace("D", "E").replace("d", "e"))
            i, j, k, l = (int(t) for t in parts[1:])
        except ValueError as exc:
            raise ParseError(f"cannot parse {raw.strip()!r}", lineno) from exc
        if min(i, j, k, l) < 0 or max(i, j, k, l) > norb:
            raise ParseError(f"index out of range 0..{norb}", lineno)
        if i == j == k == l == 0:
            core = val
        elif k == 0 and l == 0:
            if i == 0 or j == 0:
                if j == 0 and i > 0:
                    continue  # orbital energy line
                raise ParseError("one-body entry needs two nonzero indices", lineno)
            key = (max(i, j), min(i, j))
            if key in seen_h and abs(h1[i - 1, j - 1] - val) > DUPLICATE_TOL:
                warnings.warn(f"FCIDUMP line {lineno}: duplicate one-body entry {key}; later value kept")
            seen_h.add(key)
            h1[i - 1, j - 1] = h1[j - 1, i - 1] = val
        else:
            if 0 in (i, j, k, l):
                raise ParseError("two-body entry needs four nonzero indices", lineno)
            p, q, r, s = i - 1, j - 1, k - 1, l - 1
            a, b = (max(p, q), min(p, q)), (max(r, s), min(r, s))
            key = (max(a, b), min(a, b))
            if key in seen_v and abs(eri[p, q, r, s] - val) > DUPLICATE_TOL:
                warnings.warn(f"FCIDUMP line {lineno}: duplicate two-body entry {key}; later value kept")
            seen_v.add(key)
            for (w, x) in ((p, q), (q, p)):
                for (y, z) in ((r, s), (s, r)):
                    eri[w, x, y, z] = val
                    eri[y, z, w, x] = val
    return MolecularHamiltonian(
        n_spatial=norb,
        n_alpha=n_alpha,
        n_beta=n_beta,
        core_energy=core,
        h1=h1,
        eri=eri,
        orbsym=tuple(hdr.get("ORBSYM", [])),
    )


def write_fcidump(h: MolecularHamiltonian, stream: TextIO, tol: float = 1e-14) -> None:
    """Write the unique integrals of ``h`` in FCIDUMP layout."""
    m = h.n_spatial
    ms2 = h.n_alpha - h.n_beta
    stream.write(f" &FCI NORB={m},NELEC={h.n_electrons},MS2={ms2},\n")
    if h.orbsym:
        stream.write("  ORBSYM=" + ",".join(str(s) for s in h.orbsym) + ",\n")
    stream.write("  ISYM=1,\n &END\n")
    for p in range(m):
        for q in range(p + 1):
            for r in range(m):
                for s in range(r + 1):
                    if p * (p + 1) // 2 + q < r * (r + 1) // 2 + s:
                        continue
                    v = h.eri[p, q, r, s]
                    if abs(v) > tol:
                        stream.write(f" {v:.16g} {p + 1} {q + 1} {r + 1} {s + 1}\n")
    for p in range(m):
        for q in range(p + 1):
            if abs(h.h1[p, q]) > tol:
                stream.write(f" {h.h1[p, q]:.16g} {p + 1} {q + 1} 0 0\n")
    stream.write(f" {h.core_energy:.16g} 0 0 0 0\n")


# -- Cholesky ---------------------------------------------------------------

@dataclass(frozen=True)
class CholeskyFactorization:
    """``(pq|rs) ~= sum_g L[g, p, q] L[g, r, s]``."""

    factors: np.ndarray
    residual_bound: float

    @property
    def n_factors(self) -> int:
        return self.factors.shape[0]

    def reconstruct(self) -> np.ndarray:
        return np.einsum("gpq,grs->pqrs", self.factors, self.factors)


def cholesky_factorize(h: MolecularHamiltonian, tol: float = DEFAULT_CHOLESKY_TOL) -> CholeskyFactorization:
    """Pivoted incomplete Cholesky of the ``(pq),(rs)`` supermatrix.

    Stops once the largest remaining diagonal drops below ``tol``; that value is
    a bound on every reconstruction error for a PSD supermatrix.
    """
    m = h.n_spatial
    sup = h.eri.reshape(m * m, m * m)
    diag = np.diag(sup).copy()
    if diag.size and diag.min() < -tol:
        raise NotPSDError(f"negative ERI diagonal {diag.min():.3e}")
    vecs: list[np.ndarray] = []
    max_vecs = m * (m + 1) // 2 + 1
    while diag.size and diag.max() >= tol and len(vecs) < max_vecs:
        piv = int(np.argmax(diag))
        col = sup[:, piv].copy()
        for v in vecs:
            col -= v * v[piv]
        d = col[piv]
        if d < -tol:
            raise NotPSDError(f"negative pivot {d:.3e} at index {piv}")
        if d < tol:
            break
        v = col / np.sqrt(d)
        vecs.append(v)
        diag -= v * v
        if diag.min() < -tol:
            raise NotPSDError(f"residual diagonal {diag.min():.3e} below -tol")
    factors = np.array(vecs).reshape(-1, m, m) if vecs else np.zeros((0, m, m))
    factors = 0.5 * (factors + factors.transpose(0, 2, 1))
    bound = float(max(diag.max(), 0.0)) if diag.size else 0.0
    return CholeskyFactorization(factors=factors, residual_bound=bound)


# -- mean-field reference ---------------------------------------------------

@dataclass(frozen=True)
class ReferenceState:
    """Aufbau determinant plus MP2 doubles used to weight stabilizer choices.

    Spin orbitals are blocked (alpha ``0..M-1``, beta ``M..2M-1``);
    ``mp2_doubles`` maps ``(i, j, a, b)`` with ``i < j`` occupied and ``a < b``
    virtual to ``<ij||ab> / (e_i + e_j - e_a - e_b)``.
    """

    hf_occupation: int
    hf_energy: float
    fock_diagonal: np.ndarray
    mp2_doubles: dict = field(default_factory=dict)

    @property
    def occupied(self) -> list[int]:
        return [p for p in range(len(self.fock_diagonal)) if (self.hf_occupation >> p) & 1]


def hf_bitstring(n_spatial: int, n_alpha: int, n_beta: int) -> int:
    occ = 0
    for p in range(n_alpha):
        occ |= 1 << p
    for p in range(n_beta):
        occ |= 1 << (p + n_spatial)
    return occ


def _spin_integrals(h: MolecularHamiltonian):
    m = h.n_spatial
    spin = np.array([0] * m + [1] * m)
    spat = np.array(list(range(m)) * 2)
    return spin, spat


def determinant_energy(h: MolecularHamiltonian, occupation: int) -> float:
    """Diagonal energy of a single determinant given as a spin-orbital bitmask."""
    m = h.n_spatial
    spin, spat = _spin_integrals(h)
    occ = [p for p in range(2 * m) if (occupation >> p) & 1]
    e = h.core_energy
    for i in occ:
        e += h.h1[spat[i], spat[i]]
    for a, i in enumerate(occ):
        for j in occ[a + 1:]:
            pi, pj = spat[i], spat[j]
            e += h.eri[pi, pi, pj, pj]
            if spin[i] == spin[j]:
                e -= h.eri[pi, pj, pj, pi]
    return float(e)


def build_reference(h: MolecularHamiltonian) -> ReferenceState:
    """Aufbau HF determinant, its energy, Fock diagonal and MP2 doubles."""
    h.validate()
    m = h.n_spatial
    spin, spat = _spin_integrals(h)
    occ_bits = hf_bitstring(m, h.n_alpha, h.n_beta)
    occ = [p for p in range(2 * m) if (occ_bits >> p) & 1]
    virt = [p for p in range(2 * m) if not (occ_bits >> p) & 1]
    v = h.eri

    fock = np.empty(2 * m)
    for p in range(2 * m):
        sp_ = spat[p]
        f = h.h1[sp_, sp_]
        for q in occ:
            sq = spat[q]
            f += v[sp_, sp_, sq, sq]
            if spin[p] == spin[q]:
                f -= v[sp_, sq, sq, sp_]
        fock[p] = f

    doubles: dict = {}
    flagged = 0
    for a_i, i in enumerate(occ):
        for j in occ[a_i + 1:]:
            for a_a, a in enumerate(virt):
                for b in virt[a_a + 1:]:
                    g = 0.0
                    if spin[i] == spin[a] and spin[j] == spin[b]:
                        g += v[spat[i], spat[a], spat[j], spat[b]]
                    if spin[i] == spin[b] and spin[j] == spin[a]:
                        g -= v[spat[i], spat[b], spat[j], spat[a]]
                    if g == 0.0:
                        continue
                    den = fock[i] + fock[j] - fock[a] - fock[b]
                    if abs(den) < 1e-10:
                        flagged += 1
                        t = 0.0
                    else:
                        t = g / den
                    if t != 0.0:
                        doubles[(i, j, a, b)] = t
    if flagged:
        warnings.warn(f"{flagged} MP2 amplitudes have vanishing denominators and were set to zero")
    return ReferenceState(
        hf_occupation=occ_bits,
        hf_energy=determinant_energy(h, occ_bits),
        fock_diagonal=fock,
        mp2_doubles=doubles,
    )


# -- fixtures ------------------------------------------------------------------

def _data_dir():
    return resources.files("csafqmc") / "data"


def fixture_names() -> list[str]:
    return sorted(p.name[: -len(".fcidump")] for p in _data_dir().iterdir() if p.name.endswith(".fcidump"))


def load_fixture(name: str) -> MolecularHamiltonian:
    """Load a bundled FCIDUMP by name, e.g. ``"h2"`` or ``"n2_1.134"``."""
    path = _data_dir() / f"{name}.fcidump"
    if not path.is_file():
        raise FileNotFoundError(f"no fixture {name!r}; available: {fixture_names()}")
    return parse_fcidump(io.StringIO(path.read_text()))


def reference_energies(name: str) -> dict:
    """HF / FCI / CCSD / CCSD(T) reference values bundled with the fixtures."""
    refs = json.loads((_data_dir() / "reference.json").read_text())
    return refs[name]
