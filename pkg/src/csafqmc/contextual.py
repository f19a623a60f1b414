"""Contextual-subspace machinery.

Pipeline: split H into its diagonal (noncontextual) part and the rest, solve
the diagonal part as a QUSO problem, pick Z-type stabilizers, rotate them onto
single qubits with pi/2 Clifford rotations, project the Hamiltonian onto the
stabilized subspace, and rotate the subspace ground state back into a sparse
trial wavefunction.

Frame convention: ``U = R_1 R_2 ... R_m`` with ``R_k = exp(i s_k pi/4 P_k)``.
The rotated Hamiltonian is ``U^dag H U`` and every stabilizer satisfies
``U^dag W_k U = +-Z_j`` for a distinct fixed qubit ``j``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from .chem import ReferenceState
from .errors import DimensionError, ParticleSectorViolation, UnsupportedFrameError, ValidationError
from .exact import GroundState, SectorBasis, StateVector, ground_state, particle_counts
from .pauli import (
    PauliOperator,
    PauliWord,
    _PHASES,
    apply_rotation,
    fermion_operator,
    popcount,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
TRUNCATION_LOSS = 5e-5
TRUNCATION_MAX_TERMS = 100
EXHAUSTIVE_LIMIT = 16
PROJECTED_SOLVE_LIMIT = 16
AMP_TOL = 1e-13
SECTOR_LEAK_TOL = 1e-10  # eigensolver noise outside the target sector, in probability weight


# -- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class ContextualSplit:
    h_nc: PauliOperator
    h_c: PauliOperator
    generators: tuple[PauliWord, ...]

    @property
    def n_qubits(self) -> int:
        return self.h_nc.n_qubits

    @property
    def full(self) -> PauliOperator:
        return self.h_nc + self.h_c


def split_hamiltonian(h: PauliOperator) -> ContextualSplit:
    """Diagonal Z/I words go to ``h_nc``, everything else to ``h_c``."""
    diag = h.diagonal_mask
    gens = tuple(PauliWord(h.n_qubits, 0, 1 << i) for i in range(h.n_qubits))
    return ContextualSplit(h.select(diag), h.select(~diag), gens)


# -- noncontextual problem ---------------------------------------------------

@dataclass(frozen=True)
class NoncontextualSolution:
    """Value assignment ``q_i = <Z_i>`` and the matching basis state."""

    q: np.ndarray
    energy_nc: float
    state: int
    exhaustive: bool = False

    @classmethod
    def from_state(cls, h_nc: PauliOperator, state: int, exhaustive: bool = False):
        n = h_nc.n_qubits
        q = np.array([1 - 2 * ((state >> i) & 1) for i in range(n)], dtype=np.int8)
        return cls(q, noncontextual_energy(h_nc, state), int(state), exhaustive)


def noncontextual_energy(h_nc: PauliOperator, state) -> float:
    """Closed-form ``sum_n c_n prod_{i in n} q_i`` at basis state(s)."""
    scalar = np.isscalar(state)
    e = h_nc.diagonal(np.atleast_1d(np.asarray(state, dtype=np.uint64))).real
    return float(e[0]) if scalar else e


class _IsingModel:
    """Diagonal operator as a sum of signed products, with O(deg) flip updates."""

    def __init__(self, h_nc: PauliOperator):
        self.n = h_nc.n_qubits
        self.c = h_nc.coeffs.real.copy()
        self.z = h_nc.zs.copy()
        self.touch = [np.flatnonzero((self.z >> np.uint64(i)) & np.uint64(1)) for i in range(self.n)]

    def signs(self, state: int) -> np.ndarray:
        return 1.0 - 2.0 * (popcount(self.z & np.uint64(state)) % 2)

    def delta(self, signs: np.ndarray, i: int) -> float:
        t = self.touch[i]
        return -2.0 * float(self.c[t] @ signs[t])


def _anneal(model: _IsingModel, start: int, rng, sweeps: int, t_start: float, t_end: float,
            units, blocks=None):
    """Metropolis annealing over flip ``units`` (tuples of qubits flipped together).

    With ``blocks`` (lists of unit indices), a move swaps an occupied and an
    empty unit inside one block, so occupation counts are conserved;
    otherwise a move flips one unit.
    """
    state = start
    signs = model.signs(state)
    energy = float(model.c @ signs)
    best_state, best_e = state, energy
    temps = np.geomspace(t_start, t_end, max(sweeps, 2))
    for T in temps:
        for _ in range(len(units)):
            if blocks is None:
                move = units[int(rng.integers(len(units)))]
            else:
                blk = blocks[int(rng.integers(len(blocks)))]
                occ = [u for u in blk if (state >> units[u][0]) & 1]
                emp = [u for u in blk if not (state >> units[u][0]) & 1]
                if not occ or not emp:
                    continue
                move = units[occ[int(rng.integers(len(occ)))]] + units[emp[int(rng.integers(len(emp)))]]
            d = _flip(model, signs, move)
            if d <= 0 or rng.random() < np.exp(-d / T):
                for q in move:
                    state ^= 1 << q
                energy += d
                if energy < best_e - 1e-12:
                    best_state, best_e = state, energy
            else:
                _flip(model, signs, move)
    return best_state, best_e


def _flip(model: _IsingModel, signs: np.ndarray, qubits) -> float:
    """Flip ``qubits`` in place on ``signs`` and return the energy change."""
    d = 0.0
    for q in qubits:
        d += model.delta(signs, q)
        signs[model.touch[q]] *= -1
    return d


def _greedy(model: _IsingModel, state: int, units, blocks=None):
    signs = model.signs(state)
    if blocks is None:
        moves = list(units)
    else:
        moves = [units[a] + units[b] for blk in blocks for a in blk for b in blk if a < b]
    while True:
        best, best_d = None, -1e-12
        for mv in moves:
            if blocks is not None and ((state >> mv[0]) & 1) == ((state >> mv[-1]) & 1):
                continue
            d = _flip(model, signs, mv)
            _flip(model, signs, mv)
            if d < best_d:
                best, best_d = mv, d
        if best is None:
            return state
        for q in best:
            state ^= 1 << q
        _flip(model, signs, best)


def _tie_break(candidates: np.ndarray, seed_state: int) -> int:
    """Among (near-)degenerate minima prefer the one closest to the seed."""
    dist = popcount(candidates ^ np.uint64(seed_state))
    return int(candidates[np.lexsort((candidates, dist))[0]])


def _search_space(n: int, seed_state: int, constraint: str):
    """Flip units, swap blocks and the enumerable space for a constraint."""
    if constraint == "none":
        return [(q,) for q in range(n)], None, lambda: np.arange(1 << n, dtype=np.uint64), 1 << n
    if n % 2:
        raise ValueError("particle constraints need an even number of spin orbitals")
    m = n // 2
    na, nb = (int(v[0]) for v in particle_counts(np.array([seed_state], np.uint64), m))
    if constraint == "sector":
        units = [(q,) for q in range(n)]
        blocks = [list(range(m)), list(range(m, n))]
        size = comb(m, na) * comb(m, nb)
        return units, blocks, lambda: SectorBasis.particle(m, na, nb).states, size
    if constraint == "spin_restricted":
        amask = (1 << m) - 1
        if na != nb or (seed_state & amask) != (seed_state >> m):
            raise ValueError("spin-restricted search needs a closed-shell seed state")
        units = [(p, p + m) for p in range(m)]
        alphas = SectorBasis.particle(m, na, 0).states & np.uint64(amask)
        return units, [list(range(m))], lambda: alphas | (alphas << np.uint64(m)), comb(m, na)
    raise ValueError(f"unknown constraint {constraint!r}")


def solve_noncontextual(
    split: ContextualSplit,
    ref: ReferenceState | None = None,
    *,
    seed_state: int | None = None,
    constraint: str = "auto",
    seed: int = 0,
    sweeps_per_qubit: int = 200,
    t_start: float = 5.0,
    t_end: float = 1e-3,
    exhaustive_limit: int = EXHAUSTIVE_LIMIT,
) -> NoncontextualSolution:
    """Minimize the diagonal energy over ``q in {+-1}^N``.

    Simulated annealing seeded from the HF occupation, then greedy descent.
    ``constraint`` restricts the search around the mean-field seed:

    - ``"spin_restricted"``: closed-shell assignments with the seed's electron
      count (alpha and beta orbitals flip together);
    - ``"sector"``: the seed's ``(n_alpha, n_beta)`` sector;
    - ``"none"``: all ``2^N`` assignments;
    - ``"auto"`` (default): spin-restricted for a closed-shell seed, else sector.

    When the space has at most ``2**exhaustive_limit`` states an exhaustive
    scan also runs and wins if the heuristic missed the minimum (logged).
    Degenerate minima are resolved toward the seed state.
    """
    h_nc = split.h_nc
    n = h_nc.n_qubits
    if seed_state is None:
        seed_state = ref.hf_occupation if ref is not None else 0
    if n == 0 or len(h_nc) == 0:
        return NoncontextualSolution.from_state(h_nc, seed_state)
    if constraint == "auto":
        m = n // 2
        closed = n % 2 == 0 and (seed_state & ((1 << m) - 1)) == (seed_state >> m)
        constraint = "spin_restricted" if closed else "sector"
    units, blocks, enumerate_space, size = _search_space(n, seed_state, constraint)
    model = _IsingModel(h_nc)
    rng = np.random.default_rng(seed)
    s, _ = _anneal(model, seed_state, rng, sweeps_per_qubit * len(units), t_start, t_end, units, blocks)
    s = _greedy(model, s, units, blocks)
    e_heur = noncontextual_energy(h_nc, s)
    exhaustive = size <= 1 << exhaustive_limit
    if exhaustive:
        space = enumerate_space()
        e = noncontextual_energy(h_nc, space)
        emin = float(e.min())
        if e_heur > emin + 1e-9:
            log.warning("annealing missed the noncontextual minimum by %.3e Ha", e_heur - emin)
        minima = space[e <= emin + 1e-10]
    else:
        cands = np.array([s, seed_state], dtype=np.uint64)
        e = noncontextual_energy(h_nc, cands)
        minima = cands[e <= float(e.min()) + 1e-10]
    return NoncontextualSolution.from_state(h_nc, _tie_break(minima, seed_state), exhaustive)


# -- sparse rotation of basis-state expansions --------------------------------

def _word_on_states(word: PauliWord, states: np.ndarray):
    """``P|b> = amp |b ^ x>`` for a batch of basis states."""
    x, z = np.uint64(word.x), np.uint64(word.z)
    sign = 1 - 2 * (popcount(states & z) % 2)
    ph = _PHASES[(word.phase + popcount(np.uint64(word.x & word.z))) % 4]
    return states ^ x, ph * sign


def _rotate_batch(rotations, keys, states, amps, adjoint: bool):
    """Apply ``R_k = exp(i s pi/4 P)`` gates in the given order to a batch.

    ``keys`` labels independent input states so that one call can map many
    basis states at once; terms are merged per ``(key, state)``.
    """
    c = np.sqrt(0.5)
    for word, s in rotations:
        s = -s if adjoint else s
        tgt, a = _word_on_states(word, states)
        keys = np.concatenate([keys, keys])
        states = np.concatenate([states, tgt])
        amps = np.concatenate([amps * c, amps * (1j * s * c) * a])
        order = np.lexsort((states, keys))
        keys, states, amps = keys[order], states[order], amps[order]
        new = np.ones(len(keys), dtype=bool)
        new[1:] = (keys[1:] != keys[:-1]) | (states[1:] != states[:-1])
        idx = np.cumsum(new) - 1
        summed = np.zeros(int(new.sum()), dtype=np.complex128)
        np.add.at(summed, idx, amps)
        keys, states = keys[new], states[new]
        keep = np.abs(summed) > AMP_TOL
        keys, states, amps = keys[keep], states[keep], summed[keep]
    return keys, states, amps


# -- stabilizer frames -------------------------------------------------------

@dataclass(frozen=True)
class StabilizerFrame:
    """Chosen stabilizers, their rotation sequence and the fixed-qubit values.

    ``rotations`` lists ``(P, s)`` pairs in product order ``U = R_1 R_2 ...``
    with ``R = exp(i s pi/4 P)``. ``fixed_qubits`` maps qubit to the
    eigenvalue of ``Z_j`` on ``U^dag |nc>``; ``cs_qubits`` are the rest.
    """

    n_qubits: int
    stabilizers: tuple[PauliWord, ...]
    rotations: tuple[tuple[PauliWord, int], ...]
    fixed_qubits: dict[int, int]
    cs_qubits: tuple[int, ...]
    targets: tuple[int, ...] = ()

    @property
    def n_cs(self) -> int:
        return len(self.cs_qubits)

    @property
    def fixed_mask(self) -> int:
        return sum(1 << j for j in self.fixed_qubits)

    @property
    def fixed_bits(self) -> int:
        return sum(1 << j for j, v in self.fixed_qubits.items() if v < 0)

    def rotate_operator(self, op: PauliOperator) -> PauliOperator:
        """``U^dag op U``."""
        for word, s in self.rotations:
            op = apply_rotation(op, word, s)
        return op

    def apply(self, psi: StateVector, adjoint: bool = False) -> StateVector:
        """``U|psi>`` (or ``U^dag|psi>``) exactly, in the sparse representation."""
        if psi.n_qubits != self.n_qubits:
            raise DimensionError(f"state has {psi.n_qubits} qubits, frame {self.n_qubits}")
        nz = psi.amplitudes != 0
        states, amps = psi.states[nz], psi.amplitudes[nz]
        rots = self.rotations if adjoint else self.rotations[::-1]
        keys = np.zeros(len(states), dtype=np.int64)
        _, states, amps = _rotate_batch(rots, keys, states, amps, adjoint)
        return StateVector(self.n_qubits, amps, states)

    def basis_map(self, states, adjoint: bool = True):
        """Image of each basis state under ``U^dag`` (default) or ``U``.

        Returns ``(images, phases)``. Raises ``UnsupportedFrameError`` if some
        image is not a single basis state.
        """
        states = np.asarray(states, dtype=np.uint64)
        rots = self.rotations if adjoint else self.rotations[::-1]
        keys = np.arange(len(states), dtype=np.int64)
        k, s, a = _rotate_batch(rots, keys, states, np.ones(len(states), complex), adjoint)
        if len(k) != len(states) or np.any(k != keys):
            raise UnsupportedFrameError("rotation sequence does not map basis states to basis states")
        return s, a

    def with_rotations(self, rotations) -> "StabilizerFrame":
        return StabilizerFrame(self.n_qubits, self.stabilizers, tuple(rotations),
                               dict(self.fixed_qubits), self.cs_qubits, self.targets)

    def to_json(self) -> str:
        def w(word):
            return {"x": hex(word.x), "z": hex(word.z), "phase": word.phase}
        doc = {
            "format": "csafqmc-frame",
            "version": FORMAT_VERSION,
            "n_qubits": self.n_qubits,
            "stabilizers": [w(s) for s in self.stabilizers],
            "rotations": [dict(w(p), sign=s) for p, s in self.rotations],
            "fixed_qubits": {str(k): v for k, v in sorted(self.fixed_qubits.items())},
            "cs_qubits": list(self.cs_qubits),
            "targets": list(self.targets),
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StabilizerFrame":
        doc = json.loads(text)
        _check_format(doc, "csafqmc-frame")
        n = doc["n_qubits"]

        def w(d):
            return PauliWord(n, int(d["x"], 16), int(d["z"], 16), d["phase"])
        return cls(
            n,
            tuple(w(d) for d in doc["stabilizers"]),
            tuple((w(d), int(d["sign"])) for d in doc["rotations"]),
            {int(k): int(v) for k, v in doc["fixed_qubits"].items()},
            tuple(doc["cs_qubits"]),
            tuple(doc.get("targets", ())),
        )


def _check_format(doc: dict, name: str) -> None:
    if doc.get("format") != name:
        raise ValidationError(f"not a {name} document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported {name} version {doc.get('version')}")


def _gf2_rank(masks: list[int]) -> int:
    basis: list[int] = []
    for m in masks:
        for b in basis:
            m = min(m, m ^ b)
        if m:
            basis.append(m)
    return len(basis)


def auxiliary_operator(ref: ReferenceState, n_qubits: int) -> PauliOperator:
    """JW image of the MP2 doubles generator ``T - T^dag``.

    Stands in for the coupled-cluster style auxiliary operator used to score
    stabilizer candidates.
    """
    parts = []
    for (i, j, a, b), t in ref.mp2_doubles.items():
        exc = fermion_operator([(a, True), (b, True), (j, False), (i, False)], n_qubits, t)
        parts.append(exc - exc.adjoint())
    if not parts:
        return PauliOperator.zero(n_qubits)
    xs = np.concatenate([p.xs for p in parts])
    zs = np.concatenate([p.zs for p in parts])
    cs = np.concatenate([p.coeffs for p in parts])
    return PauliOperator(n_qubits, xs, zs, cs)


def score_candidates(aux: PauliOperator, candidates: list[int]) -> np.ndarray:
    """Sum of |coef| over auxiliary words that commute with each Z-type candidate."""
    w = np.abs(aux.coeffs)
    out = np.empty(len(candidates))
    for k, z in enumerate(candidates):
        even = popcount(aux.xs & np.uint64(z)) % 2 == 0
        out[k] = w[even].sum()
    return out


def _candidate_pool(n: int, max_weight: int) -> list[int]:
    pool = []
    for w in range(1, max_weight + 1):
        for combo in combinations(range(n), w):
            pool.append(sum(1 << q for q in combo))
    return pool


def choose_stabilizers(aux: PauliOperator, n_qubits: int, count: int, max_weight: int = 2) -> list[int]:
    """Greedy pick of ``count`` GF(2)-independent Z-masks by descending score.

    Ties go to lower weight, then to the smaller mask.
    """
    pool = _candidate_pool(n_qubits, max_weight)
    scores = score_candidates(aux, pool)
    weights = [bin(m).count("1") for m in pool]
    order = sorted(range(len(pool)), key=lambda k: (-round(scores[k], 12), weights[k], pool[k]))
    chosen: list[int] = []
    for k in order:
        if len(chosen) == count:
            break
        if _gf2_rank(chosen + [pool[k]]) == len(chosen) + 1:
            chosen.append(pool[k])
    if len(chosen) < count:
        raise ValidationError(f"candidate pool of weight <= {max_weight} spans fewer than {count} stabilizers")
    return chosen


def build_frame(n_qubits: int, stabilizer_masks: list[int], nc_state: int) -> StabilizerFrame:
    """Rotations taking each Z-type stabilizer to a single-qubit Z.

    For each stabilizer in turn, its current-frame image ``+-Z_S`` is rotated
    by the pair ``P = Z_{S\\j} Y_j`` then ``P~ = Y_j``, where ``j`` is the
    largest not-yet-fixed qubit in ``S``. Single-qubit images need no
    rotation. Earlier targets only ever carry Z factors, so they stay put.
    """
    stabs = tuple(PauliWord(n_qubits, 0, m) for m in stabilizer_masks)
    rotations: list[tuple[PauliWord, int]] = []
    fixed: list[int] = []
    for w in stabs:
        cur = PauliOperator.from_word(w)
        for p, s in rotations:
            cur = apply_rotation(cur, p, s)
        if len(cur) != 1 or cur.xs[0] != 0:
            raise UnsupportedFrameError("stabilizers must be commuting Z-type words")
        zmask = int(cur.zs[0])
        free = zmask & ~sum(1 << j for j in fixed)
        if not free:
            raise ValidationError("stabilizers are not independent")
        j = free.bit_length() - 1
        if zmask != 1 << j:
            # x = z = 1 on qubit j encodes Y_j in the i^{x.z} X^x Z^z convention
            rotations.append((PauliWord(n_qubits, 1 << j, zmask), 1))
            rotations.append((PauliWord(n_qubits, 1 << j, 1 << j), 1))
        fixed.append(j)
    img, _ = _rotate_batch(rotations, np.zeros(1, np.int64), np.array([nc_state], np.uint64),
                           np.ones(1, complex), adjoint=True)[1:]
    if len(img) != 1:
        raise UnsupportedFrameError("noncontextual state is not mapped to a basis state")
    nc_rot = int(img[0])
    fixed_vals = {j: 1 - 2 * ((nc_rot >> j) & 1) for j in fixed}
    cs = tuple(q for q in range(n_qubits) if q not in fixed_vals)
    return StabilizerFrame(n_qubits, stabs, tuple(rotations), fixed_vals, cs, tuple(fixed))


def select_stabilizers(
    split: ContextualSplit,
    ref: ReferenceState,
    n_cs: int,
    nc: NoncontextualSolution | None = None,
    *,
    max_weight: int = 2,
) -> StabilizerFrame:
    """Choose ``N - n_cs`` stabilizers preserving the most auxiliary weight."""
    n = split.n_qubits
    if not 0 <= n_cs <= n:
        raise ValueError(f"n_cs must be in 0..{n}, got {n_cs}")
    nc_state = nc.state if nc is not None else ref.hf_occupation
    count = n - n_cs
    if count == 0:
        return StabilizerFrame(n, (), (), {}, tuple(range(n)), ())
    aux = auxiliary_operator(ref, n)
    masks = choose_stabilizers(aux, n, count, max_weight)
    return build_frame(n, masks, nc_state)


def _compress_bits(values: np.ndarray, positions) -> np.ndarray:
    out = np.zeros_like(values)
    for k, q in enumerate(positions):
        out |= ((values >> np.uint64(q)) & np.uint64(1)) << np.uint64(k)
    return out


def _expand_bits(values: np.ndarray, positions) -> np.ndarray:
    out = np.zeros_like(values)
    for k, q in enumerate(positions):
        out |= ((values >> np.uint64(k)) & np.uint64(1)) << np.uint64(q)
    return out


def _check_consistent(frame: StabilizerFrame, nc: NoncontextualSolution) -> None:
    if not frame.fixed_qubits:
        return
    img, _ = frame.basis_map([nc.state])
    for j, v in frame.fixed_qubits.items():
        if 1 - 2 * ((int(img[0]) >> j) & 1) != v:
            raise ValidationError(f"frame fixes qubit {j} to {v}, inconsistent with the noncontextual state")


def project_operator(op: PauliOperator, frame: StabilizerFrame) -> PauliOperator:
    """Rotate ``op`` into the frame and restrict it to the contextual qubits."""
    rot = frame.rotate_operator(op)
    fmask = np.uint64(frame.fixed_mask)
    keep = (rot.xs & fmask) == 0
    xs, zs, cs = rot.xs[keep], rot.zs[keep], rot.coeffs[keep]
    signs = 1 - 2 * (popcount(zs & np.uint64(frame.fixed_bits)) % 2)
    return PauliOperator(frame.n_cs, _compress_bits(xs, frame.cs_qubits),
                         _compress_bits(zs, frame.cs_qubits), cs * signs)


def project_contextual(split: ContextualSplit, frame: StabilizerFrame, nc: NoncontextualSolution) -> PauliOperator:
    """Contextual-subspace Hamiltonian on ``n_cs`` qubits.

    The full ``h_nc + h_c`` is projected, so the subspace ground energy is
    directly the CSA energy and the noncontextual part is not counted twice.
    """
    _check_consistent(frame, nc)
    return project_operator(split.full, frame)


# -- solving in the subspace ---------------------------------------------------

@dataclass(frozen=True)
class CSASolution:
    n_cs: int
    e_nc: float
    e_csa: float
    psi_cs: StateVector
    frame: StabilizerFrame
    nc: NoncontextualSolution
    method: str
    degenerate: bool = False

    @property
    def e_c(self) -> float:
        return self.e_csa - self.e_nc


def _stabilized_states(frame: StabilizerFrame, nc_state: int, sector: SectorBasis) -> SectorBasis:
    keep = np.ones(len(sector), dtype=bool)
    for w in frame.stabilizers:
        z = np.uint64(w.z)
        keep &= (popcount(sector.states & z) % 2) == (popcount(np.uint64(nc_state) & z) % 2)
    return sector.restrict(keep)


def solve_contextual(
    split: ContextualSplit,
    frame: StabilizerFrame,
    nc: NoncontextualSolution,
    *,
    method: str = "auto",
    n_spatial: int | None = None,
    n_alpha: int | None = None,
    n_beta: int | None = None,
) -> CSASolution:
    """Ground state of the projected Hamiltonian.

    ``method="projected"`` diagonalizes the rotated, projected operator on
    ``n_cs`` qubits with no particle-number restriction, which is how the
    wrong-sector failure can surface. ``method="sectored"`` solves the
    equivalent problem in the original frame: the Hamiltonian restricted to
    the particle sector and to the stabilizer eigenspace containing the
    noncontextual state. ``auto`` uses the projected path up to
    ``PROJECTED_SOLVE_LIMIT`` contextual qubits.
    """
    if method == "auto":
        method = "projected" if frame.n_cs <= PROJECTED_SOLVE_LIMIT else "sectored"
    if frame.n_cs == 0:
        h_cs = project_contextual(split, frame, nc)
        psi = StateVector(0, [1.0])
        return CSASolution(0, nc.energy_nc, float(h_cs.constant().real), psi, frame, nc, method)
    if method == "projected":
        h_cs = project_contextual(split, frame, nc)
        gs = ground_state(h_cs)
        return CSASolution(frame.n_cs, nc.energy_nc, gs.energy, gs.state, frame, nc, method, gs.degenerate)
    if method != "sectored":
        raise ValueError(f"unknown method {method!r}")
    if n_spatial is None:
        raise ValueError("sectored solve needs n_spatial, n_alpha, n_beta")
    _check_consistent(frame, nc)
    sector = _stabilized_states(frame, nc.state, SectorBasis.particle(n_spatial, n_alpha, n_beta))
    gs: GroundState = ground_state(split.full, sector)
    # express the original-frame eigenvector in subspace coordinates
    rotated = frame.apply(gs.state, adjoint=True)
    cs_states = _compress_bits(rotated.states, frame.cs_qubits)
    psi = StateVector(frame.n_cs, rotated.amplitudes, cs_states)
    return CSASolution(frame.n_cs, nc.energy_nc, gs.energy, psi, frame, nc, method, gs.degenerate)


# -- trial wavefunctions -----------------------------------------------------

@dataclass(frozen=True)
class TrialWavefunction:
    """Sparse CI expansion over occupation bitstrings (normalized)."""

    n_qubits: int
    states: np.ndarray
    amplitudes: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.uint64).ravel()
        a = np.asarray(self.amplitudes, dtype=np.complex128).ravel()
        if len(s) != len(a):
            raise DimensionError("states and amplitudes differ in length")
        if len(s) == 0:
            raise ValidationError("empty trial wavefunction")
        order = np.argsort(s)
        object.__setattr__(self, "states", s[order])
        object.__setattr__(self, "amplitudes", a[order])

    @classmethod
    def from_state(cls, psi: StateVector, tol: float = 0.0, **metadata) -> "TrialWavefunction":
        keep = np.abs(psi.amplitudes) > tol
        amps = psi.amplitudes[keep]
        return cls(psi.n_qubits, psi.states[keep], amps / np.linalg.norm(amps), dict(metadata))

    @classmethod
    def single(cls, n_qubits: int, state: int, **metadata) -> "TrialWavefunction":
        return cls(n_qubits, [state], [1.0], dict(metadata))

    def __len__(self) -> int:
        return len(self.states)

    @property
    def n_spatial(self) -> int:
        return self.n_qubits // 2

    def to_state(self) -> StateVector:
        return StateVector(self.n_qubits, self.amplitudes, self.states)

    def sectors(self) -> set[tuple[int, int]]:
        na, nb = particle_counts(self.states, self.n_spatial)
        return set(zip(na.tolist(), nb.tolist()))

    @property
    def sector(self) -> tuple[int, int]:
        found = self.sectors()
        if len(found) != 1:
            raise ParticleSectorViolation(None, sorted(found))
        return next(iter(found))

    def to_json(self) -> str:
        doc = {
            "format": "csafqmc-trial",
            "version": FORMAT_VERSION,
            "n_qubits": self.n_qubits,
            "terms": [[hex(int(s)), [float(a.real), float(a.imag)]] for s, a in zip(self.states, self.amplitudes)],
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrialWavefunction":
        doc = json.loads(text)
        _check_format(doc, "csafqmc-trial")
        states = [int(h, 16) for h, _ in doc["terms"]]
        amps = [complex(re, im) for _, (re, im) in doc["terms"]]
        return cls(doc["n_qubits"], states, amps, doc.get("metadata", {}))


def truncate(states: np.ndarray, amps: np.ndarray, max_loss: float = TRUNCATION_LOSS,
             max_terms: int = TRUNCATION_MAX_TERMS):
    """Drop smallest terms while the discarded squared norm stays below
    ``max_loss``, then keep at most ``max_terms``. Returns the dropped weight."""
    w = np.abs(amps) ** 2
    w = w / w.sum()
    order = np.argsort(w, kind="stable")
    cum = np.cumsum(w[order])
    n_drop = int(np.searchsorted(cum, max_loss, side="left"))
    n_drop = max(n_drop, len(order) - max_terms)
    n_drop = min(n_drop, len(order) - 1)
    keep = np.sort(order[n_drop:])
    lost = float(cum[n_drop - 1]) if n_drop > 0 else 0.0
    return states[keep], amps[keep], lost


def build_trial(
    frame: StabilizerFrame,
    nc: NoncontextualSolution,
    psi_cs: StateVector,
    *,
    max_loss: float = TRUNCATION_LOSS,
    max_terms: int = TRUNCATION_MAX_TERMS,
    expected_sector: tuple[int, int] | None = None,
) -> TrialWavefunction:
    """Embed ``psi_cs`` next to the fixed bits, rotate back with ``U`` and truncate.

    Raises:
        ParticleSectorViolation: the back-rotated state spans several
            ``(n_alpha, n_beta)`` sectors, or a single sector other than
            ``expected_sector``.
    """
    if psi_cs.n_qubits != frame.n_cs:
        raise DimensionError(f"psi_cs has {psi_cs.n_qubits} qubits, frame has {frame.n_cs} contextual qubits")
    nz = np.abs(psi_cs.amplitudes) > 0
    full = _expand_bits(psi_cs.states[nz], frame.cs_qubits) | np.uint64(frame.fixed_bits)
    embedded = StateVector(frame.n_qubits, psi_cs.amplitudes[nz], full)
    back = frame.apply(embedded, adjoint=False)
    n_spatial = frame.n_qubits // 2
    na, nb = particle_counts(back.states, n_spatial)
    probs = np.abs(back.amplitudes) ** 2
    weights: dict[tuple[int, int], float] = {}
    for key, p in zip(zip(na.tolist(), nb.tolist()), probs):
        weights[key] = weights.get(key, 0.0) + p
    found = sorted(k for k, w in weights.items() if w > SECTOR_LEAK_TOL)
    if len(found) != 1 or (expected_sector is not None and found[0] != tuple(expected_sector)):
        raise ParticleSectorViolation(expected_sector, found)
    # drop solver-noise components outside the sector before truncating
    keep = (na == found[0][0]) & (nb == found[0][1])
    states, amps, lost = truncate(back.states[keep], back.amplitudes[keep], max_loss, max_terms)
    amps = amps / np.linalg.norm(amps)
    meta = {"n_cs": frame.n_cs, "truncation_error": lost, "n_terms_before_truncation": len(back.states)}
    return TrialWavefunction(frame.n_qubits, states, amps, meta)


def perturb_trial(t: TrialWavefunction, epsilon: float, seed=None) -> TrialWavefunction:
    """``(1 - eps)|T> + eps * sum_alpha |c_alpha>`` over the trial's sector, normalized.

    ``seed`` is accepted for interface symmetry; the perturbation is
    deterministic.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon == 0:
        return t
    na, nb = t.sector
    sector = SectorBasis.particle(t.n_spatial, na, nb)
    amps = np.full(len(sector), epsilon, dtype=np.complex128)
    pos, hit = sector.index(t.states)
    if not np.all(hit):
        raise ParticleSectorViolation((na, nb), sorted(t.sectors()))
    amps[pos] += (1 - epsilon) * t.amplitudes
    amps /= np.linalg.norm(amps)
    meta = dict(t.metadata, epsilon=epsilon)
    return TrialWavefunction(t.n_qubits, sector.states, amps, meta)
