"""Simulated matchgate shadows for trial/walker overlaps.

Majorana operators follow the Jordan-Wigner convention of ``pauli``:
``gamma_{2j} = Z_{<j} X_j`` and ``gamma_{2j+1} = Z_{<j} Y_j`` (0-based).
A matchgate unitary ``U_Q`` satisfies ``U_Q^dag gamma_mu U_Q = sum_nu Q_{mu nu} gamma_nu``.

For an antisymmetric ``A`` the Gaussian operator is
``G(A) = 2^-N sum_S i^{|S|/2} Pf(A|_S) gamma_S`` (ordered products over even
subsets ``S``). Then ``|b><b| = G(C_b)`` and
``U_Q^dag G(A) U_Q = G(Q^T A Q)``. A snapshot's degree-``2l`` Majorana part
is the ``z^l`` coefficient of ``G(z A)``, and the inverse shadow channel
multiplies it by ``C(2N, 2l)/C(N, l)``. The overlap estimator evaluates
``q(z) = <phi|G(z A)|0>`` as a single Pfaffian at interpolation nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .afqmc import SlaterDeterminant
from .contextual import StabilizerFrame, TrialWavefunction, _compress_bits, _expand_bits
from .errors import ConfigError, DimensionError, UnsupportedFrameError, ValidationError
from .exact import StateVector
from .pauli import PauliWord

log = logging.getLogger(__name__)

ARCHIVE_VERSION = 1
ORTHO_TOL = 1e-10
MAX_DENSE_QUBITS = 14


# -- Majoranas -------------------------------------------------------------------

def majorana(n_qubits: int, mu: int) -> PauliWord:
    """``gamma_mu`` as a Pauli word."""
    if not 0 <= mu < 2 * n_qubits:
        raise DimensionError(f"Majorana index {mu} out of range for {n_qubits} qubits")
    j = mu // 2
    below = (1 << j) - 1
    z = below | ((mu & 1) << j)
    return PauliWord(n_qubits, 1 << j, z)


def vacuum_covariance(n_qubits: int) -> np.ndarray:
    return basis_covariance(n_qubits, 0)


def basis_covariance(n_qubits: int, bits: int) -> np.ndarray:
    """``C_b`` with ``G(C_b) = |b><b|``."""
    c = np.zeros((2 * n_qubits, 2 * n_qubits))
    for j in range(n_qubits):
        s = -1.0 if (bits >> j) & 1 else 1.0
        c[2 * j, 2 * j + 1] = -s
        c[2 * j + 1, 2 * j] = s
    return c


def _basis_covariances(n_qubits: int, bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint64)
    s = 1.0 - 2.0 * ((bits[:, None] >> np.arange(n_qubits, dtype=np.uint64)) & np.uint64(1)).astype(float)
    c = np.zeros((len(bits), 2 * n_qubits, 2 * n_qubits))
    idx = np.arange(n_qubits)
    c[:, 2 * idx, 2 * idx + 1] = -s
    c[:, 2 * idx + 1, 2 * idx] = s
    return c


# -- Pfaffian ----------------------------------------------------------------------

@dataclass
class OpCounter:
    """Counts multiply-adds in the Pfaffian kernel (per matrix)."""

    flops: int = 0
    calls: int = 0


def pfaffian(a: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """Pfaffian by Parlett-Reid skew tridiagonalization with partial pivoting.

    Batched over leading axes. Odd dimension gives zero. ``counter``
    accumulates the multiply-add count of one matrix, which is ``O(n^3)``.
    """
    a = np.array(a, dtype=np.complex128)
    if a.shape[-1] != a.shape[-2]:
        raise DimensionError("Pfaffian needs square matrices")
    n = a.shape[-1]
    lead = a.shape[:-2]
    a = a.reshape((-1, n, n))
    batch = a.shape[0]
    out = np.ones(batch, dtype=np.complex128)
    if counter is not None:
        counter.calls += 1
    if n % 2:
        return np.zeros(lead, dtype=np.complex128)
    rows = np.arange(batch)
    for k in range(0, n - 1, 2):
        piv = k + 1 + np.argmax(np.abs(a[:, k + 1:, k]), axis=1)
        swap = piv != k + 1
        if np.any(swap):
            r = rows[swap]
            p = piv[swap]
            tmp = a[r, k + 1, :].copy()
            a[r, k + 1, :] = a[r, p, :]
            a[r, p, :] = tmp
            tmp = a[r, :, k + 1].copy()
            a[r, :, k + 1] = a[r, :, p]
            a[r, :, p] = tmp
            out[swap] *= -1
        head = a[:, k, k + 1]
        out *= head
        if k + 2 < n:
            safe = np.where(head == 0, 1.0, head)
            tau = a[:, k, k + 2:] / safe[:, None]
            col = a[:, k + 2:, k + 1]
            a[:, k + 2:, k + 2:] += tau[:, :, None] * col[:, None, :] - col[:, :, None] * tau[:, None, :]
            if counter is not None:
                counter.flops += 2 * (n - k - 2) ** 2 + (n - k - 2)
    return out.reshape(lead)


# -- matchgate circuits --------------------------------------------------------------

@dataclass(frozen=True)
class Matchgate:
    """One gate of the matchgate set on compressed qubit indices.

    ``kind`` is ``"z"`` (``exp(i theta Z_j)``), ``"xx"``
    (``exp(i theta X_j X_{j+1})``) or ``"x"`` (``X_j`` on the last qubit).
    """

    kind: str
    qubit: int
    theta: float = 0.0

    def generator(self, n_qubits: int, qubits=None) -> PauliWord:
        q = (lambda k: k) if qubits is None else (lambda k: qubits[k])
        if self.kind == "z":
            return PauliWord(n_qubits, 0, 1 << q(self.qubit))
        if self.kind == "xx":
            return PauliWord(n_qubits, (1 << q(self.qubit)) | (1 << q(self.qubit + 1)), 0)
        if self.kind == "x":
            return PauliWord(n_qubits, 1 << q(self.qubit), 0)
        raise ValidationError(f"unknown matchgate kind {self.kind!r}")


def sample_matchgate(n_qubits: int, rng) -> np.ndarray:
    """Haar-random ``Q`` in ``O(2N)``.

    QR of a Gaussian matrix with the sign fix on ``diag(R)``; the determinant
    is then set to ``+1`` and flipped to ``-1`` with probability 1/2 by
    negating the first row.
    """
    n = 2 * n_qubits
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))[None, :]
    if np.linalg.det(q) < 0:
        q[0] *= -1
    if rng.random() < 0.5:
        q[0] *= -1
    return q


def check_orthogonal(q: np.ndarray) -> None:
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] % 2:
        raise ValidationError("Q must be a square matrix of even dimension")
    if np.max(np.abs(q.T @ q - np.eye(len(q)))) > ORTHO_TOL:
        raise ValidationError("Q is not orthogonal")


def compile_matchgate(q: np.ndarray) -> list[Matchgate]:
    """Decompose ``Q`` into adjacent Majorana rotations plus an optional reflection.

    Column Givens rotations reduce ``Q`` to ``D = diag(1, ..., 1, det Q)``, so
    ``Q = D R_K^T ... R_1^T``, applied right to left. A rotation on Majoranas ``(a, a+1)`` with
    ``Q[a, a] = cos 2t``, ``Q[a, a+1] = sin 2t`` is ``exp(t gamma_a gamma_{a+1})``,
    i.e. ``exp(i t Z_j)`` for ``a = 2j`` and ``exp(i t X_j X_{j+1})`` for
    ``a = 2j + 1``. Gates are returned in application order.
    """
    check_orthogonal(q)
    m = np.array(q, dtype=float)
    n = len(m)
    gates: list[Matchgate] = []
    for i in range(n - 1):
        for j in range(n - 1, i, -1):
            x, y = m[i, j - 1], m[i, j]
            if y == 0 and (j - 1 > i or x >= 0):
                continue
            r = np.hypot(x, y)
            c, s = x / r, y / r
            # columns (j-1, j) <- (c*col_{j-1} + s*col_j, -s*col_{j-1} + c*col_j)
            cj1 = m[:, j - 1].copy()
            m[:, j - 1] = c * cj1 + s * m[:, j]
            m[:, j] = -s * cj1 + c * m[:, j]
            # R[j-1,j-1] = c, R[j,j-1] = s; the gate implements R^T
            theta = 0.5 * np.arctan2(s, c)
            a = j - 1
            gates.append(Matchgate("z" if a % 2 == 0 else "xx", a // 2, float(theta)))
    if m[n - 1, n - 1] < 0:
        gates.append(Matchgate("x", n // 2 - 1))
    return gates


def gates_to_matrix(gates: list[Matchgate], n_qubits: int) -> np.ndarray:
    """Majorana rotation ``Q`` implemented by a gate list (application order)."""
    q = np.eye(2 * n_qubits)
    for g in gates:
        r = np.eye(2 * n_qubits)
        if g.kind == "x":
            r[-1, -1] = -1.0
        else:
            a = 2 * g.qubit + (0 if g.kind == "z" else 1)
            c, s = np.cos(2 * g.theta), np.sin(2 * g.theta)
            r[a, a], r[a, a + 1], r[a + 1, a], r[a + 1, a + 1] = c, s, -s, c
        # U = G_K ... G_1 (last applied is leftmost) -> Q = Q_K ... Q_1
        q = r @ q
    return q


def _apply_gates_array(gates: list[Matchgate], arr: np.ndarray, n_qubits: int) -> np.ndarray:
    """Apply gates to amplitudes indexed by the last axis (``2^n`` entries)."""
    idx = np.arange(1 << n_qubits)
    out = np.array(arr, dtype=np.complex128)
    for g in gates:
        if g.kind == "z":
            bit = (idx >> g.qubit) & 1
            out = out * np.exp(1j * g.theta * (1 - 2 * bit))
        elif g.kind == "xx":
            flip = idx ^ (3 << g.qubit)
            out = np.cos(g.theta) * out + 1j * np.sin(g.theta) * out[..., flip]
        else:
            out = out[..., idx ^ (1 << g.qubit)]
    return out


def apply_gates(gates: list[Matchgate], psi: StateVector) -> StateVector:
    n = psi.n_qubits
    if n > MAX_DENSE_QUBITS:
        raise DimensionError(f"dense matchgate simulation limited to {MAX_DENSE_QUBITS} qubits")
    dense = psi.to_dense()
    return StateVector(n, _apply_gates_array(gates, dense, n))


def compile_and_apply(q: np.ndarray, psi: StateVector) -> StateVector:
    """``U_Q |psi>`` via the matchgate decomposition of ``Q``."""
    if len(q) != 2 * psi.n_qubits:
        raise DimensionError(f"Q has dimension {len(q)}, state has {psi.n_qubits} qubits")
    return apply_gates(compile_matchgate(q), psi)


# -- stabilizer rotations through matchgates ---------------------------------------------

def _check_rotation_form(frame: StabilizerFrame) -> None:
    rots = frame.rotations
    if len(rots) % 2:
        raise UnsupportedFrameError("rotations must come in (P, P~) pairs")
    for (p, _), (pt, _) in zip(rots[::2], rots[1::2]):
        j = pt.x
        if pt.x != pt.z or pt.x & (pt.x - 1) or p.x != j or not (p.z & j):
            raise UnsupportedFrameError("rotation pair is not of the form (Z_{S\\j} Y_j, Y_j)")


def commute_rotations(frame: StabilizerFrame, gates: list[Matchgate], qubits=None) -> StabilizerFrame:
    """Altered rotations for pulling ``U`` through a matchgate circuit.

    Follows the case analysis gate by gate: a gate generator that commutes
    with a rotation word (disjoint support, or an even number of
    anticommuting sites as for two-site ``XX`` overlaps) leaves it alone; an
    anticommuting one flips that rotation's sign. ``qubits`` maps the
    circuit's compressed indices to frame qubits (default: identity).

    The sign rule is exact only for gates that are Pauli operators up to
    phase (``theta`` a multiple of pi/2, and the reflection); for generic
    angles ``U_Q U`` differs from ``U~ U_Q``.
    """
    _check_rotation_form(frame)
    n = frame.n_qubits
    signs = [s for _, s in frame.rotations]
    for g in gates:
        gen = g.generator(n, qubits)
        for k, (word, _) in enumerate(frame.rotations):
            if not word.commutes_with(gen):
                signs[k] = -signs[k]
    return frame.with_rotations([(w, s) for (w, _), s in zip(frame.rotations, signs)])


# -- sample collection ---------------------------------------------------------------

@dataclass(frozen=True)
class MatchgateSample:
    q_matrix: np.ndarray
    bitstring: int
    batch_id: int


@dataclass
class ShadowEstimatorConfig:
    n_samples: int = 10_000
    n_batches: int = 10
    interpolation_nodes: tuple[float, ...] | None = None
    eta: int | None = None
    seed: int = 0
    median_of_means: bool = True

    def validate(self) -> None:
        if self.n_samples <= 0 or self.n_batches <= 0:
            raise ConfigError("n_samples and n_batches must be positive")
        if self.n_samples % self.n_batches:
            raise ConfigError("n_batches must divide n_samples")
        if self.interpolation_nodes is not None:
            nodes = np.asarray(self.interpolation_nodes, dtype=float)
            if len(np.unique(nodes)) != len(nodes):
                raise ConfigError("interpolation nodes must be pairwise distinct")

    def nodes(self, n_qubits: int) -> np.ndarray:
        if self.interpolation_nodes is not None:
            nodes = np.asarray(self.interpolation_nodes, dtype=float)
            if len(nodes) != n_qubits + 1:
                raise ConfigError(f"need {n_qubits + 1} interpolation nodes, got {len(nodes)}")
            if len(np.unique(nodes)) != len(nodes):
                raise ConfigError("interpolation nodes must be pairwise distinct")
            return nodes
        k = np.arange(n_qubits + 1)
        return np.cos((2 * k + 1) * np.pi / (2 * (n_qubits + 1)))


class SampleSet(list):
    """Shadow samples plus what post-processing needs to undo the tau preparation.

    ``scale`` converts ``E[tr(M^-1(snapshot) |0><phi|)]`` into ``<phi|Psi_T>``;
    ``extended`` marks the one-mode extension used for odd particle numbers.
    """

    def __init__(self, samples=(), *, n_qubits: int, eta: int, scale: complex = 2.0, extended: bool = False):
        super().__init__(samples)
        self.n_qubits = n_qubits
        self.eta = eta
        self.scale = scale
        self.extended = extended


def _trial_eta(t: TrialWavefunction) -> int:
    counts = {bin(int(s)).count("1") for s in t.states}
    if len(counts) != 1:
        raise ValidationError("trial mixes particle numbers")
    return counts.pop()


def _extend_state(psi: StateVector) -> StateVector:
    top = np.uint64(1) << np.uint64(psi.n_qubits)
    return StateVector(psi.n_qubits + 1, psi.amplitudes, psi.states | top)


def _tau_scale(vac: complex) -> complex:
    # rho = |T + 0><T + 0| / (2 + 2 Re<T|0>); tr(rho |0><phi|) = <phi|T> (1 + <T|0>) / norm
    return (2.0 + 2.0 * vac.real) / (1.0 + vac)


def collect_samples(t: TrialWavefunction, frame: StabilizerFrame | None, cfg: ShadowEstimatorConfig,
                    rng=None) -> SampleSet:
    """Simulate ``n_samples`` single-shot matchgate snapshots of the tau state.

    Without a frame: ``(|T> + |0>)`` normalized, a fresh ``U_Q`` on all qubits,
    one Born sample each. With a frame: ``(U^dag|T> + U^dag|0>)`` normalized
    (``U^dag|T>`` is the contextual state times fixed bits), ``U_Q`` on the
    contextual qubits only, then the measured string is mapped through the
    altered rotation ``U~`` from ``commute_rotations``; the stored ``Q`` is the
    contextual rotation embedded on the contextual qubits' Majoranas.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed)) if rng is None else rng
    psi = t.to_state()
    eta = cfg.eta if cfg.eta is not None else _trial_eta(t)
    vac = complex(psi.amplitude_of(np.zeros(1, np.uint64))[0])
    if frame is None:
        return _collect_plain(psi, eta, vac, cfg, rng)
    if frame.n_qubits != t.n_qubits:
        raise DimensionError(f"frame acts on {frame.n_qubits} qubits, trial on {t.n_qubits}")
    if eta % 2:
        raise ValidationError("the contextual shadow path supports even particle numbers only")
    return _collect_framed(psi, frame, eta, vac, cfg, rng)


def _born(arr: np.ndarray, rng) -> int:
    p = np.abs(arr.ravel()) ** 2
    return int(rng.choice(len(p), p=p / p.sum()))


def _collect_plain(psi, eta, vac, cfg, rng) -> SampleSet:
    extended = bool(eta % 2)
    if extended:
        psi = _extend_state(psi)
        eta += 1
    n = psi.n_qubits
    if n > MAX_DENSE_QUBITS:
        raise DimensionError(f"dense shadow simulation limited to {MAX_DENSE_QUBITS} qubits")
    tau = np.array(psi.to_dense(), dtype=np.complex128)
    tau[0] += 1.0
    tau /= np.linalg.norm(tau)
    per_batch = cfg.n_samples // cfg.n_batches
    out = SampleSet(n_qubits=n, eta=eta, scale=_tau_scale(vac), extended=extended)
    for i in range(cfg.n_samples):
        q = sample_matchgate(n, rng)
        amp = _apply_gates_array(compile_matchgate(q), tau, n)
        out.append(MatchgateSample(q, _born(amp, rng), i // per_batch))
    return out


def _embed(q: np.ndarray, cs_qubits, n_qubits: int) -> np.ndarray:
    idx = np.array([[2 * c, 2 * c + 1] for c in cs_qubits], dtype=int).ravel()
    full = np.eye(2 * n_qubits)
    full[np.ix_(idx, idx)] = q
    return full


def _collect_framed(psi, frame, eta, vac, cfg, rng) -> SampleSet:
    n, cs = frame.n_qubits, frame.cs_qubits
    ncs = len(cs)
    if ncs > MAX_DENSE_QUBITS:
        raise DimensionError(f"dense shadow simulation limited to {MAX_DENSE_QUBITS} contextual qubits")
    prep = frame.apply(psi, adjoint=True)
    vac_img = frame.apply(StateVector.basis_state(n, 0), adjoint=True)
    states = np.concatenate([prep.states, vac_img.states])
    amps = np.concatenate([prep.amplitudes, vac_img.amplitudes])
    cs_mask = np.uint64(sum(1 << c for c in cs))
    outer = states & ~cs_mask
    patterns, inv = np.unique(outer, return_inverse=True)
    arr = np.zeros((len(patterns), 1 << ncs), dtype=np.complex128)
    np.add.at(arr, (inv, _compress_bits(states, cs).astype(np.int64)), amps)
    arr /= np.linalg.norm(arr)
    per_batch = cfg.n_samples // cfg.n_batches
    out = SampleSet(n_qubits=n, eta=eta, scale=_tau_scale(vac))
    for i in range(cfg.n_samples):
        q = sample_matchgate(ncs, rng) if ncs else np.zeros((0, 0))
        gates = compile_matchgate(q) if ncs else []
        amp = _apply_gates_array(gates, arr, ncs)
        flat = _born(amp, rng)
        pat, local = divmod(flat, 1 << ncs)
        b = int(patterns[pat]) | int(_expand_bits(np.array([local], np.uint64), cs)[0])
        tilde = commute_rotations(frame, gates, cs)
        img, _ = tilde.basis_map(np.array([b], np.uint64), adjoint=False)
        out.append(MatchgateSample(_embed(q, cs, n), int(img[0]), i // per_batch))
    return out


# -- post-processing ----------------------------------------------------------------------

def _spin_orbital_matrix(d: SlaterDeterminant) -> np.ndarray:
    m = d.n_spatial
    v = np.zeros((2 * m, d.n_alpha + d.n_beta), dtype=np.complex128)
    v[:m, :d.n_alpha] = d.matrix_alpha
    v[m:, d.n_alpha:] = d.matrix_beta
    return v


def passive_majorana_rotation(u: np.ndarray) -> np.ndarray:
    """``O`` with ``U^dag gamma_mu U = sum_nu O[mu, nu] gamma_nu`` for the
    orbital rotation ``U a^dag_p U^dag = sum_q u[q, p] a^dag_q``."""
    n = len(u)
    re, im = u.real, u.imag
    t = np.zeros((2 * n, 2 * n))
    # U gamma_mu U^dag = sum_nu t[nu, mu] gamma_nu
    t[0::2, 0::2] = re
    t[1::2, 0::2] = im
    t[0::2, 1::2] = -im
    t[1::2, 1::2] = re
    # orthogonality turns the U . U^dag coefficients into those of U^dag . U
    return t


def _walker_frame(walker, n_qubits: int, extended: bool):
    """Orthonormal-orbital rotation ``O`` and the factor ``conj(det R)``."""
    v = _spin_orbital_matrix(walker) if isinstance(walker, SlaterDeterminant) else np.asarray(walker, complex)
    if extended:
        ext = np.zeros((v.shape[0] + 1, v.shape[1] + 1), dtype=np.complex128)
        ext[:-1, :-1] = v
        ext[-1, -1] = 1.0
        v = ext
    if v.shape[0] != n_qubits:
        raise DimensionError(f"walker has {v.shape[0]} spin orbitals, samples {n_qubits} qubits")
    eta = v.shape[1]
    full, r = np.linalg.qr(v, mode="complete")
    factor = np.conj(np.prod(np.diag(r[:eta, :eta])))
    return passive_majorana_rotation(full), factor, eta


def _selection(n_qubits: int, eta: int):
    """Rows ``e_{2k} + i e_{2k+1}`` for occupied modes, plain rows otherwise,
    and the vacuum-pair block added to the unoccupied rows."""
    dim = 2 * n_qubits - eta
    r = np.zeros((dim, 2 * n_qubits), dtype=np.complex128)
    for k in range(eta):
        r[k, 2 * k] = 1.0
        r[k, 2 * k + 1] = 1j
    rest = np.arange(2 * eta, 2 * n_qubits)
    r[eta + np.arange(len(rest)), rest] = 1.0
    d = np.zeros((dim, dim), dtype=np.complex128)
    for p in range(n_qubits - eta):
        a = eta + 2 * p
        d[a, a + 1] = -1j
        d[a + 1, a] = 1j
    return r, d


def _estimator_weights(n_qubits: int, nodes: np.ndarray) -> np.ndarray:
    """``lambda`` with ``sum_l C(2N,2l)/C(N,l) c_l = lambda . q(nodes)``."""
    vander = np.vander(nodes, n_qubits + 1, increasing=True)
    if np.linalg.matrix_rank(vander) < n_qubits + 1:
        raise ConfigError("interpolation system is singular")
    w = np.array([comb(2 * n_qubits, 2 * l) / comb(n_qubits, l) for l in range(n_qubits + 1)])
    return np.linalg.solve(vander.T, w)


def overlap_samples(samples: SampleSet, walker, cfg: ShadowEstimatorConfig,
                    counter: OpCounter | None = None, chunk: int = 2048) -> np.ndarray:
    """Per-sample unbiased estimates of ``<phi|Psi_T>``."""
    n = samples.n_qubits
    o, factor, eta = _walker_frame(walker, n, samples.extended)
    if eta != samples.eta:
        raise DimensionError(f"walker has {eta} fermions, samples were taken for {samples.eta}")
    if eta % 2:
        raise ValidationError("odd fermion number needs the one-mode extension")
    nodes = cfg.nodes(n)
    lam = _estimator_weights(n, nodes)
    r, d = _selection(n, eta)
    m = r @ o.T
    alpha = 2.0 ** (-n) * 1j ** (n - eta)
    out = np.empty(len(samples), dtype=np.complex128)
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        qs = np.stack([s.q_matrix for s in part])
        cb = _basis_covariances(n, np.array([s.bitstring for s in part], dtype=np.uint64))
        a = np.swapaxes(qs, 1, 2) @ cb @ qs
        b = m @ a @ m.T
        mats = 1j * nodes[None, :, None, None] * b[:, None] + d
        vals = pfaffian(mats, counter) * alpha
        out[start:start + len(part)] = vals @ lam
    return samples.scale * factor * out


def estimate_overlap(samples: SampleSet, walker, cfg: ShadowEstimatorConfig,
                     counter: OpCounter | None = None) -> complex:
    """Shadow estimate of ``<phi|Psi_T>``: mean, or median of batch means
    (real and imaginary parts separately)."""
    vals = overlap_samples(samples, walker, cfg, counter)
    if not cfg.median_of_means:
        return complex(vals.mean())
    ids = np.array([s.batch_id for s in samples])
    means = np.array([vals[ids == b].mean() for b in np.unique(ids)])
    return complex(np.median(means.real) + 1j * np.median(means.imag))


def standard_error(samples: SampleSet, walker, cfg: ShadowEstimatorConfig) -> float:
    vals = overlap_samples(samples, walker, cfg)
    return float(np.std(vals, ddof=1) / np.sqrt(len(vals)))


class ShadowOverlap:
    """AFQMC overlap backend: ``<T|phi>`` per walker from one fixed shadow set.

    Callable as ``overlap_fn(phi_alpha, phi_beta)`` in ``run_afqmc``. The
    same samples are reused for every walker and step, which is the
    amortization the protocol relies on.
    """

    def __init__(self, samples: SampleSet, cfg: ShadowEstimatorConfig):
        self.samples = samples
        self.cfg = cfg
        self.counter = OpCounter()

    def __call__(self, phi_a: np.ndarray, phi_b: np.ndarray) -> np.ndarray:
        out = np.empty(len(phi_a), dtype=np.complex128)
        for k, (a, b) in enumerate(zip(phi_a, phi_b)):
            d = SlaterDeterminant(a, b)
            out[k] = np.conj(estimate_overlap(self.samples, d, self.cfg, self.counter))
        return out


# -- archive ------------------------------------------------------------------------------

def save_samples(path, samples: SampleSet) -> None:
    """Versioned ``.npz``: ``Q`` as float64 row-major, bitstrings packed little-endian."""
    n = samples.n_qubits
    bits = np.array([[(s.bitstring >> k) & 1 for k in range(n)] for s in samples], dtype=np.uint8)
    np.savez(
        path,
        version=np.array(ARCHIVE_VERSION),
        n_qubits=np.array(n),
        eta=np.array(samples.eta),
        scale=np.array(samples.scale, dtype=np.complex128),
        extended=np.array(samples.extended),
        q=np.ascontiguousarray(np.stack([s.q_matrix for s in samples]).astype(np.float64)),
        bits=np.packbits(bits, axis=1, bitorder="little"),
        batch=np.array([s.batch_id for s in samples], dtype=np.int64),
    )


def load_samples(path) -> SampleSet:
    with np.load(path, allow_pickle=False) as f:
        if int(f["version"]) != ARCHIVE_VERSION:
            raise ValidationError(f"unsupported sample archive version {int(f['version'])}")
        n = int(f["n_qubits"])
        bits = np.unpackbits(f["bits"], axis=1, count=n, bitorder="little")
        values = (bits.astype(np.int64) << np.arange(n)).sum(axis=1)
        out = SampleSet(n_qubits=n, eta=int(f["eta"]), scale=complex(f["scale"]), extended=bool(f["extended"]))
        for q, b, i in zip(f["q"], values, f["batch"]):
            out.append(MatchgateSample(q, int(b), int(i)))
    return out
