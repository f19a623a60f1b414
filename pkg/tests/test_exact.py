from math import comb

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from csafqmc.chem import load_fixture, reference_energies
from csafqmc.errors import ConvergenceError, DimensionError
from csafqmc.exact import (SectorBasis, StateVector, apply_operator, davidson, expectation, fci_ground_state,
                           ground_state, overlap, particle_counts, sparse_matrix)
from csafqmc.pauli import PauliOperator, PauliWord, apply_rotation, jordan_wigner


def _random_hermitian_op(rng, n, n_terms=12):
    terms = [(PauliWord.from_string("".join(rng.choice(list("IXYZ"), n))), rng.normal()) for _ in range(n_terms)]
    return PauliOperator.from_terms(terms, n)


def test_single_qubit_z_ground_states():
    # Z|0> = +|0>, so -Z is lowest on |0> and +Z on |1>
    gs = ground_state(PauliOperator.from_dict({"Z": -1.0}))
    assert gs.energy == pytest.approx(-1.0)
    np.testing.assert_allclose(np.abs(gs.state.to_dense()), [1, 0], atol=1e-12)
    gs = ground_state(PauliOperator.from_dict({"Z": 1.0}))
    np.testing.assert_allclose(np.abs(gs.state.to_dense()), [0, 1], atol=1e-12)


def test_simple_expectations():
    z = PauliOperator.from_dict({"Z": 1.0})
    x = PauliOperator.from_dict({"X": 1.0})
    assert expectation(z, StateVector.basis_state(1, 0)) == pytest.approx(1.0)
    plus = StateVector(1, np.array([1, 1]) / np.sqrt(2))
    assert expectation(x, plus) == pytest.approx(1.0)


def test_expectation_matches_dense(rng):
    op = _random_hermitian_op(rng, 6)
    v = rng.normal(size=64) + 1j * rng.normal(size=64)
    v /= np.linalg.norm(v)
    psi = StateVector(6, v)
    ref = np.vdot(v, op.to_matrix() @ v)
    assert abs(expectation(op, psi) - ref) < 1e-12
    assert abs(expectation(op, psi).imag) < 1e-10


def test_overlap_basics(rng):
    v = rng.normal(size=16) + 0j
    psi = StateVector(4, v / np.linalg.norm(v))
    assert overlap(psi, psi) == pytest.approx(1.0)
    assert overlap(StateVector.basis_state(4, 3), StateVector.basis_state(4, 5)) == 0
    sparse = StateVector(4, psi.amplitudes[[1, 7]], [1, 7])
    assert overlap(sparse, psi) == pytest.approx(np.vdot(psi.amplitudes[[1, 7]], psi.amplitudes[[1, 7]]))
    with pytest.raises(DimensionError):
        overlap(psi, StateVector.basis_state(3, 0))


def test_apply_operator_matches_dense(rng):
    op = _random_hermitian_op(rng, 5)
    v = rng.normal(size=32) + 1j * rng.normal(size=32)
    out = apply_operator(op, StateVector(5, v))
    np.testing.assert_allclose(out.to_dense(), op.to_matrix() @ v, atol=1e-12)


def test_sector_sizes():
    for m, na, nb in [(4, 2, 2), (5, 3, 1), (7, 5, 5)]:
        s = SectorBasis.particle(m, na, nb)
        assert len(s) == comb(m, na) * comb(m, nb) == s.expected_size()
        a, b = particle_counts(s.states, m)
        assert np.all(a == na) and np.all(b == nb)


@pytest.mark.parametrize("name", ["h2", "h4_chain", "h2o", "n2_1.134"])
def test_fci_matches_fixture(name):
    gs = fci_ground_state(load_fixture(name))
    assert gs.energy == pytest.approx(reference_energies(name)["e_fci"], abs=1e-7)
    assert gs.residual <= 1e-8 * 10


def test_n2_sector_dimension():
    h = load_fixture("n2_1.134")
    assert len(SectorBasis.particle(h.n_spatial, h.n_alpha, h.n_beta)) == 120 ** 2


def test_sector_and_dense_agree_h4():
    h = load_fixture("h4_chain")
    op = jordan_wigner(h)
    dense = np.linalg.eigvalsh(op.to_matrix())
    sector = SectorBasis.particle(h.n_spatial, h.n_alpha, h.n_beta)
    e = ground_state(op, sector).energy
    assert e == pytest.approx(np.min(np.linalg.eigvalsh(sparse_matrix(op, sector).toarray())), abs=1e-9)
    assert e >= dense[0] - 1e-9


def test_energy_invariant_under_rotation():
    h = load_fixture("h4_chain")
    op = jordan_wigner(h)
    rot = apply_rotation(op, PauliWord.from_string("ZZIYIIII"))
    e0 = ground_state(op).energy
    assert ground_state(rot).energy == pytest.approx(e0, abs=1e-9)


def test_davidson_matches_eigsh():
    h = load_fixture("h2o")
    sector = SectorBasis.particle(h.n_spatial, h.n_alpha, h.n_beta)
    mat = sparse_matrix(jordan_wigner(h), sector).real
    e, vec, res, gap, iters = davidson(mat, tol=1e-9)
    ref = spla.eigsh(mat, k=1, which="SA")[0][0]
    assert e == pytest.approx(ref, abs=1e-9)
    assert res <= 1e-8


def test_davidson_nonconvergence_reports_residual():
    h = load_fixture("h2o")
    sector = SectorBasis.particle(h.n_spatial, h.n_alpha, h.n_beta)
    mat = sparse_matrix(jordan_wigner(h), sector).real
    with pytest.raises(ConvergenceError) as err:
        davidson(mat, tol=1e-14, max_iter=3)
    assert "residual" in str(err.value).lower()
