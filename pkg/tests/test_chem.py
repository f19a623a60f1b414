import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csafqmc.chem import (MolecularHamiltonian, build_reference, cholesky_factorize, determinant_energy,
                          fixture_names, hf_bitstring, load_fixture, parse_fcidump, reference_energies,
                          write_fcidump)
from csafqmc.errors import NotPSDError, ParseError
from csafqmc.pauli import jordan_wigner

MINIMAL = """&FCI NORB=1,NELEC=2,MS2=0 &END
0.5 1 1 1 1
-1.0 1 1 0 0
0.7 0 0 0 0
"""


def test_minimal_readback():
    h = parse_fcidump(io.StringIO(MINIMAL))
    assert (h.n_spatial, h.n_alpha, h.n_beta) == (1, 1, 1)
    assert h.h1[0, 0] == -1.0 and h.eri[0, 0, 0, 0] == 0.5 and h.core_energy == 0.7


def test_one_orbital_hf_energy_closed_form():
    h = parse_fcidump(io.StringIO(MINIMAL))
    ref = build_reference(h)
    assert ref.hf_energy == pytest.approx(0.7 + 2 * -1.0 + 0.5, abs=1e-14)
    assert bin(ref.hf_occupation).count("1") == 2


def test_slash_terminator_and_symmetrization():
    text = "&FCI\n NORB=2, NELEC=2, MS2=0,\n ORBSYM=1,1,\n/\n0.3 2 1 1 1\n0.1 2 1 0 0\n"
    h = parse_fcidump(io.StringIO(text))
    v = h.eri
    for perm in [(1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1), (3, 2, 1, 0)]:
        np.testing.assert_array_equal(v, v.transpose(perm))
    assert v[0, 0, 0, 1] == 0.3 and h.h1[0, 1] == 0.1


@pytest.mark.parametrize("text, line", [
    ("NORB=1,NELEC=2,MS2=0\n0.5 1 1 1 1\n", None),
    ("&FCI NORB=1,NELEC=2,MS2=1 &END\n", 1),
    ("&FCI NORB=1,NELEC=2,MS2=0 &END\n0.5 1 1 2 1\n", 2),
    ("&FCI NORB=1,NELEC=2,MS2=0 &END\n0.5 1 1\n", 2),
    ("&FCI NORB=1,NELEC=2,MS2=0 &END\nabc 1 1 1 1\n", 2),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ParseError) as err:
        parse_fcidump(io.StringIO(text))
    if line is not None:
        assert err.value.line == line


def test_duplicate_entry_warns_and_later_wins():
    text = MINIMAL + "0.9 1 1 1 1\n"
    with pytest.warns(UserWarning, match="duplicate"):
        h = parse_fcidump(io.StringIO(text))
    assert h.eri[0, 0, 0, 0] == 0.9


def test_write_roundtrip():
    h = load_fixture("h4_chain")
    buf = io.StringIO()
    write_fcidump(h, buf)
    h2 = parse_fcidump(io.StringIO(buf.getvalue()))
    np.testing.assert_allclose(h2.eri, h.eri, atol=1e-14)
    np.testing.assert_allclose(h2.h1, h.h1, atol=1e-14)
    assert h2.core_energy == pytest.approx(h.core_energy)


def test_fixtures_present():
    names = fixture_names()
    for n in ("h2", "h4_chain", "h2o", "n2_1.000", "n2_1.134", "n2_1.670", "n2_1.737"):
        assert n in names


@pytest.mark.parametrize("name", ["h2", "h4_chain", "h2o", "n2_1.134"])
def test_hf_energy_matches_fixture(name):
    h = load_fixture(name)
    assert build_reference(h).hf_energy == pytest.approx(reference_energies(name)["e_hf"], abs=1e-8)


@pytest.mark.parametrize("name", ["h2", "h4_chain"])
def test_hf_energy_matches_jw_diagonal(name):
    h = load_fixture(name)
    op = jordan_wigner(h)
    occ = np.array([hf_bitstring(h.n_spatial, h.n_alpha, h.n_beta)], dtype=np.uint64)
    assert op.diagonal(occ)[0].real == pytest.approx(build_reference(h).hf_energy, abs=1e-10)


def test_zero_eri_no_doubles_and_no_factors():
    h = MolecularHamiltonian(3, 1, 1, 0.0, np.diag([-1.0, 0.0, 1.0]), np.zeros((3, 3, 3, 3)))
    assert build_reference(h).mp2_doubles == {}
    assert cholesky_factorize(h).n_factors == 0


def test_rank_one_tensor():
    a = np.array([0.3, -0.2, 0.5])
    v = np.einsum("p,q,r,s->pqrs", a, a, a, a)
    h = MolecularHamiltonian(3, 1, 1, 0.0, np.zeros((3, 3)), v)
    chol = cholesky_factorize(h, 1e-10)
    assert chol.n_factors == 1
    np.testing.assert_allclose(chol.reconstruct(), v, atol=1e-12)


def test_h2_cholesky_bound():
    h = load_fixture("h2")
    chol = cholesky_factorize(h, 1e-6)
    m = h.n_spatial
    assert chol.n_factors <= m * (m + 1) // 2
    assert np.abs(chol.reconstruct() - h.eri).max() < 1e-6


def _random_eri(rng, m, rank):
    vs = []
    for _ in range(rank):
        a = rng.normal(size=(m, m))
        vs.append(a + a.T)
    return np.einsum("gpq,grs->pqrs", np.array(vs), np.array(vs))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32 - 1), st.sampled_from([1e-3, 1e-6, 1e-9]))
def test_cholesky_residual_bound_property(m, rank, seed, tol):
    v = _random_eri(np.random.default_rng(seed), m, rank)
    h = MolecularHamiltonian(m, 0, 0, 0.0, np.zeros((m, m)), v)
    chol = cholesky_factorize(h, tol)
    assert chol.residual_bound <= tol
    assert np.abs(chol.reconstruct() - v).max() <= max(chol.residual_bound, 1e-12) * (1 + 1e-9)


def test_not_psd():
    v = -_random_eri(np.random.default_rng(0), 2, 2)
    h = MolecularHamiltonian(2, 1, 1, 0.0, np.zeros((2, 2)), v)
    with pytest.raises(NotPSDError):
        cholesky_factorize(h)


def test_determinant_energy_matches_dense():
    h = load_fixture("h4_chain")
    mat = jordan_wigner(h)
    for occ in (0b00110011, 0b01010101, 0b10011001):
        assert determinant_energy(h, occ) == pytest.approx(
            mat.diagonal(np.array([occ], dtype=np.uint64))[0].real, abs=1e-10)
