import numpy as np
import pytest

from csafqmc.afqmc import (AFQMCParams, PropagatorContext, SlaterDeterminant, TrialProjector, Walker,
                           _weight_factor, blocking_stderr, force_bias, force_bias_wick, load_checkpoint,
                           local_energy, local_energy_wick, mean_field_shift, pair_branch, propagate_orbitals,
                           propagate_step, run_afqmc, save_checkpoint, trial_overlap)
from csafqmc.chem import CholeskyFactorization, MolecularHamiltonian, cholesky_factorize, load_fixture
from csafqmc.contextual import TrialWavefunction
from csafqmc.errors import ValidationError
from csafqmc.exact import SectorBasis, fci_ground_state
from csafqmc.pauli import jordan_wigner

from afqmc_oracles import dense_force_bias, dense_propagator


def _random_trial(rng, h, n_terms=None):
    states = SectorBasis.particle(h.n_spatial, h.n_alpha, h.n_beta).states
    if n_terms is not None:
        states = rng.choice(states, size=min(n_terms, len(states)), replace=False)
    amps = rng.normal(size=len(states)) + 1j * rng.normal(size=len(states))
    return TrialWavefunction(h.n_qubits, states, amps / np.linalg.norm(amps))


def _dense(t: TrialWavefunction):
    return t.to_state().to_dense()


@pytest.fixture(scope="module")
def h4():
    h = load_fixture("h4_chain")
    return h, cholesky_factorize(h), jordan_wigner(h).to_matrix()


def test_hf_overlap_is_one():
    d = SlaterDeterminant.hartree_fock(4, 2, 2)
    t = TrialWavefunction.single(8, 0b00110011)
    assert trial_overlap(t, d) == pytest.approx(1.0)


def test_orthogonal_occupation_overlap_zero():
    d = SlaterDeterminant.from_occupation(4, 0b01010101)
    t = TrialWavefunction.single(8, 0b00110011)
    assert trial_overlap(t, d) == 0


def test_slater_amplitudes_match_dense_oracle(rng):
    d = SlaterDeterminant.random(4, 2, 1, rng)
    v = d.to_state().to_dense()
    assert np.linalg.norm(v) == pytest.approx(1.0)
    nz = np.flatnonzero(np.abs(v) > 1e-14)
    np.testing.assert_allclose(d.amplitudes(nz.astype(np.uint64)), v[nz])


def test_estimators_match_dense(rng, h4):
    h, chol, mat = h4
    dt = 0.01
    mf = mean_field_shift(chol, h.n_alpha, h.n_beta)
    for _ in range(5):
        t = _random_trial(rng, h, n_terms=int(rng.integers(1, 30)))
        d = SlaterDeterminant.random(h.n_spatial, h.n_alpha, h.n_beta, rng)
        tv, dv = _dense(t), d.to_state().to_dense()
        ov = np.vdot(tv, dv)
        assert abs(trial_overlap(t, d) - ov) < 1e-10
        e = np.vdot(tv, mat @ dv) / ov
        assert abs(local_energy(t, d, h) - e) < 1e-8
        assert abs(local_energy_wick(t, d, h) - e) < 1e-8
        ref = dense_force_bias(tv, dv, chol, h.n_qubits, dt)
        np.testing.assert_allclose(force_bias(t, d, chol, dt), ref, atol=1e-8)
        np.testing.assert_allclose(force_bias_wick(t, d, chol, dt), ref, atol=1e-8)
        ref_mf = dense_force_bias(tv, dv, chol, h.n_qubits, dt, mf)
        np.testing.assert_allclose(force_bias(t, d, chol, dt, mean_field=mf), ref_mf, atol=1e-8)


def test_hf_trial_and_walker_energy(h4):
    h, chol, _ = h4
    from csafqmc.chem import build_reference
    d = SlaterDeterminant.hartree_fock(h.n_spatial, h.n_alpha, h.n_beta)
    t = TrialWavefunction.single(h.n_qubits, 0b00110011)
    assert local_energy(t, d, h).real == pytest.approx(build_reference(h).hf_energy, abs=1e-10)


def test_empty_cholesky_force_bias():
    d = SlaterDeterminant.hartree_fock(2, 1, 1)
    t = TrialWavefunction.single(4, 0b0101)
    chol = CholeskyFactorization(np.zeros((0, 2, 2)), 0.0)
    assert force_bias(t, d, chol, 0.01).shape == (0,)


def test_zero_variance_local_energy(rng):
    for name in ("h2", "h4_chain"):
        h = load_fixture(name)
        gs = fci_ground_state(h)
        t = TrialWavefunction.from_state(gs.state, tol=1e-14)
        for _ in range(5):
            d = SlaterDeterminant.random(h.n_spatial, h.n_alpha, h.n_beta, rng)
            assert abs(local_energy(t, d, h) - gs.energy) < 1e-8


def test_slater_closure_matches_dense_propagation(rng, h4):
    h, chol, _ = h4
    for mfs in (True, False):
        ctx = PropagatorContext.build(h, chol, 0.01, seed=3, mean_field_subtraction=mfs)
        d = SlaterDeterminant.random(h.n_spatial, h.n_alpha, h.n_beta, rng)
        field = rng.normal(size=chol.n_factors) + 0.1j * rng.normal(size=chol.n_factors)
        pa = propagate_orbitals(d.matrix_alpha, field, ctx)
        pb = propagate_orbitals(d.matrix_beta, field, ctx)
        out = SlaterDeterminant(pa, pb).to_state().to_dense()
        ref = dense_propagator(ctx, h, field) @ d.to_state().to_dense()
        assert np.abs(out - ref).max() < 1e-8


def test_weight_factor_with_x_at_force_bias(rng, h4):
    h, chol, _ = h4
    ctx = PropagatorContext.build(h, chol, 0.005, seed=0, energy_shift=-2.0)
    xbar = 0.1 * rng.normal(size=chol.n_factors)
    ratio = 0.9 * np.exp(0.3j)
    factor, theta = _weight_factor(ratio, xbar, xbar, np.zeros_like(xbar), ctx)
    scale = np.exp(-ctx.dt * (ctx.constant - ctx.energy_shift))
    expected = abs(ratio * np.exp(0.5 * xbar @ xbar)) * max(0.0, np.cos(theta)) * scale
    assert factor == pytest.approx(expected, rel=1e-12)
    # phaseless projection: a phase past pi/2 kills the walker
    factor, _ = _weight_factor(np.exp(2.0j), xbar, xbar, np.zeros_like(xbar), ctx)
    assert factor == 0.0


def test_propagate_step_keeps_weights_nonnegative(rng, h4):
    h, chol, _ = h4
    t = _random_trial(rng, h, 20)
    ctx = PropagatorContext.build(h, chol, 0.05, seed=5)
    proj = TrialProjector(t, None, chol)
    w = Walker(SlaterDeterminant.hartree_fock(h.n_spatial, h.n_alpha, h.n_beta), 1.0, 0.0, None)
    for _ in range(50):
        w = propagate_step(w, ctx, t, projector=proj)
        assert w.weight >= 0.0


def test_one_body_only_zero_variance():
    h1 = np.array([[-1.0, 0.2, 0.0], [0.2, 0.1, 0.3], [0.0, 0.3, 0.8]])
    h = MolecularHamiltonian(3, 1, 1, 0.5, h1, np.zeros((3, 3, 3, 3)))
    chol = cholesky_factorize(h)
    assert chol.n_factors == 0
    e, c = np.linalg.eigh(h1)
    d = SlaterDeterminant(c[:, :1].astype(complex), c[:, :1].astype(complex))
    t = TrialWavefunction.from_state(d.to_state(), tol=1e-14)
    est = run_afqmc(h, chol, t, AFQMCParams(n_walkers=5, n_blocks=10, steps_per_block=3))
    exact = 0.5 + 2 * e[0]
    np.testing.assert_allclose(est.block_means, exact, atol=1e-10)


def test_block_estimator_from_walker_dumps():
    h = load_fixture("h2")
    chol = cholesky_factorize(h)
    t = TrialWavefunction.single(4, 0b0101)
    dumps = []
    est = run_afqmc(h, chol, t, AFQMCParams(n_walkers=30, n_blocks=8, steps_per_block=5, seed=11),
                    walker_dump=lambda b, w, p, e: dumps.append((w, p, e)))
    for (w, p, e), block in zip(dumps, est.block_means):
        z = w * np.exp(1j * p)
        assert np.real(np.sum(z * e) / np.sum(z)) == pytest.approx(block, abs=1e-12)
        assert np.all(w >= 0)


def test_zero_variance_run_h2():
    h = load_fixture("h2")
    gs = fci_ground_state(h)
    t = TrialWavefunction.from_state(gs.state, tol=1e-14)
    e_locs = []
    est = run_afqmc(h, cholesky_factorize(h), t, AFQMCParams(n_walkers=20, n_blocks=20, steps_per_block=5),
                    walker_dump=lambda b, w, p, e: e_locs.append(e[w > 0]))
    assert np.abs(np.concatenate(e_locs) - gs.energy).max() < 1e-8
    assert est.stderr < 1e-6


def test_run_is_seed_deterministic():
    h = load_fixture("h2")
    chol = cholesky_factorize(h)
    t = TrialWavefunction.single(4, 0b0101)
    p = AFQMCParams(n_walkers=10, n_blocks=5, steps_per_block=4, seed=7)
    assert run_afqmc(h, chol, t, p).block_means == run_afqmc(h, chol, t, p).block_means
    q = AFQMCParams(n_walkers=10, n_blocks=5, steps_per_block=4, seed=8)
    assert run_afqmc(h, chol, t, p).block_means != run_afqmc(h, chol, t, q).block_means


def test_wrong_sector_trial_rejected():
    h = load_fixture("h2")
    t = TrialWavefunction.single(4, 0b0011)
    with pytest.raises(ValidationError):
        run_afqmc(h, cholesky_factorize(h), t, AFQMCParams(n_walkers=2, n_blocks=1, steps_per_block=1))


def test_params_validation():
    with pytest.raises(ValueError):
        AFQMCParams(dt=-1).validate()
    with pytest.raises(ValueError):
        AFQMCParams(equilibration=1.0).validate()


def test_pair_branch_conserves_weight(rng):
    w = rng.exponential(size=50)
    w[::7] = 0.0
    parent, neww = pair_branch(w, np.random.default_rng(0))
    assert neww.sum() == pytest.approx(w.sum())
    assert np.all(w[parent][neww > 0] > 0)


def test_blocking_stderr():
    rng = np.random.default_rng(0)
    iid = rng.normal(size=4096)
    assert blocking_stderr(iid) == pytest.approx(1 / 64, rel=0.25)
    ar = np.zeros(4096)
    for i in range(1, len(ar)):
        ar[i] = 0.9 * ar[i - 1] + rng.normal()
    naive = ar.std(ddof=1) / 64
    assert blocking_stderr(ar) > 2.5 * naive


def test_checkpoint_roundtrip(tmp_path, rng):
    ws = [Walker(SlaterDeterminant.random(3, 2, 1, rng), float(rng.random()), 0.2, 0.5 + 0.1j) for _ in range(4)]
    path = tmp_path / "ck.npz"
    save_checkpoint(path, ws)
    back, meta = load_checkpoint(path)
    for a, b in zip(ws, back):
        np.testing.assert_array_equal(a.det.matrix_alpha, b.det.matrix_alpha)
        np.testing.assert_array_equal(a.det.matrix_beta, b.det.matrix_beta)
        assert (a.weight, a.phase, a.overlap_cache) == (b.weight, b.phase, b.overlap_cache)


def test_h2_hf_trial_reaches_fci():
    h = load_fixture("h2")
    e = fci_ground_state(h).energy
    est = run_afqmc(h, cholesky_factorize(h), TrialWavefunction.single(4, 0b0101),
                    AFQMCParams(n_walkers=200, n_blocks=150, steps_per_block=25, seed=2))
    assert abs(est.mean - e) < 3 * est.stderr
