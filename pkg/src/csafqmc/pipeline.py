"""The five-step CS-AFQMC workflow as library calls.

1. split the qubit Hamiltonian and fix the noncontextual assignment,
2. choose stabilizers and their rotations,
3. solve the contextual subspace exactly,
4. rotate back and truncate into a sparse trial,
5. run AFQMC guided by that trial.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from math import comb

import numpy as np

from .afqmc import AFQMCParams, EnergyEstimate, run_afqmc
from .chem import (CholeskyFactorization, MolecularHamiltonian, ReferenceState, build_reference,
                   cholesky_factorize)
from .contextual import (TRUNCATION_LOSS, TRUNCATION_MAX_TERMS, ContextualSplit, CSASolution,
                         NoncontextualSolution, TrialWavefunction, build_trial, perturb_trial,
                         select_stabilizers, solve_contextual, solve_noncontextual, split_hamiltonian)
from .exact import fci_ground_state, overlap
from .pauli import jordan_wigner

log = logging.getLogger(__name__)

NC_STRATEGIES = ("reference", "quso")
FCI_LIMIT = 2_000_000


@dataclass
class Prepared:
    """Everything up to (not including) the choice of ``n_cs``."""

    h: MolecularHamiltonian
    ref: ReferenceState
    split: ContextualSplit
    nc: NoncontextualSolution


def prepare(h: MolecularHamiltonian, nc_strategy: str = "reference", seed: int = 0) -> Prepared:
    """Steps 1-2 up to the noncontextual assignment.

    ``"reference"`` takes the assignment from the HF determinant, so that
    ``n_cs = 0`` reproduces the HF energy and an HF-guided AFQMC run;
    ``"quso"`` searches for the lowest noncontextual energy.
    """
    if nc_strategy not in NC_STRATEGIES:
        raise ValueError(f"nc_strategy must be one of {NC_STRATEGIES}, got {nc_strategy!r}")
    ref = build_reference(h)
    split = split_hamiltonian(jordan_wigner(h))
    if nc_strategy == "reference":
        nc = NoncontextualSolution.from_state(split.h_nc, ref.hf_occupation)
    else:
        nc = solve_noncontextual(split, ref, seed=seed)
    return Prepared(h, ref, split, nc)


def solve_csa(prep: Prepared, n_cs: int, *, max_weight: int = 2, method: str = "auto") -> CSASolution:
    """Steps 2-3 for one subspace size."""
    h = prep.h
    frame = select_stabilizers(prep.split, prep.ref, n_cs, prep.nc, max_weight=max_weight)
    return solve_contextual(prep.split, frame, prep.nc, method=method,
                            n_spatial=h.n_spatial, n_alpha=h.n_alpha, n_beta=h.n_beta)


def canonical_phase(t: TrialWavefunction) -> TrialWavefunction:
    """Rotate the global phase so the largest amplitude is real and positive."""
    k = int(np.argmax(np.abs(t.amplitudes)))
    a = t.amplitudes[k]
    amps = t.amplitudes * (abs(a) / a)
    amps[k] = abs(a)
    return TrialWavefunction(t.n_qubits, t.states, amps, t.metadata)


def make_trial(prep: Prepared, sol: CSASolution, *, max_loss: float = TRUNCATION_LOSS,
               max_terms: int = TRUNCATION_MAX_TERMS) -> TrialWavefunction:
    """Step 4; raises ``ParticleSectorViolation`` for a wrong-sector subspace state."""
    h = prep.h
    t = build_trial(sol.frame, sol.nc, sol.psi_cs, max_loss=max_loss, max_terms=max_terms,
                    expected_sector=(h.n_alpha, h.n_beta))
    return canonical_phase(t)


def fci_feasible(h: MolecularHamiltonian) -> bool:
    return comb(h.n_spatial, h.n_alpha) * comb(h.n_spatial, h.n_beta) <= FCI_LIMIT


@dataclass
class SweepRow:
    n_cs: int
    e_nc: float
    e_c: float
    e_csa: float
    overlap: float | None
    n_terms: int | None
    error: str | None = None


def csa_sweep(prep: Prepared, n_cs_values, *, fci=None, max_weight: int = 2,
              max_loss: float = TRUNCATION_LOSS, max_terms: int = TRUNCATION_MAX_TERMS) -> list[SweepRow]:
    """CSA energies and trial overlaps with the FCI state across subspace sizes.

    The overlap uses the untruncated back-rotated subspace state.
    """
    rows = []
    for n_cs in n_cs_values:
        sol = solve_csa(prep, n_cs, max_weight=max_weight)
        ov = None
        n_terms = None
        err = None
        try:
            full = make_trial(prep, sol, max_loss=0.0, max_terms=1 << 62)
            if fci is not None:
                ov = abs(overlap(full.to_state(), fci.state))
            n_terms = len(make_trial(prep, sol, max_loss=max_loss, max_terms=max_terms))
        except Exception as exc:  # noqa: BLE001 - recorded per row
            err = f"{type(exc).__name__}: {exc}"
        rows.append(SweepRow(n_cs, sol.e_nc, sol.e_c, sol.e_csa, ov, n_terms, err))
    return rows


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CSAFQMC_THREADS", "1")))
    except ValueError:
        return 1


def _run_one(args) -> tuple[int, EnergyEstimate]:
    h, chol, trial, params, seed, overlap_fn = args
    p = AFQMCParams(**{**params.__dict__, "seed": seed})
    return seed, run_afqmc(h, chol, trial, p, overlap_fn=overlap_fn)


def run_seeds(h: MolecularHamiltonian, chol: CholeskyFactorization, trial: TrialWavefunction,
              params: AFQMCParams, seeds, workers: int | None = None,
              overlap_fn=None) -> dict[int, EnergyEstimate]:
    """Independent AFQMC runs, one per seed, merged by sorted seed.

    Each run owns its RNG stream, so the results do not depend on ``workers``.
    """
    workers = worker_count() if workers is None else workers
    jobs = [(h, chol, trial, params, int(s), overlap_fn) for s in sorted(set(seeds))]
    if workers <= 1 or len(jobs) == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    return dict(sorted(results))


@dataclass
class SeedSummary:
    mean: float
    stderr: float
    mse: float | None
    mae: float | None


def summarize(estimates: dict[int, EnergyEstimate], e_exact: float | None) -> SeedSummary:
    """Pooled mean over seeds; error bar from the spread of seed means when
    there are several seeds, otherwise the single run's blocking error."""
    means = np.array([e.mean for e in estimates.values()])
    if len(means) > 1:
        stderr = float(np.std(means, ddof=1) / np.sqrt(len(means)))
    else:
        stderr = float(next(iter(estimates.values())).stderr)
    mse = mae = None
    if e_exact is not None:
        mse = float(np.mean((means - e_exact) ** 2))
        mae = float(np.mean(np.abs(means - e_exact)))
    return SeedSummary(float(means.mean()), stderr, mse, mae)


def cs_afqmc(h: MolecularHamiltonian, n_cs: int, params: AFQMCParams, seeds=(0,), *,
             nc_strategy: str = "reference", chol: CholeskyFactorization | None = None,
             cholesky_tol: float = 1e-6, epsilon: float = 0.0, max_loss: float = TRUNCATION_LOSS,
             max_terms: int = TRUNCATION_MAX_TERMS, workers: int | None = None):
    """All five steps for one subspace size. Returns ``(trial, solution, estimates)``."""
    prep = prepare(h, nc_strategy)
    sol = solve_csa(prep, n_cs)
    trial = make_trial(prep, sol, max_loss=max_loss, max_terms=max_terms)
    if epsilon:
        trial = perturb_trial(trial, epsilon)
    chol = cholesky_factorize(h, cholesky_tol) if chol is None else chol
    return trial, sol, run_seeds(h, chol, trial, params, seeds, workers)


def exact_energy(h: MolecularHamiltonian) -> float | None:
    if not fci_feasible(h):
        return None
    return float(fci_ground_state(h).energy)
