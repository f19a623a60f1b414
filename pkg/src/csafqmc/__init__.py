"""Contextual-subspace trial wavefunctions for auxiliary-field QMC."""

from .afqmc import AFQMCParams, EnergyEstimate, SlaterDeterminant, run_afqmc, trial_overlap
from .chem import (CholeskyFactorization, MolecularHamiltonian, cholesky_factorize, load_fixture,
                   parse_fcidump, write_fcidump)
from .contextual import TrialWavefunction, build_trial, perturb_trial
from .errors import CSAFQMCError
from .pipeline import cs_afqmc, csa_sweep, make_trial, prepare, solve_csa

__version__ = "0.1.0"

__all__ = [
    "AFQMCParams", "CSAFQMCError", "CholeskyFactorization", "EnergyEstimate", "MolecularHamiltonian",
    "SlaterDeterminant", "TrialWavefunction", "build_trial", "cholesky_factorize", "cs_afqmc", "csa_sweep",
    "load_fixture", "make_trial", "parse_fcidump", "perturb_trial", "prepare", "run_afqmc", "solve_csa",
    "trial_overlap", "write_fcidump",
]
