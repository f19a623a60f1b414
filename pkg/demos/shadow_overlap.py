"""Matchgate-shadow overlaps against the exact value.

One shadow set of the trial is reused for several random walkers, which is
the point of the protocol: measure once, post-process for every walker.
"""

import numpy as np

from csafqmc.afqmc import SlaterDeterminant, trial_overlap
from csafqmc.chem import load_fixture
from csafqmc.pipeline import make_trial, prepare, solve_csa
from csafqmc.shadows import ShadowEstimatorConfig, collect_samples, estimate_overlap, standard_error

h = load_fixture("h4_chain")
prep = prepare(h)
trial = make_trial(prep, solve_csa(prep, 4))
cfg = ShadowEstimatorConfig(n_samples=4000, n_batches=10, seed=1)
samples = collect_samples(trial, None, cfg)

rng = np.random.default_rng(0)
walkers = [SlaterDeterminant.hartree_fock(4, 2, 2)] + [SlaterDeterminant.random(4, 2, 2, rng) for _ in range(3)]
for d in walkers:
    est = estimate_overlap(samples, d, cfg)
    exact = np.conj(trial_overlap(trial, d))
    print(f"shadow {est.real:+.4f}{est.imag:+.4f}j   exact {exact.real:+.4f}{exact.imag:+.4f}j   "
          f"SE {standard_error(samples, d, cfg):.4f}")
