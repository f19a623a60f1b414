"""HF-guided versus CS-guided AFQMC for stretched N2 (reduced run).

With an HF trial the phaseless constraint leaves a large bias at 1.67 A;
an 8-qubit contextual-subspace trial removes most of it.
"""

import sys

from csafqmc.afqmc import AFQMCParams
from csafqmc.chem import load_fixture
from csafqmc.pipeline import cs_afqmc, exact_energy, summarize

bond = sys.argv[1] if len(sys.argv) > 1 else "1.670"
h = load_fixture(f"n2_{bond}")
e_fci = exact_energy(h)
params = AFQMCParams(n_walkers=100, n_blocks=100)
print(f"N2 {bond} A, E_FCI = {e_fci:.6f} Ha")
for n_cs in (0, 8):
    trial, sol, est = cs_afqmc(h, n_cs, params, seeds=[0, 1])
    s = summarize(est, e_fci)
    print(f"n_cs={n_cs}: {len(trial)} determinants, E_CSA error {sol.e_csa - e_fci:+.4f}, "
          f"AFQMC error {s.mean - e_fci:+.4f} +- {s.stderr:.4f} Ha")
