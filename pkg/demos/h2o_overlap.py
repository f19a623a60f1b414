"""Trial quality versus contextual-subspace size for H2O/STO-3G.

Prints the CSA energy error and the overlap of the back-rotated subspace
state with the FCI ground state for n_cs = 0..14.
"""

from csafqmc.chem import load_fixture
from csafqmc.exact import fci_ground_state
from csafqmc.pipeline import csa_sweep, prepare

h = load_fixture("h2o")
gs = fci_ground_state(h)
print(f"E_FCI = {gs.energy:.8f} Ha")
print(f"{'n_cs':>4} {'E_CSA - E_FCI':>14} {'|<T|GS>|':>10} {'terms':>6}")
for row in csa_sweep(prepare(h), range(15), fci=gs):
    print(f"{row.n_cs:4d} {row.e_csa - gs.energy:14.3e} {row.overlap:10.6f} {row.n_terms:6d}")
