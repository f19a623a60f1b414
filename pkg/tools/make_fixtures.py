"""Regenerate the FCIDUMP fixtures and reference energies.

Needs pyscf, which is not a runtime dependency of the package. Run once:

    python tools/make_fixtures.py

Writes ``src/csafqmc/data/<name>.fcidump`` and ``src/csafqmc/data/reference.json``.
"""
import json
from pathlib import Path

import numpy as np
from pyscf import cc, fci, gto, scf
from pyscf.tools import fcidump

OUT = Path(__file__).resolve().parents[1] / "src" / "csafqmc" / "data"

N2_BONDS = [1.0, 1.067, 1.134, 1.2, 1.3, 1.4, 1.5, 1.6, 1.67, 1.737, 1.8, 1.9, 2.0]


def systems():
    yield "h2", "H 0 0 0; H 0 0 0.7414", {}
    yield "h4_chain", "; ".join(f"H 0 0 {1.0 * k:.4f}" for k in range(4)), {}
    theta = np.deg2rad(104.52) / 2
    r = 0.9572
    yield (
        "h2o",
        f"O 0 0 0; H 0 {r * np.sin(theta):.8f} {r * np.cos(theta):.8f}; "
        f"H 0 {-r * np.sin(theta):.8f} {r * np.cos(theta):.8f}",
        {},
    )
    for d in N2_BONDS:
        yield f"n2_{d:.3f}", f"N 0 0 0; N 0 0 {d}", {"bond_length": d}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    refs = {}
    for name, atom, extra in systems():
        mol = gto.M(atom=atom, basis="sto-3g", unit="angstrom", symmetry=True, verbose=0)
        mf = scf.RHF(mol)
        mf.conv_tol = 1e-12
        mf.kernel()
        if name.startswith("n2"):
            # stability analysis guards against saddle-point RHF solutions
            mo = mf.stability()[0]
            mf.kernel(mf.make_rdm1(mo, mf.mo_occ))
        fcidump.from_scf(mf, str(OUT / f"{name}.fcidump"), tol=1e-14)
        e_fci, _ = fci.FCI(mf).kernel()
        entry = {
            "atom": atom,
            "basis": "sto-3g",
            "norb": int(mol.nao),
            "nelec": int(mol.nelectron),
            "e_hf": float(mf.e_tot),
            "e_fci": float(e_fci),
            **extra,
        }
        try:
            mycc = cc.CCSD(mf)
            mycc.conv_tol = 1e-10
            mycc.max_cycle = 500
            mycc.kernel()
            if mycc.converged:
                entry["e_ccsd"] = float(mycc.e_tot)
                entry["e_ccsd_t"] = float(mycc.e_tot + mycc.ccsd_t())
        except Exception:  # noqa: BLE001 - CC is reference-only
            pass
        refs[name] = entry
        print(name, entry["e_hf"], entry["e_fci"])
    (OUT / "reference.json").write_text(json.dumps(refs, indent=2) + "\n")


if __name__ == "__main__":
    main()
