"""Dense Fock-space oracles for the AFQMC estimators (small systems only)."""

import numpy as np
import scipy.linalg

from csafqmc.pauli import PauliOperator, hopping


def one_body_matrix(mat: np.ndarray, n_qubits: int) -> np.ndarray:
    """Dense ``sum_{pq,sigma} mat[p,q] a+_{p sigma} a_{q sigma}`` in the blocked ordering."""
    m = mat.shape[0]
    op = PauliOperator.zero(n_qubits)
    for p in range(m):
        for q in range(m):
            if mat[p, q] != 0:
                for s in (0, m):
                    op = op + mat[p, q] * hopping(p + s, q + s, n_qubits)
    return op.to_matrix()


def dense_propagator(ctx, h, field: np.ndarray) -> np.ndarray:
    """``exp(-dt/2 K') exp(i sqrt(dt) sum_g f_g L_g) exp(-dt/2 K')`` on the full Fock space."""
    n = h.n_qubits
    half = one_body_matrix(scipy.linalg.logm(ctx.one_body_half).real, n)
    two = one_body_matrix(np.einsum("g,gpq->pq", 1j * np.sqrt(ctx.dt) * field, ctx.cholesky.factors), n)
    eh = scipy.linalg.expm(half)
    return eh @ scipy.linalg.expm(two) @ eh


def dense_force_bias(tv, dv, chol, n_qubits, dt, mean_field=None):
    ov = np.vdot(tv, dv)
    out = []
    for g in range(chol.n_factors):
        lm = one_body_matrix(chol.factors[g], n_qubits)
        val = np.vdot(tv, lm @ dv) / ov
        if mean_field is not None:
            val -= mean_field[g]
        out.append(-1j * np.sqrt(dt) * val)
    return np.array(out)
