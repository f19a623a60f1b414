import numpy as np
import pytest

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.diag([1.0, -1.0]).astype(complex)
PAULI = {"I": I2, "X": X, "Y": Y, "Z": Z}


def dense_word(label: str) -> np.ndarray:
    """Independent Kronecker oracle; qubit k is bit k of the basis index."""
    out = np.eye(1, dtype=complex)
    for ch in label:
        out = np.kron(PAULI[ch], out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
