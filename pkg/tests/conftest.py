import math

import numpy as np
import pytest

from gelae.molecule_io import Atom, Molecule
from gelae.synthetic import ethane


def torsion_atan2(p0, p1, p2, p3):
    """Signed torsion via the atan2 formulation (independent of the arccos path)."""
    b0 = p0 - p1
    b1 = p2 - p1
    b2 = p3 - p2
    b1n = b1 / np.linalg.norm(b1)
    v = b0 - np.dot(b0, b1n) * b1n
    w = b2 - np.dot(b2, b1n) * b1n
    return math.atan2(np.dot(np.cross(b1n, v), w), np.dot(v, w))


def random_system(rng, n_pad=None):
    """Random features plus a valid-looking adjacency (self loops, symmetric, padded slots)."""
    occ = np.ones(8)
    pads = rng.integers(0, 3) if n_pad is None else n_pad
    for k in rng.choice([1, 2, 5, 6], size=pads, replace=False):
        occ[k] = 0
    A = (rng.random((8, 8)) < 0.5).astype(float)
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 1.0)
    A *= occ[:, None] * occ[None, :]
    X = rng.normal(size=(8, 8)) * occ[:, None]
    return X, A, np.array([1.0, 0, 0, 0, 1, 0, 0, 0])


def scalar_attention(embed, Wq, Wk, Wv, A):
    """Node-by-node evaluation: projections, dot scores, -1000 masking, softmax, weighted sum."""
    n, d = len(embed), Wq.shape[1]
    q = [[sum(embed[i][t] * Wq[t][c] for t in range(len(Wq))) for c in range(d)] for i in range(n)]
    k = [[sum(embed[i][t] * Wk[t][c] for t in range(len(Wk))) for c in range(d)] for i in range(n)]
    v = [[sum(embed[i][t] * Wv[t][c] for t in range(len(Wv))) for c in range(d)] for i in range(n)]
    z = []
    for i in range(n):
        s = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) if A[i][j] == 1 else -1000.0
             for j in range(n)]
        top = max(s)
        w = [math.exp(x - top) for x in s]
        tot = sum(w)
        z.append([sum(w[j] / tot * v[j][c] for j in range(n)) for c in range(d)])
    return np.array(z)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def moved(mol: Molecule, R, t) -> Molecule:
    return Molecule(mol.name, [Atom(a.index, a.element, R @ a.position + t, a.charge) for a in mol.atoms])


@pytest.fixture
def staggered_ethane():
    """Ideal staggered ethane: H2 on C0, H5/H6/H7 on C1 at 60/180/300 degrees."""
    return ethane(math.pi / 3, jitter=False)


@pytest.fixture
def hoch_molecule():
    """Methanol-like H-O-C-H: O carries only H and C, so its other slots pad."""
    pos = {
        0: ("C", [0.0, 0.0, 0.0]),
        1: ("O", [1.43, 0.0, 0.0]),
        2: ("H", [1.75, 0.9, 0.0]),
        3: ("H", [-0.36, 1.03, 0.0]),
        4: ("H", [-0.36, -0.51, 0.89]),
        5: ("H", [-0.36, -0.51, -0.89]),
    }
    return Molecule("methanol", [Atom(i, e, np.array(p)) for i, (e, p) in pos.items()])
