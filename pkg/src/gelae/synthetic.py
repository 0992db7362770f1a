"""Ethane-like molecules with Karplus-form 3JHH labels, for desk-scale training checks."""

from __future__ import annotations

import math

import numpy as np

from .featurizer import featurize
from .molecule_io import Atom, CouplingRecord, Molecule

KARPLUS_A = 7.0
KARPLUS_B = -1.0
KARPLUS_C = 5.0


def karplus(phi, a: float = KARPLUS_A, b: float = KARPLUS_B, c: float = KARPLUS_C):
    cos = np.cos(phi)
    return a * cos * cos + b * cos + c


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def ethane(phi: float, rng: np.random.Generator | None = None, jitter: bool = True,
           name: str = "ethane") -> Molecule:
    """C0-C1 along x with H2 on C0 and H5 on C1 at torsion ``phi``.

    Atoms: C0, C1, H2-H4 on C0, H5-H7 on C1. With ``rng`` the bond lengths,
    bond angles and the azimuths of the spectator hydrogens are jittered and
    the whole molecule gets a random rigid motion; the H2-C0-C1-H5 torsion
    stays exactly ``phi``.
    """
    rng = rng or np.random.default_rng(0)
    j = (lambda s: rng.normal(0.0, s)) if jitter else (lambda s: 0.0)
    cc = 1.54 + j(0.02)
    pos = [np.zeros(3), np.array([cc, 0.0, 0.0])]
    tet = math.radians(109.47)
    for center, sign, azimuth0 in ((0, 1.0, 0.0), (1, -1.0, phi)):
        for k in range(3):
            theta = tet + (math.radians(j(2.0)) if jitter else 0.0)
            az = azimuth0 + k * 2 * math.pi / 3 + (math.radians(j(2.0)) if k else 0.0)
            length = 1.09 + j(0.01)
            direction = np.array([-sign * math.cos(theta), math.sin(theta) * math.cos(az),
                                  math.sin(theta) * math.sin(az)])
            pos.append(pos[center] + length * direction)
    pos = np.array(pos)
    if jitter:
        pos = pos @ _rotation(rng).T + rng.uniform(-5, 5, size=3)
    elements = ["C", "C", "H", "H", "H", "H", "H", "H"]
    charges = [-0.3, -0.3] + [0.1] * 6
    return Molecule(name, [Atom(i, e, p, q) for i, (e, p, q) in enumerate(zip(elements, pos, charges))])


def gen_karplus_synthetic(n: int, seed: int = 0, noise_sd: float = 0.05, a: float = KARPLUS_A,
                          b: float = KARPLUS_B, c: float = KARPLUS_C, representation="E2_invariant",
                          dihedral_mode="per_slot", return_raw: bool = False):
    """``n`` featurized ethane coupling systems with label a*cos^2(phi) + b*cos(phi) + c + noise.

    phi is uniform on [0, pi]. With ``return_raw`` the molecules, records and
    torsions are returned as well.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng([int(seed), 3])
    phis = rng.uniform(0.0, math.pi, size=n)
    systems, molecules, records = [], [], []
    for i, phi in enumerate(phis):
        mol = ethane(phi, rng, name=f"synth_{i}")
        label = float(karplus(phi, a, b, c) + (rng.normal(0.0, noise_sd) if noise_sd > 0 else 0.0))
        rec = CouplingRecord(i, mol.name, 2, 5, "3JHH", label)
        systems.append(featurize(rec, mol, representation, dihedral_mode))
        molecules.append(mol)
        records.append(rec)
    if return_raw:
        return systems, molecules, records, phis
    return systems
