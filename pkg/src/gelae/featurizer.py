"""Coupling-system featurization: H-X1-X2-H path, 8 bond slots, features, adjacency, mask.

Slot layout (fixed)::

    0  X1 -> H_a      coupling bond on the first center
    1  X1 -> other    lower atom index first, or padding
    2  X1 -> other
    3  X1 -> X2       central bond
    4  X2 -> H_b
    5  X2 -> other
    6  X2 -> other
    7  X2 -> X1

E2 feature columns: bond length, angle to the coupling bond on the same
center, angle to the central bond on the same center, dihedral, atom code
(from, to), charge (from, to). E1 replaces the first four columns with the
bond vector and a zero.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .molecule_io import ATOMIC_NUMBER, CouplingRecord, Molecule, bond_graph, BondTable, DEFAULT_BOND_TABLE

N_SLOTS = 8
N_FEATURES = 8
EPS = 1e-9
MASK = np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=np.float64)
FEATURE_COLUMNS = {
    "E2_invariant": ["length", "angle_ref_h", "angle_ref_central", "dihedral",
                     "code_from", "code_to", "charge_from", "charge_to"],
    "E1_bond_vector": ["dx", "dy", "dz", "zero",
                       "code_from", "code_to", "charge_from", "charge_to"],
}


class Representation(str, enum.Enum):
    E2_invariant = "E2_invariant"
    E1_bond_vector = "E1_bond_vector"


class DihedralMode(str, enum.Enum):
    per_slot = "per_slot"
    central = "central"


class FeaturizeError(ValueError):
    """A coupling record that cannot be turned into a coupling system."""

    reason = "invalid"


class NoPathError(FeaturizeError):
    reason = "no 3-bond path"


class ValenceError(FeaturizeError):
    reason = "valence error"


class GeometryError(FeaturizeError):
    reason = "degenerate geometry"


@dataclass(frozen=True)
class BondSlot:
    from_atom: int = -1
    to_atom: int = -1
    role: str = "other"
    occupied: bool = False


@dataclass
class CouplingSystem:
    features: np.ndarray
    adjacency: np.ndarray
    mask: np.ndarray
    label: float | None = None
    record_id: int = -1
    slot_meta: list[BondSlot] = field(default_factory=list)
    degenerate_dihedrals: int = 0

    @property
    def occupancy(self) -> np.ndarray:
        return np.diag(self.adjacency).copy()


def atom_code(element: str) -> float:
    return ATOMIC_NUMBER[element] / 10.0


# --- geometry ---------------------------------------------------------------

def bond_angle(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = _norm(a), _norm(b)
    if na < EPS or nb < EPS:
        raise GeometryError("zero-length bond vector")
    return _angle(a, b)


def _cross(u, v) -> np.ndarray:
    # np.cross carries heavy per-call overhead for single 3-vectors
    return np.array([u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]])


def _norm(u) -> float:
    return math.sqrt(float(np.dot(u, u)))


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    # atan2 form stays accurate near 0 and pi, where arccos loses digits
    return float(np.arctan2(_norm(_cross(u, v)), np.dot(u, v)))


def _plane_angle(v1: np.ndarray, v2: np.ndarray) -> float | None:
    n1, n2 = _norm(v1), _norm(v2)
    if n1 < EPS or n2 < EPS:
        return None
    return _angle(v1, v2)


def dihedral_angle(slot_bond, central, ref_bond) -> float:
    """Unsigned angle between plane(slot_bond, central) and plane(central, ref_bond).

    ``slot_bond`` leaves one end of ``central`` and ``ref_bond`` leaves the
    other; both normals are taken against the same oriented central axis so
    that a cis arrangement gives 0 and trans gives pi. Degenerate (collinear)
    input returns 0.0.
    """
    c = np.asarray(central, dtype=np.float64)
    out = _plane_angle(_cross(c, slot_bond), _cross(c, ref_bond))
    return 0.0 if out is None else out


# --- graph ------------------------------------------------------------------

def find_coupling_path(graph: dict[int, set[int]], h_a: int, h_b: int) -> tuple[int, int]:
    if h_a == h_b:
        raise NoPathError("coupled atoms must differ")
    candidates = [
        (x1, x2)
        for x1 in graph.get(h_a, ())
        for x2 in graph.get(h_b, ())
        if x1 != x2 and x1 != h_b and x2 != h_a and x2 in graph[x1]
    ]
    if not candidates:
        raise NoPathError(f"atoms {h_a} and {h_b}: not a 3J coupling")
    return min(candidates)


def enumerate_bond_slots(path: tuple[int, int, int, int], graph: dict[int, set[int]]) -> list[BondSlot]:
    """Lay out the 8 directed bond slots for the path ``(h_a, x1, x2, h_b)``."""
    h_a, x1, x2, h_b = path
    slots: list[BondSlot] = []
    for center, h, other_center in ((x1, h_a, x2), (x2, h_b, x1)):
        if len(graph[center]) > 4:
            raise ValenceError(f"atom {center} has {len(graph[center])} neighbors")
        rest = sorted(graph[center] - {h, other_center})
        slots.append(BondSlot(center, h, "coupling_H", True))
        for k in range(2):
            slots.append(BondSlot(center, rest[k], "other", True) if k < len(rest) else BondSlot())
        slots.append(BondSlot(center, other_center, "central", True))
    return slots


# --- matrices ---------------------------------------------------------------

def build_feature_matrix(slots: list[BondSlot], molecule: Molecule,
                         representation: Representation | str = Representation.E2_invariant,
                         dihedral_mode: DihedralMode | str = DihedralMode.per_slot) -> tuple[np.ndarray, int]:
    """Return the 8x8 feature matrix and the count of degenerate dihedrals."""
    representation = Representation(representation)
    dihedral_mode = DihedralMode(dihedral_mode)
    pos = molecule.positions
    atoms = molecule.atoms

    def vec(slot: BondSlot) -> np.ndarray:
        return pos[slot.to_atom] - pos[slot.from_atom]

    X = np.zeros((N_SLOTS, N_FEATURES))
    degenerate = 0
    central_torsion = None
    if representation is Representation.E2_invariant:
        c = vec(slots[3])
        v1, v2 = _cross(c, vec(slots[0])), _cross(c, vec(slots[4]))
        central_torsion = _plane_angle(v1, v2)
        if central_torsion is None:
            degenerate += 1
            central_torsion = 0.0

    for i, slot in enumerate(slots):
        if not slot.occupied:
            continue
        base = 0 if i < 4 else 4
        a = vec(slot)
        if representation is Representation.E2_invariant:
            length = float(_norm(a))
            if length < EPS:
                raise GeometryError(f"atoms {slot.from_atom} and {slot.to_atom} coincide")
            ang_h = bond_angle(a, vec(slots[base]))
            ang_c = bond_angle(a, vec(slots[base + 3]))
            if dihedral_mode is DihedralMode.central:
                dih = central_torsion
            elif slot.role == "central":
                dih = 0.0
            else:
                ref = vec(slots[4 - base])
                raw = _plane_angle(_cross(vec(slots[base + 3]), a), _cross(vec(slots[base + 3]), ref))
                if raw is None:
                    degenerate += 1
                    raw = 0.0
                dih = raw
            X[i, :4] = (length, ang_h, ang_c, dih)
        else:
            X[i, :3] = a
        fa, ta = atoms[slot.from_atom], atoms[slot.to_atom]
        X[i, 4:] = (atom_code(fa.element), atom_code(ta.element), fa.charge, ta.charge)
    return X, degenerate


def build_adjacency(slots: list[BondSlot]) -> np.ndarray:
    A = np.zeros((N_SLOTS, N_SLOTS))
    for i, si in enumerate(slots):
        if not si.occupied:
            continue
        for j, sj in enumerate(slots):
            if sj.occupied and {si.from_atom, si.to_atom} & {sj.from_atom, sj.to_atom}:
                A[i, j] = 1.0
    return A


def build_mask(slots: list[BondSlot]) -> np.ndarray:
    return MASK.copy()


def featurize(record: CouplingRecord, molecule: Molecule,
              representation: Representation | str = Representation.E2_invariant,
              dihedral_mode: DihedralMode | str = DihedralMode.per_slot,
              graph: dict[int, set[int]] | None = None,
              table: BondTable = DEFAULT_BOND_TABLE) -> CouplingSystem:
    if graph is None:
        graph = bond_graph(molecule, table)
    h_a, h_b = record.atom_index_0, record.atom_index_1
    try:
        record.validate(molecule)
    except ValueError as exc:
        raise FeaturizeError(str(exc)) from None
    x1, x2 = find_coupling_path(graph, h_a, h_b)
    slots = enumerate_bond_slots((h_a, x1, x2, h_b), graph)
    X, degenerate = build_feature_matrix(slots, molecule, representation, dihedral_mode)
    return CouplingSystem(
        features=X,
        adjacency=build_adjacency(slots),
        mask=build_mask(slots),
        label=record.scc,
        record_id=record.id,
        slot_meta=slots,
        degenerate_dihedrals=degenerate,
    )


@dataclass
class FeaturizeSummary:
    molecules: int = 0
    featurized: int = 0
    skipped: dict[str, int] = field(default_factory=dict)
    degenerate_dihedrals: int = 0

    def skip(self, reason: str):
        self.skipped[reason] = self.skipped.get(reason, 0) + 1


def featurize_all(records, molecules: list[Molecule],
                  representation: Representation | str = Representation.E2_invariant,
                  dihedral_mode: DihedralMode | str = DihedralMode.per_slot,
                  table: BondTable = DEFAULT_BOND_TABLE) -> tuple[list[CouplingSystem], FeaturizeSummary]:
    """Featurize every record, collecting skip reasons instead of raising."""
    by_name = {m.name: m for m in molecules}
    graphs: dict[str, dict[int, set[int]]] = {}
    summary = FeaturizeSummary(molecules=len(molecules))
    systems = []
    for rec in records:
        mol = by_name.get(rec.molecule_name)
        if mol is None:
            summary.skip("unknown molecule")
            continue
        if mol.name not in graphs:
            graphs[mol.name] = bond_graph(mol, table)
        try:
            system = featurize(rec, mol, representation, dihedral_mode, graphs[mol.name])
        except FeaturizeError as exc:
            summary.skip(exc.reason)
            continue
        summary.featurized += 1
        summary.degenerate_dihedrals += system.degenerate_dihedrals
        systems.append(system)
    return systems, summary
