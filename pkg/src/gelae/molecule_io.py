"""CHAMPS-style CSV ingestion and distance-based bond perception."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

log = logging.getLogger(__name__)

ELEMENTS = ("H", "C", "N", "O", "F")
ATOMIC_NUMBER = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9}
MAX_ATOMS = 29
SCC_MIN = -2.99
SCC_MAX = 17.00
COUPLING_TYPE = "3JHH"

STRUCTURE_HEADER = ["molecule_name", "atom_index", "atom", "x", "y", "z"]
COUPLING_HEADER = ["id", "molecule_name", "atom_index_0", "atom_index_1", "type", "scalar_coupling_constant"]
CHARGE_HEADER = ["molecule_name", "atom_index", "mulliken_charge"]


class ParseError(ValueError):
    """Malformed input file. ``line`` is 1-based, counting the header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Atom:
    index: int
    element: str
    position: np.ndarray
    charge: float = 0.0

    def __post_init__(self):
        if self.element not in ATOMIC_NUMBER:
            raise ValueError(f"unsupported element {self.element!r}")
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (3,) or not np.all(np.isfinite(self.position)):
            raise ValueError(f"atom {self.index}: position must be 3 finite values")


@dataclass
class Molecule:
    name: str
    atoms: list[Atom] = field(default_factory=list)

    def __post_init__(self):
        for i, atom in enumerate(self.atoms):
            if atom.index != i:
                raise ValueError(f"{self.name}: atom indices must be 0..n-1 without gaps")
        if len(self.atoms) > MAX_ATOMS:
            log.warning("molecule %s has %d atoms (> %d)", self.name, len(self.atoms), MAX_ATOMS)

    def __len__(self):
        return len(self.atoms)

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms]).reshape(-1, 3)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]


@dataclass
class CouplingRecord:
    id: int
    molecule_name: str
    atom_index_0: int
    atom_index_1: int
    coupling_type: str = COUPLING_TYPE
    scc: float | None = None

    @property
    def out_of_range(self) -> bool:
        return self.scc is not None and not (SCC_MIN <= self.scc <= SCC_MAX)

    def validate(self, molecule: Molecule) -> None:
        for idx in (self.atom_index_0, self.atom_index_1):
            if not 0 <= idx < len(molecule):
                raise ValueError(f"record {self.id}: atom {idx} not in molecule {molecule.name}")
            if molecule.atoms[idx].element != "H":
                raise ValueError(f"record {self.id}: atom {idx} is not a hydrogen")


# --- bond table -------------------------------------------------------------

# (element, element, order, length in Angstrom)
_TABLE_ROWS = [
    ("C", "C", "single", 1.54),
    ("C", "C", "double", 1.34),
    ("C", "C", "triple", 1.20),
    ("C", "N", "single", 1.48),
    ("C", "N", "double", 1.35),
    ("C", "N", "triple", 1.16),
    ("C", "O", "single", 1.43),
    ("C", "O", "double", 1.20),
    ("C", "F", "single", 1.38),
    ("C", "H", "single", 1.09),
    ("N", "N", "single", 1.45),
    ("N", "N", "double", 1.25),
    ("N", "N", "triple", 1.10),
    ("N", "O", "single", 1.46),
    ("N", "O", "double", 1.14),
    ("N", "F", "single", 1.40),
    ("N", "H", "single", 1.01),
    ("O", "O", "single", 1.48),
    ("O", "O", "double", 1.20),
    ("O", "H", "single", 0.98),
]


@dataclass(frozen=True)
class BondEntry:
    length: float
    threshold: float


class BondTable:
    """Reference bond lengths keyed by unordered element pair and bond order."""

    def __init__(self, rows: Iterable[tuple[str, str, str, float]] = _TABLE_ROWS, margin: float = 1.1):
        self.margin = margin
        self.entries: dict[tuple[frozenset, str], BondEntry] = {}
        for a, b, order, length in rows:
            self.entries[(frozenset((a, b)), order)] = BondEntry(length, margin * length)

    def __len__(self):
        return len(self.entries)

    def for_pair(self, a: str, b: str) -> dict[str, BondEntry]:
        key = frozenset((a, b))
        return {order: e for (pair, order), e in self.entries.items() if pair == key}

    def max_threshold(self, a: str, b: str) -> float | None:
        options = self.for_pair(a, b)
        return max(e.threshold for e in options.values()) if options else None


DEFAULT_BOND_TABLE = BondTable()


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    order: str
    distance: float


def detect_bonds(molecule: Molecule, table: BondTable = DEFAULT_BOND_TABLE) -> list[Bond]:
    """All pairs within 1.1x a tabulated length for their elements.

    Connectivity uses the largest threshold for the pair; the order reported
    is the one whose reference length is nearest the measured distance.
    """
    pos = molecule.positions
    elems = molecule.elements
    bonds = []
    for i in range(len(elems)):
        for j in range(i + 1, len(elems)):
            options = table.for_pair(elems[i], elems[j])
            if not options:
                continue
            dist = float(np.linalg.norm(pos[i] - pos[j]))
            if dist <= max(e.threshold for e in options.values()):
                order = min(options, key=lambda o: abs(options[o].length - dist))
                bonds.append(Bond(i, j, order, dist))
    return bonds


def bond_graph(molecule: Molecule, table: BondTable = DEFAULT_BOND_TABLE) -> dict[int, set[int]]:
    graph: dict[int, set[int]] = {i: set() for i in range(len(molecule))}
    for b in detect_bonds(molecule, table):
        graph[b.i].add(b.j)
        graph[b.j].add(b.i)
    return graph


# --- parsing ----------------------------------------------------------------

def _reader(text: str | TextIO, header: list[str], optional: tuple[str, ...] = ()):
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        found = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("missing header", 1) from None
    required = [h for h in header if h not in optional]
    if found[: len(required)] != required or not set(found) <= set(header):
        raise ParseError(f"expected header {','.join(header)}, got {','.join(found)}", 1)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(found):
            raise ParseError(f"expected {len(found)} fields, got {len(row)}", lineno)
        yield lineno, dict(zip(found, (c.strip() for c in row)))


def _int(value: str, name: str, lineno: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{name} must be an integer, got {value!r}", lineno) from None


def _float(value: str, name: str, lineno: int) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ParseError(f"{name} must be a number, got {value!r}", lineno) from None
    if not math.isfinite(out):
        raise ParseError(f"{name} must be finite", lineno)
    return out


def parse_structures(text: str | TextIO) -> list[Molecule]:
    """Parse ``molecule_name,atom_index,atom,x,y,z`` rows into molecules.

    Rows may arrive in any order; molecules come back in order of first
    appearance with atoms sorted by index.
    """
    grouped: dict[str, dict[int, Atom]] = {}
    for lineno, row in _reader(text, STRUCTURE_HEADER):
        name = row["molecule_name"]
        idx = _int(row["atom_index"], "atom_index", lineno)
        element = row["atom"]
        if element not in ATOMIC_NUMBER:
            raise ParseError(f"unknown element {element!r}", lineno)
        xyz = [_float(row[k], k, lineno) for k in ("x", "y", "z")]
        atoms = grouped.setdefault(name, {})
        if idx in atoms:
            raise ParseError(f"duplicate atom {idx} in molecule {name}", lineno)
        atoms[idx] = Atom(idx, element, np.array(xyz))
    molecules = []
    for name, atoms in grouped.items():
        if sorted(atoms) != list(range(len(atoms))):
            raise ParseError(f"molecule {name}: atom indices are not contiguous from 0")
        molecules.append(Molecule(name, [atoms[i] for i in range(len(atoms))]))
    return molecules


@dataclass
class CouplingParseResult:
    records: list[CouplingRecord]
    skipped: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def parse_couplings(text: str | TextIO, coupling_type: str = COUPLING_TYPE) -> CouplingParseResult:
    """Parse coupling rows, keeping only ``coupling_type``.

    The ``scalar_coupling_constant`` column is optional (prediction inputs).
    """
    records = []
    skipped = 0
    for lineno, row in _reader(text, COUPLING_HEADER, optional=("scalar_coupling_constant",)):
        if row["type"] != coupling_type:
            skipped += 1
            continue
        scc = row.get("scalar_coupling_constant")
        rec = CouplingRecord(
            id=_int(row["id"], "id", lineno),
            molecule_name=row["molecule_name"],
            atom_index_0=_int(row["atom_index_0"], "atom_index_0", lineno),
            atom_index_1=_int(row["atom_index_1"], "atom_index_1", lineno),
            coupling_type=row["type"],
            scc=_float(scc, "scalar_coupling_constant", lineno) if scc not in (None, "") else None,
        )
        if rec.out_of_range:
            log.warning("record %d: scc %.3f outside [%.2f, %.2f]", rec.id, rec.scc, SCC_MIN, SCC_MAX)
        records.append(rec)
    if skipped:
        log.info("skipped %d non-%s couplings", skipped, coupling_type)
    return CouplingParseResult(records, skipped)


def parse_charges(text: str | TextIO | None, molecules: list[Molecule], strict: bool = False) -> list[Molecule]:
    """Assign partial charges in place; ``text=None`` leaves every charge at 0.0."""
    if text is None:
        return molecules
    by_name = {m.name: m for m in molecules}
    for lineno, row in _reader(text, CHARGE_HEADER):
        name = row["molecule_name"]
        idx = _int(row["atom_index"], "atom_index", lineno)
        charge = _float(row["mulliken_charge"], "mulliken_charge", lineno)
        mol = by_name.get(name)
        if mol is None:
            if strict:
                raise ParseError(f"unknown molecule {name!r}", lineno)
            log.warning("line %d: charge for unknown molecule %s skipped", lineno, name)
            continue
        if not 0 <= idx < len(mol):
            raise ParseError(f"molecule {name} has no atom {idx}", lineno)
        mol.atoms[idx].charge = charge
    return molecules


# --- serialization ----------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_structures(molecules: list[Molecule]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(STRUCTURE_HEADER)
    for mol in molecules:
        for a in mol.atoms:
            w.writerow([mol.name, a.index, a.element, *map(_fmt, a.position)])
    return out.getvalue()


def write_couplings(records: list[CouplingRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    labeled = any(r.scc is not None for r in records)
    w.writerow(COUPLING_HEADER if labeled else COUPLING_HEADER[:-1])
    for r in records:
        row = [r.id, r.molecule_name, r.atom_index_0, r.atom_index_1, r.coupling_type]
        if labeled:
            row.append("" if r.scc is None else _fmt(r.scc))
        w.writerow(row)
    return out.getvalue()


def write_charges(molecules: list[Molecule]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CHARGE_HEADER)
    for mol in molecules:
        for a in mol.atoms:
            w.writerow([mol.name, a.index, _fmt(a.charge)])
    return out.getvalue()
