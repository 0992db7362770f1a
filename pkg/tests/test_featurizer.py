import itertools
import math

import numpy as np
import pytest

from gelae.dataset import Dataset
from gelae.featurizer import (
    BondSlot, GeometryError, NoPathError, ValenceError, bond_angle, build_adjacency, build_feature_matrix,
    build_mask, dihedral_angle, enumerate_bond_slots, featurize, featurize_all, find_coupling_path,
)
from gelae.molecule_io import CouplingRecord, bond_graph
from gelae.synthetic import ethane

from conftest import moved, random_rotation, torsion_atan2


# --- angles -----------------------------------------------------------------

def test_bond_angle_examples():
    assert bond_angle([1, 0, 0], [0, 1, 0]) == pytest.approx(math.pi / 2)
    assert bond_angle([2, 1, 0], [2, 1, 0]) == pytest.approx(0.0, abs=1e-7)
    assert bond_angle([1, 0, 0], [1, 1, 0]) == pytest.approx(math.pi / 4)


def test_bond_angle_clamps_and_rejects_zero():
    v = np.array([0.1, 0.7, 0.3])
    assert 0.0 <= bond_angle(v, v * 3) <= 1e-7
    assert bond_angle(v, -v) == pytest.approx(math.pi)
    with pytest.raises(GeometryError):
        bond_angle([0, 0, 0], [1, 0, 0])


def test_dihedral_cis_trans():
    c = np.array([1.5, 0, 0])
    assert dihedral_angle([0.3, 1, 0], c, [-0.3, 1, 0]) == pytest.approx(0.0, abs=1e-12)
    assert dihedral_angle([0.3, 1, 0], c, [-0.3, -1, 0]) == pytest.approx(math.pi)


def test_dihedral_degenerate_is_zero():
    assert dihedral_angle([1, 0, 0], [2, 0, 0], [0, 1, 0]) == 0.0


def test_staggered_gauche_matches_atan2(staggered_ethane):
    pos = staggered_ethane.positions
    rec = CouplingRecord(0, "ethane", 2, 5)
    system = featurize(rec, staggered_ethane)
    expected = abs(torsion_atan2(pos[2], pos[0], pos[1], pos[5]))
    assert expected == pytest.approx(math.pi / 3, abs=1e-12)
    assert system.features[0, 3] == pytest.approx(expected, abs=1e-12)
    assert system.features[4, 3] == pytest.approx(expected, abs=1e-12)


def test_per_slot_dihedrals_match_atan2_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        mol = ethane(rng.uniform(0, math.pi), rng)
        pos = mol.positions
        s = featurize(CouplingRecord(0, mol.name, 2, 5), mol)
        for k, slot in enumerate(s.slot_meta):
            if slot.role == "central":
                assert s.features[k, 3] == 0.0
                continue
            if k < 4:
                want = abs(torsion_atan2(pos[slot.to_atom], pos[0], pos[1], pos[5]))
            else:
                want = abs(torsion_atan2(pos[slot.to_atom], pos[1], pos[0], pos[2]))
            assert s.features[k, 3] == pytest.approx(want, abs=1e-9)


# --- path and slots ---------------------------------------------------------

def test_path_ethane(staggered_ethane):
    g = bond_graph(staggered_ethane)
    assert find_coupling_path(g, 2, 5) == (0, 1)


def test_path_geminal_is_not_3j(staggered_ethane):
    g = bond_graph(staggered_ethane)
    with pytest.raises(NoPathError, match="not a 3J"):
        find_coupling_path(g, 2, 3)
    with pytest.raises(NoPathError):
        find_coupling_path(g, 2, 2)


def _brute_paths(graph, h_a, h_b):
    out = []
    for x1, x2 in itertools.permutations(graph, 2):
        if len({h_a, x1, x2, h_b}) == 4 and x1 in graph[h_a] and x2 in graph[x1] and h_b in graph[x2]:
            out.append((x1, x2))
    return out


def test_path_ring_lexicographic_matches_enumeration():
    # hydrogens 0 and 5 each touch two ring atoms; several 3-bond routes exist
    graph = {0: {2, 1}, 1: {0, 3, 4}, 2: {0, 3, 4}, 3: {1, 2, 5}, 4: {1, 2, 5}, 5: {3, 4}}
    paths = _brute_paths(graph, 0, 5)
    assert len(paths) > 1
    assert find_coupling_path(graph, 0, 5) == min(paths) == (1, 3)


def test_path_random_graphs_match_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = 7
        graph = {i: set() for i in range(n)}
        for i, j in itertools.combinations(range(n), 2):
            if rng.random() < 0.4:
                graph[i].add(j)
                graph[j].add(i)
        brute = _brute_paths(graph, 0, 6)
        if brute:
            assert find_coupling_path(graph, 0, 6) == min(brute)
        else:
            with pytest.raises(NoPathError):
                find_coupling_path(graph, 0, 6)


def test_slots_ethane(staggered_ethane):
    g = bond_graph(staggered_ethane)
    slots = enumerate_bond_slots((2, 0, 1, 5), g)
    assert len(slots) == 8 and all(s.occupied for s in slots)
    assert [(s.from_atom, s.to_atom) for s in slots] == [
        (0, 2), (0, 3), (0, 4), (0, 1), (1, 5), (1, 6), (1, 7), (1, 0)]
    assert [s.role for s in slots] == ["coupling_H", "other", "other", "central"] * 2


def test_slots_padding_on_oxygen(hoch_molecule):
    s = featurize(CouplingRecord(0, "methanol", 2, 3), hoch_molecule)
    assert [x.occupied for x in s.slot_meta] == [True, False, False, True, True, True, True, True]
    assert hoch_molecule.atoms[s.slot_meta[0].from_atom].element == "O"
    assert np.all(s.features[1:3] == 0)
    np.testing.assert_array_equal(s.mask, [1, 0, 0, 0, 1, 0, 0, 0])


def test_valence_error():
    graph = {0: {1}, 1: {0, 2, 3, 4, 5}, 2: {1, 6}, 3: {1}, 4: {1}, 5: {1}, 6: {2}}
    with pytest.raises(ValenceError):
        enumerate_bond_slots((0, 1, 2, 6), graph)


# --- matrices ---------------------------------------------------------------

def test_feature_layout(staggered_ethane):
    s = featurize(CouplingRecord(0, "ethane", 2, 5), staggered_ethane)
    X = s.features
    assert X[0, 0] == pytest.approx(1.09, abs=1e-12)
    assert X[3, 0] == pytest.approx(1.54, abs=1e-12)
    assert X[0, 1] == pytest.approx(0.0, abs=1e-7)           # angle to itself
    assert X[3, 2] == pytest.approx(0.0, abs=1e-7)
    assert X[0, 2] == pytest.approx(math.radians(180 - 109.47), abs=1e-9)
    np.testing.assert_allclose(X[0, 4:6], [0.6, 0.1])
    np.testing.assert_allclose(X[3, 4:6], [0.6, 0.6])
    assert np.all((X[:, 1:4] >= 0) & (X[:, 1:4] <= math.pi))


def test_charges_flow_into_features(hoch_molecule):
    hoch_molecule.atoms[1].charge = -0.6
    hoch_molecule.atoms[2].charge = 0.4
    s = featurize(CouplingRecord(0, "methanol", 2, 3), hoch_molecule)
    np.testing.assert_allclose(s.features[0, 6:], [-0.6, 0.4])
    np.testing.assert_allclose(s.features[0, 4:6], [0.8, 0.1])


def test_e2_rigid_and_mirror_invariance():
    rng = np.random.default_rng(11)
    for _ in range(50):
        mol = ethane(rng.uniform(0, math.pi), rng)
        rec = CouplingRecord(0, mol.name, 2, 5)
        base = featurize(rec, mol).features
        R, t = random_rotation(rng), rng.uniform(-20, 20, 3)
        assert np.max(np.abs(featurize(rec, moved(mol, R, t)).features - base)) < 1e-8
        assert np.max(np.abs(featurize(rec, moved(mol, -np.eye(3), t)).features - base)) < 1e-8


def test_e1_changes_under_rotation(staggered_ethane):
    rec = CouplingRecord(0, "ethane", 2, 5)
    X = featurize(rec, staggered_ethane, "E1_bond_vector").features
    Rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    Y = featurize(rec, moved(staggered_ethane, Rz, np.zeros(3)), "E1_bond_vector").features
    np.testing.assert_allclose(Y[:, :3], X[:, :3] @ Rz.T, atol=1e-12)
    np.testing.assert_array_equal(Y[:, 3:], X[:, 3:])
    assert np.max(np.abs(Y - X)) > 0.1
    T = featurize(rec, moved(staggered_ethane, np.eye(3), np.array([3.0, -2, 7])), "E1_bond_vector").features
    np.testing.assert_allclose(T, X, atol=1e-12)


def test_central_dihedral_mode(staggered_ethane):
    s = featurize(CouplingRecord(0, "ethane", 2, 5), staggered_ethane, dihedral_mode="central")
    assert np.allclose(s.features[:, 3], math.pi / 3)


def _shares(a: BondSlot, b: BondSlot):
    return a.occupied and b.occupied and bool({a.from_atom, a.to_atom} & {b.from_atom, b.to_atom})


def test_adjacency_brute_force(staggered_ethane, hoch_molecule):
    for mol, rec in ((staggered_ethane, CouplingRecord(0, "ethane", 2, 5)),
                     (hoch_molecule, CouplingRecord(0, "methanol", 2, 3))):
        s = featurize(rec, mol)
        A = s.adjacency
        for i, j in itertools.product(range(8), repeat=2):
            assert A[i, j] == float(_shares(s.slot_meta[i], s.slot_meta[j]))
        np.testing.assert_array_equal(A, A.T)
        occ = np.array([x.occupied for x in s.slot_meta], dtype=float)
        np.testing.assert_array_equal(np.diag(A), occ)
        assert np.all(A[occ == 0] == 0) and np.all(A[:, occ == 0] == 0)


def test_adjacency_ethane_blocks(staggered_ethane):
    A = featurize(CouplingRecord(0, "ethane", 2, 5), staggered_ethane).adjacency
    assert A[0, 1] == A[1, 0] == 1
    assert A[0, 4] == 0 and A[1, 5] == 0
    assert np.all(A[3] == 1) and np.all(A[7] == 1)


def test_adjacency_padding():
    slots = [BondSlot(0, 1, "coupling_H", True), BondSlot()] + [BondSlot(0, 2, "other", True)] * 6
    A = build_adjacency(slots)
    assert A[0, 1] == 0 and A[1, 1] == 0


def test_mask():
    np.testing.assert_array_equal(build_mask([]), [1, 0, 0, 0, 1, 0, 0, 0])


def test_determinism(staggered_ethane):
    rec = CouplingRecord(0, "ethane", 2, 5)
    a, b = featurize(rec, staggered_ethane), featurize(rec, staggered_ethane)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.adjacency.tobytes() == b.adjacency.tobytes()


def test_featurize_all_skip_reasons(staggered_ethane):
    recs = [CouplingRecord(0, "ethane", 2, 5, scc=3.1), CouplingRecord(1, "ethane", 2, 3),
            CouplingRecord(2, "nope", 2, 5), CouplingRecord(3, "ethane", 0, 5)]
    systems, summary = featurize_all(recs, [staggered_ethane])
    assert [s.record_id for s in systems] == [0]
    assert summary.featurized == 1 and summary.molecules == 1
    assert summary.skipped == {"no 3-bond path": 1, "unknown molecule": 1, "invalid": 1}


def test_dataset_roundtrip(tmp_path, staggered_ethane, hoch_molecule):
    systems = [featurize(CouplingRecord(7, "ethane", 2, 5, scc=4.2), staggered_ethane),
               featurize(CouplingRecord(9, "methanol", 2, 3), hoch_molecule)]
    ds = Dataset.from_systems(systems)
    path = tmp_path / "d.bin"
    ds.save(path)
    back = Dataset.load(path)
    for name in ("features", "adjacency", "mask", "labels", "record_ids"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()
    assert back.representation == "E2_invariant"
    assert np.isnan(back.labels[1]) and back.labels[0] == 4.2
    sys1 = back.system(back.index_of(9))
    assert [s.occupied for s in sys1.slot_meta] == [s.occupied for s in systems[1].slot_meta]
    raw = path.read_bytes()
    assert raw.endswith(np.concatenate([systems[1].features.ravel(), systems[1].adjacency.ravel(),
                                        systems[1].mask, [np.nan], [9.0]]).astype("<f8").tobytes())


def test_dataset_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nonsense")
    with pytest.raises(ValueError, match="not a featurized"):
        Dataset.load(p)
