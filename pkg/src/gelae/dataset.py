"""Binary container for featurized coupling systems.

Layout::

    b"GELAEDS\\n"                     8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON
    n_samples x 138 float64 (<f8)    per sample: 64 features, 64 adjacency,
                                     8 mask, label (NaN if absent), record id

The manifest carries ``n_samples``, ``representation``, ``layout_version``,
``columns`` and, per sample, the slot atom pairs used to build it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .featurizer import FEATURE_COLUMNS, BondSlot, CouplingSystem, Representation

MAGIC = b"GELAEDS\n"
LAYOUT_VERSION = 1
BLOCK = 64 + 64 + 8 + 1 + 1


class Dataset:
    """Stacked coupling systems as dense arrays (the form the model consumes)."""

    def __init__(self, features, adjacency, mask, labels, record_ids,
                 representation: str = Representation.E2_invariant.value, slots=None):
        self.features = np.asarray(features, dtype=np.float64).reshape(-1, 8, 8)
        self.adjacency = np.asarray(adjacency, dtype=np.float64).reshape(-1, 8, 8)
        self.mask = np.asarray(mask, dtype=np.float64).reshape(-1, 8)
        self.labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        self.record_ids = np.asarray(record_ids, dtype=np.int64).reshape(-1)
        self.representation = Representation(representation).value
        self.slots = slots

    @classmethod
    def from_systems(cls, systems: list[CouplingSystem], representation=Representation.E2_invariant):
        n = len(systems)
        slots = [[[s.from_atom, s.to_atom] if s.occupied else None for s in sys.slot_meta] for sys in systems]
        return cls(
            np.array([s.features for s in systems]).reshape(n, 8, 8),
            np.array([s.adjacency for s in systems]).reshape(n, 8, 8),
            np.array([s.mask for s in systems]).reshape(n, 8),
            np.array([np.nan if s.label is None else s.label for s in systems], dtype=np.float64),
            np.array([s.record_id for s in systems], dtype=np.int64),
            Representation(representation).value,
            slots,
        )

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        slots = None if self.slots is None else [self.slots[i] for i in idx]
        return Dataset(self.features[idx], self.adjacency[idx], self.mask[idx],
                       self.labels[idx], self.record_ids[idx], self.representation, slots)

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(np.isfinite(self.labels)))

    def index_of(self, record_id: int) -> int:
        hits = np.flatnonzero(self.record_ids == record_id)
        if not len(hits):
            raise KeyError(record_id)
        return int(hits[0])

    def system(self, i: int) -> CouplingSystem:
        meta = []
        if self.slots is not None:
            roles = ["coupling_H", "other", "other", "central"] * 2
            meta = [BondSlot(p[0], p[1], roles[k], True) if p else BondSlot(role=roles[k])
                    for k, p in enumerate(self.slots[i])]
        label = None if np.isnan(self.labels[i]) else float(self.labels[i])
        return CouplingSystem(self.features[i].copy(), self.adjacency[i].copy(), self.mask[i].copy(),
                              label, int(self.record_ids[i]), meta)

    def save(self, path: str | Path) -> None:
        manifest = {
            "format": "gelae-dataset",
            "layout_version": LAYOUT_VERSION,
            "n_samples": len(self),
            "representation": self.representation,
            "columns": FEATURE_COLUMNS[self.representation],
            "block": ["features[64]", "adjacency[64]", "mask[8]", "label", "record_id"],
            "slots": self.slots,
        }
        head = json.dumps(manifest).encode("utf-8")
        body = np.concatenate([
            self.features.reshape(len(self), 64),
            self.adjacency.reshape(len(self), 64),
            self.mask,
            self.labels[:, None],
            self.record_ids[:, None].astype(np.float64),
        ], axis=1).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(body.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{path}: not a featurized dataset file")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        manifest = json.loads(raw[16:16 + hlen].decode("utf-8"))
        if manifest.get("layout_version") != LAYOUT_VERSION:
            raise ValueError(f"{path}: unsupported layout version {manifest.get('layout_version')}")
        n = manifest["n_samples"]
        body = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
        if body.size != n * BLOCK:
            raise ValueError(f"{path}: expected {n} samples, payload holds {body.size / BLOCK:g}")
        body = body.reshape(n, BLOCK).astype(np.float64)
        return cls(body[:, :64], body[:, 64:128], body[:, 128:136], body[:, 136],
                   body[:, 137].astype(np.int64), manifest["representation"], manifest.get("slots"))
