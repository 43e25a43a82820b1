"""One-hot atom featurization over six categorical atom properties."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from molkd.chem_parse import AtomRecord, MolGraph
from molkd.errors import EmptyCorpus, UnseenValue, VocabMismatch

PROPERTIES = ("element", "aromatic", "mass_bucket", "implicit_h", "charge", "class_id")


def atom_properties(a: AtomRecord) -> tuple:
    """The six categorical values of an atom.

    The hydrogen-count slot uses the parse-time count, so heavy atoms keep
    that signal after hydrogens have become nodes.
    """
    return (a.element, a.aromatic, a.mass_bucket, a.parsed_h, a.charge, a.class_id)


@dataclass(frozen=True)
class FeatureVocab:
    values: tuple[tuple, ...]
    unk: tuple[bool, ...] = (False,) * 6

    def __post_init__(self):
        if len(self.values) != 6 or len(self.unk) != 6:
            raise ValueError("FeatureVocab needs exactly six property blocks")
        index = tuple({v: k for k, v in enumerate(vals)} for vals in self.values)
        sizes = tuple(len(v) + int(u) for v, u in zip(self.values, self.unk))
        offsets = tuple(sum(sizes[:k]) for k in range(6))
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "block_sizes", sizes)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "total_dim", sum(sizes))

    def column(self, block: int, value) -> int:
        idx = self._index[block].get(value)
        if idx is None:
            if not self.unk[block]:
                raise UnseenValue(f"{PROPERTIES[block]}={value!r} not in vocabulary")
            idx = len(self.values[block])
        return self.offsets[block] + idx

    def to_json(self) -> dict:
        return {
            "properties": list(PROPERTIES),
            "values": [list(v) for v in self.values],
            "unk": list(self.unk),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureVocab":
        if obj.get("properties", list(PROPERTIES)) != list(PROPERTIES):
            raise VocabMismatch("vocabulary property list differs")
        return cls(tuple(tuple(v) for v in obj["values"]), tuple(bool(u) for u in obj["unk"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _sort_key(block: int):
    if block == 0:
        return str
    return lambda v: (float(v),)


def build_vocab(graphs: Iterable[MolGraph], unk: bool = False) -> FeatureVocab:
    seen: list[set] = [set() for _ in PROPERTIES]
    empty = True
    for g in graphs:
        empty = False
        for a in g.atoms:
            for k, v in enumerate(atom_properties(a)):
                seen[k].add(v)
    if empty:
        raise EmptyCorpus("cannot build a vocabulary from zero graphs")
    values = tuple(tuple(sorted(s, key=_sort_key(k))) for k, s in enumerate(seen))
    return FeatureVocab(values, (unk,) * 6)


def graph_features(g: MolGraph, v: FeatureVocab) -> np.ndarray:
    """N x total_dim matrix of concatenated one-hot blocks, one row per atom."""
    x = np.zeros((g.n_atoms, v.total_dim))
    for i, a in enumerate(g.atoms):
        for k, val in enumerate(atom_properties(a)):
            x[i, v.column(k, val)] = 1.0
    return x
