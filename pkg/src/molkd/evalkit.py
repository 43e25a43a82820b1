"""Task metrics, perturbation effect score, and atom-level weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from molkd.chem_parse import MolGraph, parse_molecule
from molkd.encoder import EncoderParams, batch_graphs, node_embeddings
from molkd.errors import EmptyMetricInput, LabelOutOfDomain, ShapeMismatch, SingleClass


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: (wins + ties / 2) / (n_pos * n_neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ShapeMismatch("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise LabelOutOfDomain("AUC labels must be 0 or 1")
    pos, neg = s[y == 1], np.sort(s[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise SingleClass("AUC needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((at_or_below - below).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def _pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise EmptyMetricInput("no predictions")
    if p.shape != y.shape:
        raise ShapeMismatch(f"{p.size} predictions vs {y.size} labels")
    return p, y


def rmse(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def mae(preds, labels) -> float:
    p, y = _pair(preds, labels)
    return float(np.mean(np.abs(p - y)))


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUC over label columns, ignoring missing (NaN) labels and one-class columns."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64).T).T
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64).T).T
    aucs = []
    for t in range(labels.shape[1]):
        seen = ~np.isnan(labels[:, t])
        try:
            aucs.append(auc_roc(scores[seen, t], labels[seen, t]))
        except (SingleClass, EmptyMetricInput):
            continue
    return float(np.mean(aucs)) if aucs else float("nan")


# --- robustness ----------------------------------------------------------


@dataclass
class PerturbationSet:
    molecules: list[MolGraph]
    properties: np.ndarray
    perturbed: list[MolGraph]
    perturbed_properties: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        n = len(self.molecules)
        if not (len(self.perturbed) == n == len(self.properties)
                == len(self.perturbed_properties) == len(self.levels)):
            raise ShapeMismatch("perturbation set columns differ in length")


def load_perturbation_csv(path) -> PerturbationSet:
    """CSV with columns smiles, property, perturbed_smiles, perturbed_property, level."""
    m, q, mp, qp, lv = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            m.append(parse_molecule(row["smiles"]))
            q.append(float(row["property"]))
            mp.append(parse_molecule(row["perturbed_smiles"]))
            qp.append(float(row["perturbed_property"]))
            lv.append(int(row["level"]))
    return PerturbationSet(m, np.array(q), mp, np.array(qp), np.array(lv, dtype=int))


Predictor = Callable[[Sequence[MolGraph]], np.ndarray]


def effect_score(predictor: Predictor, pset: PerturbationSet) -> dict[int, float]:
    """Per level: rmse(P, P') - rmse(Q, Q'), with P = f(M) and P' = f(M')."""
    P = np.asarray(predictor(pset.molecules), dtype=np.float64).ravel()
    Pp = np.asarray(predictor(pset.perturbed), dtype=np.float64).ravel()
    out = {}
    for level in sorted(set(int(v) for v in pset.levels)):
        sel = pset.levels == level
        out[level] = rmse(P[sel], Pp[sel]) - rmse(pset.properties[sel], pset.perturbed_properties[sel])
    return out


# --- interpretation ------------------------------------------------------


def scale_by_max_magnitude(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    top = np.max(np.abs(v)) if v.size else 0.0
    return v / top if top > 0 else np.zeros_like(v)


def atom_weights(g: MolGraph, params: EncoderParams) -> np.ndarray:
    """Per-atom scores in [-1, 1] from the encoder's last-layer node states.

    Each atom's state is averaged over hidden dimensions, then the molecule's
    scores are divided by their largest magnitude.  All-zero states give
    all-zero weights.
    """
    h = node_embeddings(batch_graphs([g], params), params).data
    return scale_by_max_magnitude(h.mean(axis=1))


def atom_weight_rows(g: MolGraph, weights) -> list[tuple[int, str, float]]:
    return [(i, a.element, float(w)) for i, (a, w) in enumerate(zip(g.atoms, weights))]
