"""Synthetic fragment-combination reactions and property tasks for smoke runs.

Each fragment is a SMILES substituent attached through its first atom.
Four two-component templates combine them (ester, amide, ether, amine), so
held-out reactions reuse fragments seen in training in new combinations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from molkd.chem_parse import ReactionRecord, parse_reaction_line

FRAGMENTS = (
    "C", "CC", "CCC", "C(C)C", "CCCC", "C(C)(C)C", "C1CCCCC1", "C1CCCC1",
    "c1ccccc1", "c1ccc(C)cc1", "c1ccc(Cl)cc1", "c1ccc(F)cc1", "c1ccc(OC)cc1",
    "c1ccncc1", "Cc1ccccc1", "CC=C", "CC#N", "C(F)(F)F", "CCOC", "CCCl",
)

# name -> (reactant 1, reactant 2, product, symmetric)
TEMPLATES = {
    "ester": ("OC(=O){a}", "O{b}", "O({b})C(=O){a}", False),
    "amide": ("OC(=O){a}", "N{b}", "N({b})C(=O){a}", False),
    "ether": ("Br{a}", "O{b}", "O({b}){a}", True),
    "amine": ("Br{a}", "N{b}", "N({b}){a}", True),
}

# fragments whose presence makes the synthetic property positive
ACTIVE_FRAGMENTS = (10, 11, 17, 19)


@dataclass(frozen=True)
class SyntheticReaction:
    template: str
    a: int
    b: int
    yield_fraction: float

    def smiles(self) -> tuple[str, str, str]:
        r1, r2, p, _ = TEMPLATES[self.template]
        fa, fb = FRAGMENTS[self.a], FRAGMENTS[self.b]
        return r1.format(a=fa), r2.format(b=fb), p.format(a=fa, b=fb)

    def tsv_line(self) -> str:
        r1, r2, p = self.smiles()
        return f"{r1}.{r2}\t{p}\t{self.yield_fraction!r}"

    def record(self) -> ReactionRecord:
        return parse_reaction_line(self.tsv_line())


def all_combinations() -> list[tuple[str, int, int]]:
    n = len(FRAGMENTS)
    out = []
    for name, (_, _, _, symmetric) in TEMPLATES.items():
        for a in range(n):
            for b in range(n):
                if symmetric and a >= b:
                    continue
                out.append((name, a, b))
    return out


def synthetic_reactions(n: int = 300, seed: int = 0, low: float = 0.3,
                        high: float = 1.0) -> list[SyntheticReaction]:
    """``n`` distinct reactions with yields uniform in ``[low, high]``."""
    rng = np.random.default_rng(seed)
    combos = all_combinations()
    pick = rng.choice(len(combos), size=n, replace=False)
    yields = rng.uniform(low, high, size=n)
    return [SyntheticReaction(*combos[i], float(y)) for i, y in zip(pick, yields)]


def split_reactions(rxns, n_test: int = 60):
    return rxns[:-n_test], rxns[-n_test:]


def write_tsv(path, rxns) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# reactants\tproducts\tyield\n")
        for r in rxns:
            fh.write(r.tsv_line() + "\n")


def property_label(r: SyntheticReaction) -> int:
    return int(r.a in ACTIVE_FRAGMENTS or r.b in ACTIVE_FRAGMENTS)


def property_rows(rxns) -> list[tuple[str, int]]:
    """(product SMILES, binary label) per reaction."""
    return [(r.smiles()[2], property_label(r)) for r in rxns]
