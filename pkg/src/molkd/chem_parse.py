"""SMILES subset parser producing hydrogen-explicit molecular graphs.

Supported grammar:

* organic-subset atoms ``B C N O P S F Cl Br I`` and aromatic ``b c n o p s``
* bracket atoms ``[isotope? symbol chirality? Hn? charge? :class?]``
* bonds ``- = # :`` (``/`` and ``\\`` are read as single bonds)
* branches, ring closures ``0-9`` and ``%nn``, and ``.`` component separators

Stereo markers and isotopes are consumed and dropped.  No kekulization or
aromaticity perception happens: the aromatic flag is taken from the text.
Pyrrole-type nitrogens must be written ``[nH]``; a bare ``n`` never gets a
hydrogen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from molkd.errors import (
    BadColumnCount,
    EmptyInput,
    MalformedBracketAtom,
    MolKDError,
    SmilesError,
    UnbalancedParen,
    UnclosedRing,
    UnknownElement,
    YieldOutOfRange,
)

# integer-rounded standard atomic weights; doubles as the element table
MASS_BUCKET: dict[str, int] = {
    "H": 1, "Li": 7, "B": 11, "C": 12, "N": 14, "O": 16, "F": 19,
    "Na": 23, "Mg": 24, "Al": 27, "Si": 28, "P": 31, "S": 32, "Cl": 35,
    "K": 39, "Ca": 40, "Fe": 56, "Cu": 64, "Zn": 65, "As": 75, "Se": 79,
    "Br": 80, "Sn": 119, "I": 127,
}

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_SUBSET = ("b", "c", "n", "o", "p", "s")

# allowed valences, ascending
VALENCES: dict[str, tuple[int, ...]] = {
    "B": (3,), "C": (4,), "N": (3, 5), "O": (2,), "P": (3, 5),
    "S": (2, 4, 6), "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
BOND_ORDER = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}
_BOND_SYMBOL = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC,
                "/": SINGLE, "\\": SINGLE}
_KIND_SYMBOL = {SINGLE: "-", DOUBLE: "=", TRIPLE: "#", AROMATIC: ":"}


@dataclass(frozen=True)
class AtomRecord:
    element: str
    aromatic: bool = False
    mass_bucket: int = 0
    implicit_h: int = 0
    charge: int = 0
    class_id: int = 0
    # hydrogen count inferred or declared at parse time; survives explicitization
    parsed_h: int = 0

    @classmethod
    def make(cls, element: str, aromatic: bool = False, implicit_h: int = 0,
             charge: int = 0, class_id: int = 0) -> "AtomRecord":
        return cls(element, aromatic, MASS_BUCKET[element], implicit_h,
                   charge, class_id, implicit_h)


@dataclass(frozen=True)
class Bond:
    i: int
    j: int
    kind: str = SINGLE

    @property
    def order(self) -> float:
        return BOND_ORDER[self.kind]


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[AtomRecord, ...]
    bonds: tuple[Bond, ...] = ()
    source: str = ""

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def edge_index(self) -> list[tuple[int, int]]:
        return [(b.i, b.j) for b in self.bonds]

    def neighbors(self) -> list[list[tuple[int, Bond]]]:
        adj: list[list[tuple[int, Bond]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.i].append((b.j, b))
            adj[b.j].append((b.i, b))
        return adj

    def permute(self, perm: list[int]) -> "MolGraph":
        """Relabel atoms so that old atom ``perm[k]`` becomes new atom ``k``."""
        inverse = {old: new for new, old in enumerate(perm)}
        atoms = tuple(self.atoms[old] for old in perm)
        bonds = tuple(_bond(inverse[b.i], inverse[b.j], b.kind) for b in self.bonds)
        return MolGraph(atoms, bonds, self.source)


@dataclass
class ReactionRecord:
    reactants: list[MolGraph]
    products: list[MolGraph]
    yield_fraction: float


def _bond(i: int, j: int, kind: str) -> Bond:
    return Bond(min(i, j), max(i, j), kind)


def _offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


@dataclass
class _State:
    atoms: list[dict] = field(default_factory=list)
    bonds: dict[tuple[int, int], str] = field(default_factory=dict)
    rings: dict[int, tuple[int, str | None, int]] = field(default_factory=dict)
    branches: list[tuple[int, int]] = field(default_factory=list)
    prev: int | None = None
    pending: str | None = None
    pending_pos: int = 0


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.st = _State()

    def fail(self, cls: type[SmilesError], msg: str, pos: int | None = None):
        p = self.pos if pos is None else pos
        raise cls(msg, self.text, _offset(self.text, p))

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def run(self) -> MolGraph:
        text = self.text
        if not text or not text.strip():
            raise EmptyInput("empty SMILES", text, 0)
        st = self.st
        while self.pos < len(text):
            ch = text[self.pos]
            if ch == "(":
                if st.prev is None:
                    self.fail(UnbalancedParen, "branch without a parent atom")
                st.branches.append((st.prev, self.pos))
                self.pos += 1
            elif ch == ")":
                if not st.branches:
                    self.fail(UnbalancedParen, "unmatched ')'")
                if st.pending is not None:
                    self.fail(SmilesError, "bond symbol without a following atom", st.pending_pos)
                st.prev = st.branches.pop()[0]
                self.pos += 1
            elif ch in _BOND_SYMBOL:
                if st.pending is not None or st.prev is None:
                    self.fail(SmilesError, f"unexpected bond symbol {ch!r}")
                st.pending = _BOND_SYMBOL[ch]
                st.pending_pos = self.pos
                self.pos += 1
            elif ch == ".":
                if st.pending is not None:
                    self.fail(SmilesError, "bond symbol before '.'", st.pending_pos)
                if st.branches:
                    self.fail(UnbalancedParen, "'.' inside an open branch")
                st.prev = None
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                self.ring_closure()
            elif ch == "[":
                self.add_atom(self.bracket_atom())
            else:
                self.add_atom(self.organic_atom())
        if st.pending is not None:
            self.fail(SmilesError, "dangling bond symbol", st.pending_pos)
        if st.branches:
            self.fail(UnbalancedParen, "unclosed '('", st.branches[-1][1])
        if st.rings:
            num, (_, _, pos) = min(st.rings.items(), key=lambda kv: kv[1][2])
            self.fail(UnclosedRing, f"ring bond {num} never closed", pos)
        return self.finish()

    def organic_atom(self) -> dict:
        start = self.pos
        two = self.text[self.pos:self.pos + 2]
        if two in ("Cl", "Br"):
            sym = two
        else:
            sym = self.text[self.pos]
        if sym in ORGANIC_SUBSET:
            self.pos += len(sym)
            return {"element": sym, "aromatic": False, "h": None,
                    "charge": 0, "class_id": 0, "pos": start}
        if sym in AROMATIC_SUBSET:
            self.pos += 1
            return {"element": sym.upper(), "aromatic": True, "h": None,
                    "charge": 0, "class_id": 0, "pos": start}
        self.fail(UnknownElement, f"unknown atom symbol {sym!r}")

    def bracket_atom(self) -> dict:
        text = self.text
        start = self.pos
        end = text.find("]", start)
        if end < 0:
            self.fail(MalformedBracketAtom, "unterminated bracket atom")
        body = text[start + 1:end]
        i = 0

        def bad(msg: str):
            self.fail(MalformedBracketAtom, msg, start + 1 + i)

        while i < len(body) and body[i].isdigit():  # isotope, discarded
            i += 1
        if i >= len(body):
            bad("missing element symbol")
        aromatic = False
        two = body[i:i + 2]
        if len(two) == 2 and two[0].isupper() and two[1].islower() and two in MASS_BUCKET:
            sym = two
        elif body[i].isupper():
            sym = body[i]
        elif body[i] in AROMATIC_SUBSET:
            sym = body[i].upper()
            aromatic = True
        else:
            self.fail(UnknownElement, f"unknown element in {body!r}", start + 1 + i)
        if sym not in MASS_BUCKET:
            self.fail(UnknownElement, f"unknown element {sym!r}", start + 1 + i)
        i += len(sym)
        if body[i:i + 2] == "@@":
            i += 2
        elif body[i:i + 1] == "@":
            i += 1
        h = 0
        if body[i:i + 1] == "H":
            i += 1
            h = 1
            if i < len(body) and body[i].isdigit():
                h = int(body[i])
                i += 1
        charge = 0
        if i < len(body) and body[i] in "+-":
            sign = 1 if body[i] == "+" else -1
            i += 1
            if i < len(body) and body[i].isdigit():
                j = i
                while j < len(body) and body[j].isdigit():
                    j += 1
                charge = sign * int(body[i:j])
                i = j
            else:
                charge = sign
                while i < len(body) and body[i] == body[i - 1]:
                    charge += sign
                    i += 1
        class_id = 0
        if i < len(body) and body[i] == ":":
            i += 1
            j = i
            while j < len(body) and body[j].isdigit():
                j += 1
            if j == i:
                bad("atom class needs digits")
            class_id = int(body[i:j])
            i = j
        if i != len(body):
            bad(f"unexpected {body[i]!r} in bracket atom")
        self.pos = end + 1
        return {"element": sym, "aromatic": aromatic, "h": h,
                "charge": charge, "class_id": class_id, "pos": start}

    def add_atom(self, atom: dict) -> None:
        st = self.st
        idx = len(st.atoms)
        st.atoms.append(atom)
        if st.prev is not None:
            kind = st.pending or self.default_kind(st.prev, idx)
            self.connect(st.prev, idx, kind, atom["pos"])
        st.prev = idx
        st.pending = None

    def default_kind(self, a: int, b: int) -> str:
        atoms = self.st.atoms
        return AROMATIC if atoms[a]["aromatic"] and atoms[b]["aromatic"] else SINGLE

    def connect(self, a: int, b: int, kind: str, pos: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            self.fail(SmilesError, "ring closure onto the same atom", pos)
        if key in self.st.bonds:
            self.fail(SmilesError, "duplicate bond between the same atoms", pos)
        self.st.bonds[key] = kind

    def ring_closure(self) -> None:
        st = self.st
        start = self.pos
        if self.text[self.pos] == "%":
            digits = self.text[self.pos + 1:self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                self.fail(SmilesError, "'%' must be followed by two digits")
            num = int(digits)
            self.pos += 3
        else:
            num = int(self.text[self.pos])
            self.pos += 1
        if st.prev is None:
            self.fail(SmilesError, "ring bond without an atom", start)
        if num in st.rings:
            other, kind, _ = st.rings.pop(num)
            here = st.pending
            if kind and here and kind != here:
                self.fail(SmilesError, "conflicting ring bond symbols", start)
            kind = kind or here or self.default_kind(other, st.prev)
            self.connect(other, st.prev, kind, start)
        else:
            st.rings[num] = (st.prev, st.pending, start)
        st.pending = None

    def finish(self) -> MolGraph:
        st = self.st
        order = [0.0] * len(st.atoms)
        for (a, b), kind in st.bonds.items():
            order[a] += BOND_ORDER[kind]
            order[b] += BOND_ORDER[kind]
        atoms = []
        for k, a in enumerate(st.atoms):
            h = a["h"] if a["h"] is not None else _implicit_h(a["element"], order[k])
            atoms.append(AtomRecord.make(a["element"], a["aromatic"], h,
                                         a["charge"], a["class_id"]))
        bonds = tuple(Bond(a, b, kind) for (a, b), kind in sorted(st.bonds.items()))
        return MolGraph(tuple(atoms), bonds, self.text)


def _implicit_h(element: str, bond_sum: float) -> int:
    used = math.ceil(bond_sum - 1e-9)
    for v in VALENCES[element]:
        if v >= used:
            return v - used
    return 0


def parse_smiles(s: str) -> MolGraph:
    """Parse ``s`` into a MolGraph with implicit hydrogen counts filled in.

    >>> parse_smiles("O").atoms[0].implicit_h
    2
    """
    return _Parser(s).run()


def explicit_hydrogens(g: MolGraph) -> MolGraph:
    """Turn implicit hydrogen counts into H nodes appended after the original atoms."""
    if all(a.implicit_h == 0 for a in g.atoms):
        return g
    atoms = [replace(a, implicit_h=0) for a in g.atoms]
    bonds = list(g.bonds)
    h_atom = AtomRecord.make("H")
    for parent, a in enumerate(g.atoms):
        for _ in range(a.implicit_h):
            bonds.append(Bond(parent, len(atoms), SINGLE))
            atoms.append(h_atom)
    return MolGraph(tuple(atoms), tuple(bonds), g.source)


def parse_molecule(s: str) -> MolGraph:
    """Parse and explicitize hydrogens in one step."""
    return explicit_hydrogens(parse_smiles(s))


# --- serialization -------------------------------------------------------


def _atom_text(a: AtomRecord) -> str:
    sym = a.element.lower() if a.aromatic else a.element
    out = "[" + sym
    if a.implicit_h:
        out += "H" if a.implicit_h == 1 else f"H{a.implicit_h}"
    if a.charge:
        sign = "+" if a.charge > 0 else "-"
        out += sign if abs(a.charge) == 1 else f"{sign}{abs(a.charge)}"
    if a.class_id:
        out += f":{a.class_id}"
    return out + "]"


def to_smiles(g: MolGraph) -> str:
    """Write ``g`` as SMILES using bracket atoms only.

    Every atom carries its hydrogen count explicitly, so reparsing gives back
    an isomorphic graph with the same per-atom records.
    """
    if not g.atoms:
        return ""
    adj = g.neighbors()
    for row in adj:
        row.sort(key=lambda nb: nb[0])
    seen = [False] * g.n_atoms
    parts: list[str] = []

    def bond_text(a: int, b: Bond) -> str:
        default = AROMATIC if g.atoms[b.i].aromatic and g.atoms[b.j].aromatic else SINGLE
        return "" if b.kind == default else _KIND_SYMBOL[b.kind]

    for root in range(g.n_atoms):
        if seen[root]:
            continue
        # first pass: spanning tree, collect ring (non-tree) edges
        parent: dict[int, int] = {root: -1}
        order: list[int] = []
        children: dict[int, list[tuple[int, Bond]]] = {}
        tree_edges: set[tuple[int, int]] = set()
        stack = [root]
        visiting = [False] * g.n_atoms
        while stack:
            u = stack.pop()
            if visiting[u]:
                continue
            visiting[u] = True
            seen[u] = True
            order.append(u)
            if parent[u] >= 0:
                tree_edges.add((min(u, parent[u]), max(u, parent[u])))
            for v, _ in reversed(adj[u]):
                if not visiting[v]:
                    parent[v] = u
                    stack.append(v)
        rank = {u: k for k, u in enumerate(order)}
        for u in order:
            children[u] = [(v, b) for v, b in adj[u]
                           if parent.get(v) == u and (min(u, v), max(u, v)) in tree_edges]
            children[u].sort(key=lambda nb: rank[nb[0]])
        ring_edges = [b for b in g.bonds
                      if b.i in rank and (b.i, b.j) not in tree_edges]
        # ring label events per atom: opened at the earlier atom, closed at the later
        opens: dict[int, list[Bond]] = {}
        closes: dict[int, list[Bond]] = {}
        for b in ring_edges:
            first, second = sorted((b.i, b.j), key=lambda x: rank[x])
            opens.setdefault(first, []).append(b)
            closes.setdefault(second, []).append(b)
        free: list[int] = []
        next_label = 1
        label_of: dict[tuple[int, int], int] = {}

        def ring_label(n: int) -> str:
            return str(n) if n < 10 else f"%{n:02d}"

        out: list[str] = []

        def emit(u: int) -> None:
            nonlocal next_label
            out.append(_atom_text(g.atoms[u]))
            for b in closes.get(u, []):
                n = label_of.pop((b.i, b.j))
                out.append(bond_text(u, b) + ring_label(n))
                free.append(n)
                free.sort()
            for b in opens.get(u, []):
                if free:
                    n = free.pop(0)
                else:
                    n = next_label
                    next_label += 1
                label_of[(b.i, b.j)] = n
                out.append(bond_text(u, b) + ring_label(n))
            kids = children[u]
            for k, (v, b) in enumerate(kids):
                last = k == len(kids) - 1
                if not last:
                    out.append("(")
                out.append(bond_text(u, b))
                emit(v)
                if not last:
                    out.append(")")

        emit(root)
        parts.append("".join(out))
    return ".".join(parts)


# --- reactions -----------------------------------------------------------


def parse_reaction_line(line: str) -> ReactionRecord:
    """Parse one ``reactants<TAB>products<TAB>yield`` row."""
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != 3:
        raise BadColumnCount(f"expected 3 tab-separated columns, got {len(cols)}")
    reac, prod, y = cols
    try:
        yv = float(y)
    except ValueError as exc:
        raise YieldOutOfRange(f"yield {y!r} is not a number") from exc
    if not (0.0 <= yv <= 1.0):
        raise YieldOutOfRange(f"yield {yv} outside [0, 1]")
    return ReactionRecord(_components(reac), _components(prod), yv)


def _components(col: str) -> list[MolGraph]:
    if not col.strip():
        raise EmptyInput("empty molecule column", col, 0)
    return [parse_molecule(s) for s in col.strip().split(".")]


def iter_reaction_lines(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, line


def load_reactions(path) -> list[ReactionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in iter_reaction_lines(fh):
            try:
                out.append(parse_reaction_line(line))
            except MolKDError as exc:
                exc.args = (f"{path}:{lineno}: {exc}",)
                raise
    return out
