"""Message-passing graph encoders (TAG, GCN, GIN) with sum readout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from molkd import ndiff as nd
from molkd.chem_parse import MolGraph
from molkd.errors import DimMismatch, EmptySet
from molkd.featurize import FeatureVocab, graph_features
from molkd.ndiff import Tensor

ARCHITECTURES = ("TAG", "GCN", "GIN")


@dataclass
class EncoderParams:
    arch: str
    in_dim: int
    hidden_dim: int
    out_dim: int
    n_layers: int = 2
    hops: int = 3
    weights: dict[str, Tensor] = field(default_factory=dict)
    vocab: FeatureVocab | None = None

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_dim] * (self.n_layers - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def manifest(self) -> dict:
        return {"arch": self.arch, "in_dim": self.in_dim, "hidden_dim": self.hidden_dim,
                "out_dim": self.out_dim, "n_layers": self.n_layers, "hops": self.hops}

    def copy(self) -> "EncoderParams":
        w = {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.weights.items()}
        return EncoderParams(self.arch, self.in_dim, self.hidden_dim, self.out_dim,
                             self.n_layers, self.hops, w, self.vocab)


def _param_specs(arch: str, in_dim: int, hidden_dim: int, out_dim: int,
                 n_layers: int, hops: int) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) per parameter, in checkpoint order."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    if n_layers < 1:
        raise ValueError("need at least one layer")
    dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
    specs = []
    for l, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if arch == "TAG":
            specs += [(f"layer{l}.hop{k}", (a, b), a) for k in range(hops + 1)]
            specs.append((f"layer{l}.bias", (b,), a))
        elif arch == "GCN":
            specs += [(f"layer{l}.weight", (a, b), a), (f"layer{l}.bias", (b,), a)]
        else:
            specs += [(f"layer{l}.mlp0", (a, b), a), (f"layer{l}.bias0", (b,), a),
                      (f"layer{l}.mlp1", (b, b), b), (f"layer{l}.bias1", (b,), b)]
    return specs


def weight_shapes(arch: str, in_dim: int, hidden_dim: int, out_dim: int,
                  n_layers: int = 2, hops: int = 3) -> dict[str, tuple[int, ...]]:
    return {n: s for n, s, _ in _param_specs(arch, in_dim, hidden_dim, out_dim, n_layers, hops)}


def init_encoder(arch: str, in_dim: int, hidden_dim: int = 64, out_dim: int = 64,
                 n_layers: int = 2, hops: int = 3, seed: int = 0,
                 vocab: FeatureVocab | None = None) -> EncoderParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init from a seeded generator."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape, fan_in in _param_specs(arch, in_dim, hidden_dim, out_dim, n_layers, hops):
        bound = 1.0 / np.sqrt(fan_in)
        weights[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return EncoderParams(arch, in_dim, hidden_dim, out_dim, n_layers, hops, weights, vocab)


# --- adjacency -----------------------------------------------------------


def _adjacency(g: MolGraph) -> sp.csr_matrix:
    n = g.n_atoms
    if not g.bonds:
        return sp.csr_matrix((n, n))
    e = np.array(g.edge_index(), dtype=np.intp)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


def _normalize(A: sp.csr_matrix) -> sp.csr_matrix:
    A_tilde = (A + sp.identity(A.shape[0], format="csr")).tocoo()
    inv = 1.0 / np.sqrt(np.bincount(A_tilde.row, weights=A_tilde.data, minlength=A.shape[0]))
    data = A_tilde.data * inv[A_tilde.row] * inv[A_tilde.col]
    return sp.csr_matrix((data, (A_tilde.row, A_tilde.col)), shape=A.shape)


def normalized_adjacency(g: MolGraph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    return _normalize(_adjacency(g)).toarray()


# --- batching ------------------------------------------------------------


@dataclass
class PreparedGraph:
    features: np.ndarray
    propagate: sp.csr_matrix


def prepare_graph(g: MolGraph, vocab: FeatureVocab, arch: str, gin_eps: float = 0.0) -> PreparedGraph:
    x = graph_features(g, vocab)
    A = _adjacency(g)
    if arch == "GIN":
        prop = (A + (1.0 + gin_eps) * sp.identity(g.n_atoms, format="csr")).tocsr()
    else:
        prop = _normalize(A)
    return PreparedGraph(x, prop)


@dataclass
class GraphBatch:
    features: np.ndarray
    offsets: np.ndarray
    propagate: sp.csr_matrix
    pool: sp.csr_matrix

    @property
    def n_graphs(self) -> int:
        return len(self.offsets) - 1


def make_batch(items: Sequence[PreparedGraph]) -> GraphBatch:
    if not items:
        raise EmptySet("cannot batch zero graphs")
    sizes = [it.features.shape[0] for it in items]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp)
    X = np.concatenate([it.features for it in items], axis=0)
    P = sp.block_diag([it.propagate for it in items], format="csr")
    rows = np.repeat(np.arange(len(items)), sizes)
    pool = sp.csr_matrix((np.ones(offsets[-1]), (rows, np.arange(offsets[-1]))),
                         shape=(len(items), offsets[-1]))
    return GraphBatch(X, offsets, P, pool)


def batch_graphs(graphs: Sequence[MolGraph], params: EncoderParams) -> GraphBatch:
    vocab = _vocab(params)
    return make_batch([prepare_graph(g, vocab, params.arch) for g in graphs])


def _vocab(params: EncoderParams) -> FeatureVocab:
    if params.vocab is None:
        raise DimMismatch("encoder has no feature vocabulary attached")
    if params.vocab.total_dim != params.in_dim:
        raise DimMismatch(f"vocabulary width {params.vocab.total_dim} != encoder input {params.in_dim}")
    return params.vocab


# --- forward -------------------------------------------------------------


def node_embeddings(batch: GraphBatch, params: EncoderParams) -> Tensor:
    """Final-layer node states (N x out_dim) for every atom in the batch."""
    if batch.features.shape[1] != params.in_dim:
        raise DimMismatch(f"features have width {batch.features.shape[1]}, encoder expects {params.in_dim}")
    w = params.weights
    h = Tensor(batch.features)
    for l in range(params.n_layers):
        if params.arch == "TAG":
            hop = h
            out = nd.matmul(hop, w[f"layer{l}.hop0"])
            for k in range(1, params.hops + 1):
                hop = nd.spmm(batch.propagate, hop)
                out = out + nd.matmul(hop, w[f"layer{l}.hop{k}"])
            out = out + w[f"layer{l}.bias"]
        elif params.arch == "GCN":
            out = nd.spmm(batch.propagate, nd.matmul(h, w[f"layer{l}.weight"])) + w[f"layer{l}.bias"]
        else:
            agg = nd.spmm(batch.propagate, h)
            mid = nd.relu(nd.matmul(agg, w[f"layer{l}.mlp0"]) + w[f"layer{l}.bias0"])
            out = nd.matmul(mid, w[f"layer{l}.mlp1"]) + w[f"layer{l}.bias1"]
        h = nd.relu(out) if l < params.n_layers - 1 else out
    return h


def encode_batch(batch: GraphBatch, params: EncoderParams) -> Tensor:
    """Sum readout: one row per graph."""
    return nd.spmm(batch.pool, node_embeddings(batch, params))


def encode_graph(g: MolGraph, params: EncoderParams) -> np.ndarray:
    return encode_batch(batch_graphs([g], params), params).data[0].copy()


def encode_graphs(graphs: Sequence[MolGraph], params: EncoderParams) -> np.ndarray:
    return encode_batch(batch_graphs(graphs, params), params).data.copy()


def encode_molecule_set(graphs: Sequence[MolGraph], params: EncoderParams) -> np.ndarray:
    if not graphs:
        raise EmptySet("molecule set is empty")
    return encode_graphs(graphs, params).sum(axis=0)
