"""Yield-scaled margin pre-training on reactions and product-ranking evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from molkd import ndiff as nd
from molkd.chem_parse import MolGraph, ReactionRecord, to_smiles
from molkd.encoder import EncoderParams, encode_batch, init_encoder, make_batch, prepare_graph
from molkd.errors import (
    BatchTooSmall,
    ConfigError,
    DimMismatch,
    EmptyCandidates,
    EmptyDataset,
    EmptyMetricInput,
)
from molkd.featurize import FeatureVocab, build_vocab
from molkd.ndiff import Adam, Tape, Tensor

log = logging.getLogger(__name__)

HIT_KS = (1, 3, 5, 10)


@dataclass
class PretrainConfig:
    margin: float = 6.0
    alpha: float = 2.0
    batch_size: int = 32
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dim: int = 64
    hidden_dim: int = 64
    arch: str = "TAG"
    n_layers: int = 2
    hops: int = 3
    seed: int = 0

    def validate(self) -> "PretrainConfig":
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if not self.alpha >= 0:
            raise ConfigError("alpha must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        return self

    @classmethod
    def full_scale(cls, **overrides) -> "PretrainConfig":
        """Full-size settings (2,048-d, batch 4,094, 20 epochs, lr 1e-4)."""
        base = dict(dim=2048, hidden_dim=2048, batch_size=4094, epochs=20, lr=1e-4)
        base.update(overrides)
        return cls(**base)


# --- scores and losses ---------------------------------------------------


def reaction_score(R, P) -> float:
    """L2 distance between a reactant embedding sum and a product embedding sum."""
    R = np.asarray(R, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if R.shape != P.shape:
        raise DimMismatch(f"score needs equal shapes, got {R.shape} and {P.shape}")
    return float(np.sqrt(((R - P) ** 2).sum()))


def yield_margins(yields, margin: float, alpha: float) -> np.ndarray:
    # 0 ** 0 == 1, so alpha = 0 gives the plain margin for every reaction
    return np.power(np.asarray(yields, dtype=np.float64), alpha) * margin


def gtranse_loss(R: Tensor, P: Tensor, yields, margin: float = 6.0, alpha: float = 2.0) -> Tensor:
    """Mean hinge over ordered pairs i != j, corrupting only the products.

    ``R`` and ``P`` are B x d reactant-sum and product-sum embeddings.
    """
    R, P = nd.tensor(R), nd.tensor(P)
    if R.shape != P.shape or R.data.ndim != 2:
        raise DimMismatch(f"expected matching B x d inputs, got {R.shape} and {P.shape}")
    B, d = R.shape
    if B < 2:
        raise BatchTooSmall("the margin loss needs at least two reactions per batch")
    dist = nd.norm(nd.reshape(R, (B, 1, d)) - nd.reshape(P, (1, B, d)), axis=2)
    pos = nd.diagonal(dist)
    m = yield_margins(yields, margin, alpha)
    arg = nd.reshape(pos + m, (B, 1)) - dist
    off_diag = 1.0 - np.eye(B)
    hinge = nd.relu(arg) * off_diag
    return nd.reduce_sum(hinge) * (1.0 / (B * (B - 1)))


# --- batched reaction encoding ------------------------------------------


def molecule_key(g: MolGraph) -> str:
    """Dedup key: the serialized SMILES of the parsed graph."""
    return to_smiles(g)


class ReactionEncoderCache:
    """Featurized graphs keyed by molecule, so a batch encodes each molecule once."""

    def __init__(self, vocab: FeatureVocab, arch: str):
        self.vocab = vocab
        self.arch = arch
        self._prepared: dict[str, object] = {}
        # id -> (graph, key); holding the graph keeps its id from being reused
        self._keys: dict[int, tuple[MolGraph, str]] = {}

    def key(self, g: MolGraph) -> str:
        hit = self._keys.get(id(g))
        if hit is not None and hit[0] is g:
            return hit[1]
        k = molecule_key(g)
        self._keys[id(g)] = (g, k)
        if k not in self._prepared:
            self._prepared[k] = prepare_graph(g, self.vocab, self.arch)
        return k

    def side_sums(self, reactions: Sequence[ReactionRecord], params: EncoderParams) -> tuple[Tensor, Tensor]:
        """(reactant sums, product sums) as B x d tensors on the active tape."""
        order: dict[str, int] = {}

        def index(g):
            k = self.key(g)
            if k not in order:
                order[k] = len(order)
            return order[k]

        r_idx = [[index(g) for g in rx.reactants] for rx in reactions]
        p_idx = [[index(g) for g in rx.products] for rx in reactions]
        batch = make_batch([self._prepared[k] for k in order])
        emb = encode_batch(batch, params)
        return nd.spmm(_membership(r_idx, len(order)), emb), nd.spmm(_membership(p_idx, len(order)), emb)

    def embed(self, graphs: Sequence[MolGraph], params: EncoderParams) -> np.ndarray:
        keys = [self.key(g) for g in graphs]
        uniq = list(dict.fromkeys(keys))
        emb = encode_batch(make_batch([self._prepared[k] for k in uniq]), params).data
        pos = {k: i for i, k in enumerate(uniq)}
        return emb[[pos[k] for k in keys]]


def _membership(groups: list[list[int]], n: int) -> sp.csr_matrix:
    rows = [r for r, g in enumerate(groups) for _ in g]
    cols = [c for g in groups for c in g]
    return sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(len(groups), n))


def gtranse_batch_loss(batch: Sequence[ReactionRecord], params: EncoderParams,
                       cfg: PretrainConfig, cache: ReactionEncoderCache | None = None) -> Tensor:
    if len(batch) < 2:
        raise BatchTooSmall("the margin loss needs at least two reactions per batch")
    cache = cache or ReactionEncoderCache(params.vocab, params.arch)
    R, P = cache.side_sums(batch, params)
    return gtranse_loss(R, P, [rx.yield_fraction for rx in batch], cfg.margin, cfg.alpha)


# --- training ------------------------------------------------------------


@dataclass
class PretrainResult:
    params: EncoderParams
    epoch_losses: list[float] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [f"{e + 1}\t{loss!r}" for e, loss in enumerate(self.epoch_losses)]


def reaction_vocab(dataset: Sequence[ReactionRecord]) -> FeatureVocab:
    return build_vocab([g for rx in dataset for g in (*rx.reactants, *rx.products)], unk=True)


def init_teacher(cfg: PretrainConfig, vocab: FeatureVocab) -> EncoderParams:
    return init_encoder(cfg.arch, vocab.total_dim, cfg.hidden_dim, cfg.dim,
                        cfg.n_layers, cfg.hops, seed=cfg.seed, vocab=vocab)


def run_pretrain(dataset: Sequence[ReactionRecord], cfg: PretrainConfig,
                 vocab: FeatureVocab | None = None,
                 on_epoch: Callable[[int, float], None] | None = None) -> PretrainResult:
    """Train a teacher encoder with Adam over seeded, reshuffled minibatches.

    A trailing minibatch with fewer than two reactions is dropped.
    """
    cfg.validate()
    if not dataset:
        raise EmptyDataset("no reactions to pre-train on")
    vocab = vocab or reaction_vocab(dataset)
    params = init_teacher(cfg, vocab)
    cache = ReactionEncoderCache(vocab, cfg.arch)
    opt = Adam(params.tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    # the shuffle stream is separate from the init stream
    rng = np.random.default_rng([cfg.seed, 1])
    result = PretrainResult(params)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            with Tape() as tape:
                loss = gtranse_batch_loss([dataset[i] for i in idx], params, cfg, cache)
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        mean = float(np.mean(losses)) if losses else float("nan")
        result.epoch_losses.append(mean)
        log.debug("epoch %d loss %.6f", epoch + 1, mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean)
    return result


# --- ranking -------------------------------------------------------------


@dataclass
class RankingResult:
    ranks: list[int]
    mrr: float
    mr: float
    hits: dict[int, float]

    def to_json(self) -> dict:
        out = {"MRR": self.mrr, "MR": self.mr, "n_queries": len(self.ranks)}
        out.update({f"Hit@{k}": v for k, v in self.hits.items()})
        return out


def pessimistic_rank(distances, target: int) -> int:
    """1 + #closer candidates + #other candidates tied with the target."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise EmptyCandidates("no candidates to rank")
    t = d[target]
    return int(1 + np.sum(d < t) + (np.sum(d == t) - 1))


def rank_products(reactant_graphs: Sequence[MolGraph], candidate_products: Sequence[Sequence[MolGraph] | MolGraph],
                  target_index: int, params: EncoderParams) -> int:
    """Rank of the true product among candidates by L2 distance to the reactant sum."""
    if not candidate_products:
        raise EmptyCandidates("no candidate products")
    if not 0 <= target_index < len(candidate_products):
        raise IndexError(f"target index {target_index} out of range")
    cache = ReactionEncoderCache(params.vocab, params.arch)
    h_r = cache.embed(list(reactant_graphs), params).sum(axis=0)
    cands = [[c] if isinstance(c, MolGraph) else list(c) for c in candidate_products]
    flat = [g for c in cands for g in c]
    emb = cache.embed(flat, params)
    sums, k = [], 0
    for c in cands:
        sums.append(emb[k:k + len(c)].sum(axis=0))
        k += len(c)
    return pessimistic_rank(np.linalg.norm(np.asarray(sums) - h_r, axis=1), target_index)


def ranking_metrics(ranks: Sequence[int]) -> RankingResult:
    if len(ranks) == 0:
        raise EmptyMetricInput("no ranks given")
    r = np.asarray(ranks, dtype=np.float64)
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    hits = {k: float(np.mean(r <= k)) for k in HIT_KS}
    return RankingResult([int(x) for x in ranks], float(np.mean(1.0 / r)), float(np.mean(r)), hits)


def product_key(rx: ReactionRecord) -> str:
    return ".".join(molecule_key(g) for g in rx.products)


def candidate_pool(reactions: Sequence[ReactionRecord]) -> tuple[list[list[MolGraph]], list[int]]:
    """Deduplicated product sets and, per reaction, the index of its own products."""
    pool: list[list[MolGraph]] = []
    where: dict[str, int] = {}
    targets = []
    for rx in reactions:
        k = product_key(rx)
        if k not in where:
            where[k] = len(pool)
            pool.append(rx.products)
        targets.append(where[k])
    return pool, targets


Embedder = Callable[[Sequence[MolGraph]], np.ndarray]


def evaluate_ranking(reactions: Sequence[ReactionRecord], embed: Embedder) -> RankingResult:
    """Rank every reaction's products among the deduplicated product pool.

    ``embed`` maps a list of graphs to a matrix of embeddings; tests inject
    hand-set embeddings through it.
    """
    if not reactions:
        raise EmptyDataset("no reactions to evaluate")
    pool, targets = candidate_pool(reactions)
    pool_emb = np.stack([embed(c).sum(axis=0) for c in pool])
    ranks = []
    for rx, t in zip(reactions, targets):
        h_r = embed(rx.reactants).sum(axis=0)
        ranks.append(pessimistic_rank(np.linalg.norm(pool_emb - h_r, axis=1), t))
    return ranking_metrics(ranks)


def encoder_embedder(params: EncoderParams) -> Embedder:
    cache = ReactionEncoderCache(params.vocab, params.arch)
    memo: dict[str, np.ndarray] = {}

    def embed(graphs: Sequence[MolGraph]) -> np.ndarray:
        keys = [cache.key(g) for g in graphs]
        missing = [g for g, k in zip(graphs, keys) if k not in memo]
        if missing:
            for g, e in zip(missing, cache.embed(missing, params)):
                memo[cache.key(g)] = e
        return np.stack([memo[k] for k in keys])

    return embed


# --- retrieval -----------------------------------------------------------


def cosine_distances(query, refs) -> np.ndarray:
    """1 - cos(query, ref) per reference row; a zero vector is at distance 1."""
    q = np.asarray(query, dtype=np.float64)
    R = np.atleast_2d(np.asarray(refs, dtype=np.float64))
    nq = np.linalg.norm(q)
    nr = np.linalg.norm(R, axis=1)
    denom = nq * nr
    cos = np.divide(R @ q, denom, out=np.zeros(len(R)), where=denom > 0)
    return 1.0 - cos


def nearest_embeddings(query, refs, k: int) -> list[tuple[int, float]]:
    d = cosine_distances(query, refs)
    # stable sort keeps reference order among ties
    order = np.argsort(d, kind="stable")[:k]
    return [(int(i), float(d[i])) for i in order]


def nearest_molecules(query: MolGraph, references: Sequence[MolGraph], k: int,
                      params: EncoderParams) -> list[tuple[int, float]]:
    if not references:
        raise EmptyCandidates("no reference molecules")
    embed = encoder_embedder(params)
    return nearest_embeddings(embed([query])[0], embed(list(references)), k)


def config_dict(cfg: PretrainConfig) -> dict:
    return asdict(cfg)
