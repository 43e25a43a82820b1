import numpy as np
import pytest

from corpus import random_molgraph
from molkd.chem_parse import AtomRecord, Bond, MolGraph, parse_molecule
from molkd.encoder import (
    ARCHITECTURES,
    _param_specs,
    encode_graph,
    encode_graphs,
    encode_molecule_set,
    init_encoder,
    normalized_adjacency,
    weight_shapes,
)
from molkd.errors import DimMismatch, EmptySet
from molkd.featurize import build_vocab, graph_features


def _ring(n, extra=()):
    atoms = tuple(AtomRecord.make("C") for _ in range(n))
    edges = {tuple(sorted((k, (k + 1) % n))) for k in range(n)} | set(extra)
    return MolGraph(atoms, tuple(Bond(i, j) for i, j in sorted(edges)))


def _encoder(arch, graphs, seed=0, **kw):
    v = build_vocab(graphs)
    return init_encoder(arch, v.total_dim, hidden_dim=kw.pop("hidden_dim", 16),
                        out_dim=kw.pop("out_dim", 8), seed=seed, vocab=v, **kw)


def test_isolated_atom_adjacency():
    np.testing.assert_array_equal(normalized_adjacency(parse_molecule("[Na+]")), [[1.0]])


def test_two_atom_adjacency():
    g = MolGraph((AtomRecord.make("C"), AtomRecord.make("C")), (Bond(0, 1),))
    np.testing.assert_allclose(normalized_adjacency(g), np.full((2, 2), 0.5), atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_adjacency_symmetric_and_contractive(seed):
    g = random_molgraph(np.random.default_rng(seed))
    A = normalized_adjacency(g)
    np.testing.assert_allclose(A, A.T, atol=1e-15)
    # power iteration for the spectral radius
    x = np.random.default_rng(seed).normal(size=A.shape[0])
    for _ in range(200):
        y = A @ x
        nrm = np.linalg.norm(y)
        if nrm == 0:
            break
        x = y / nrm
    assert np.linalg.norm(A @ x) <= 1.0 + 1e-9
    assert np.max(np.abs(np.linalg.eigvalsh(A))) <= 1.0 + 1e-9


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_zero_weights_zero_embedding(arch):
    g = parse_molecule("CCO")
    p = _encoder(arch, [g])
    for t in p.weights.values():
        t.data[...] = 0.0
    np.testing.assert_array_equal(encode_graph(g, p), 0.0)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_permutation_invariance(arch):
    rng = np.random.default_rng(11)
    graphs = [random_molgraph(rng) for _ in range(5)]
    p = _encoder(arch, graphs)
    for g in graphs:
        perm = list(rng.permutation(g.n_atoms))
        np.testing.assert_allclose(encode_graph(g.permute(perm), p), encode_graph(g, p), atol=1e-9)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_batch_consistency(arch):
    rng = np.random.default_rng(5)
    graphs = [random_molgraph(rng) for _ in range(6)]
    p = _encoder(arch, graphs)
    batched = encode_graphs(graphs, p)
    for row, g in zip(batched, graphs):
        np.testing.assert_allclose(row, encode_graph(g, p), atol=1e-10)


def test_tag_zero_hops_is_linear_map():
    g = parse_molecule("[Na+]")
    v = build_vocab([g])
    p = init_encoder("TAG", v.total_dim, hidden_dim=v.total_dim + 2, out_dim=v.total_dim + 2,
                     n_layers=1, hops=0, vocab=v)
    assert set(p.weights) == {"layer0.hop0", "layer0.bias"}
    p.weights["layer0.hop0"].data[...] = np.eye(v.total_dim, v.total_dim + 2)
    p.weights["layer0.bias"].data[...] = 0.0
    x = graph_features(g, v)[0]
    np.testing.assert_array_equal(encode_graph(g, p), np.concatenate([x, [0.0, 0.0]]))


def test_molecule_set_sum():
    g1, g2 = parse_molecule("CCO"), parse_molecule("O")
    p = _encoder("TAG", [g1, g2])
    np.testing.assert_array_equal(encode_molecule_set([g1], p), encode_graph(g1, p))
    np.testing.assert_allclose(encode_molecule_set([g1, g2], p), encode_graph(g1, p) + encode_graph(g2, p), atol=1e-12)
    np.testing.assert_allclose(encode_molecule_set([g2, g1], p), encode_molecule_set([g1, g2], p), atol=1e-12)
    with pytest.raises(EmptySet):
        encode_molecule_set([], p)


def test_gin_separates_cycle_from_complete_graph():
    c4 = _ring(4)
    k4 = _ring(4, extra=[(0, 2), (1, 3)])
    gin = _encoder("GIN", [c4, k4], seed=3)
    gcn = _encoder("GCN", [c4, k4], seed=3)
    assert np.linalg.norm(encode_graph(c4, gin) - encode_graph(k4, gin)) > 1e-3
    # symmetric normalization maps every regular graph's constant features to the same states
    np.testing.assert_allclose(encode_graph(c4, gcn), encode_graph(k4, gcn), atol=1e-12)


def test_gin_cannot_separate_two_triangles_from_hexagon():
    two_triangles = MolGraph(tuple(AtomRecord.make("C") for _ in range(6)),
                             tuple(Bond(i, j) for i, j in [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]))
    hexagon = _ring(6)
    p = _encoder("GIN", [hexagon], seed=1)
    # both are 2-regular, so 1-WL colour refinement and GIN agree on them
    np.testing.assert_allclose(encode_graph(two_triangles, p), encode_graph(hexagon, p), atol=1e-12)


def test_weight_shapes_and_seeded_init():
    shapes = weight_shapes("TAG", 10, 16, 8, n_layers=2, hops=3)
    assert shapes["layer0.hop3"] == (10, 16) and shapes["layer1.bias"] == (8,)
    a = init_encoder("GCN", 10, seed=4)
    b = init_encoder("GCN", 10, seed=4)
    for name, shape, fan_in in _param_specs("GCN", 10, 64, 64, 2, 3):
        w = a.weights[name].data
        assert w.shape == shape and w.tobytes() == b.weights[name].data.tobytes()
        assert np.all(np.abs(w) <= 1.0 / np.sqrt(fan_in))


def test_vocab_width_mismatch():
    g = parse_molecule("CC")
    v = build_vocab([g])
    p = init_encoder("TAG", v.total_dim + 1, vocab=v)
    with pytest.raises(DimMismatch):
        encode_graph(g, p)
