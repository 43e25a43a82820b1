import numpy as np
import pytest

from oracles import gtranse_naive, pessimistic_rank_naive, random_batch
from molkd.chem_parse import parse_reaction_line
from molkd.encoder import encode_graphs
from molkd.errors import BatchTooSmall, ConfigError, EmptyCandidates, EmptyDataset, EmptyMetricInput
from molkd.ndiff import Tensor, grad_check
from molkd.pretrain import (
    PretrainConfig,
    ReactionEncoderCache,
    cosine_distances,
    encoder_embedder,
    evaluate_ranking,
    gtranse_batch_loss,
    gtranse_loss,
    init_teacher,
    nearest_embeddings,
    pessimistic_rank,
    rank_products,
    ranking_metrics,
    reaction_score,
    reaction_vocab,
    run_pretrain,
)
from molkd.synthetic import synthetic_reactions


def test_score_identities():
    assert reaction_score([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert reaction_score([0.0, 0.0], [3.0, 4.0]) == 5.0


def test_hinge_floor():
    R = np.array([[0.0], [100.0]])
    assert gtranse_loss(Tensor(R), Tensor(R.copy()), [1.0, 1.0], 6.0, 2.0).item() == 0.0


def test_one_dimensional_example():
    R = np.array([[0.0], [5.0]])
    P = np.array([[0.0], [5.0]])
    assert gtranse_loss(Tensor(R), Tensor(P), [1.0, 0.5], 6.0, 1.0).item() == 0.5


def test_alpha_zero_ignores_yield():
    rng = np.random.default_rng(0)
    R, P = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    a = gtranse_loss(Tensor(R), Tensor(P), rng.uniform(size=5), 6.0, 0.0).item()
    b = gtranse_loss(Tensor(R), Tensor(P), np.ones(5), 6.0, 1.0).item()
    assert a == pytest.approx(b, abs=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_loss_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    _, _, R, P, y = random_batch(rng)
    got = gtranse_loss(Tensor(R), Tensor(P), y, 6.0, 2.0).item()
    assert abs(got - gtranse_naive(R.tolist(), P.tolist(), y.tolist(), 6.0, 2.0)) < 1e-12


def test_batch_too_small():
    with pytest.raises(BatchTooSmall):
        gtranse_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), [1.0])


def test_loss_gradient():
    rng = np.random.default_rng(1)
    R, P, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.uniform(size=4)
    res = grad_check(lambda t: gtranse_loss(t, Tensor(P), y, 1.0, 2.0), R)
    assert res.checked > 0 and res.max_error < 1e-4


@pytest.fixture(scope="module")
def reactions():
    return [r.record() for r in synthetic_reactions(12, seed=2)]


def test_batch_loss_uses_encoder_sums(reactions):
    cfg = PretrainConfig(dim=8, hidden_dim=8)
    params = init_teacher(cfg, reaction_vocab(reactions))
    batch = reactions[:5]
    R = np.array([encode_graphs(rx.reactants, params).sum(0) for rx in batch])
    P = np.array([encode_graphs(rx.products, params).sum(0) for rx in batch])
    y = [rx.yield_fraction for rx in batch]
    got = gtranse_batch_loss(batch, params, cfg).item()
    assert abs(got - gtranse_naive(R.tolist(), P.tolist(), y, cfg.margin, cfg.alpha)) < 1e-12
    cache = ReactionEncoderCache(params.vocab, params.arch)
    assert gtranse_batch_loss(batch, params, cfg, cache).item() == got


def test_zero_epochs_returns_init(reactions):
    cfg = PretrainConfig(epochs=0, dim=8, hidden_dim=8, seed=3)
    res = run_pretrain(reactions, cfg)
    fresh = init_teacher(cfg, reaction_vocab(reactions))
    assert res.epoch_losses == []
    for k, t in fresh.weights.items():
        assert t.data.tobytes() == res.params.weights[k].data.tobytes()


def test_pretrain_deterministic_and_decreasing(reactions):
    cfg = PretrainConfig(epochs=15, dim=16, hidden_dim=16, batch_size=6, lr=1e-2, seed=4)
    a, b = run_pretrain(reactions, cfg), run_pretrain(reactions, cfg)
    assert a.log_lines() == b.log_lines()
    assert a.epoch_losses[-1] < a.epoch_losses[0]


def test_pretrain_rejects_bad_config(reactions):
    with pytest.raises(ConfigError):
        run_pretrain(reactions, PretrainConfig(batch_size=1))
    with pytest.raises(EmptyDataset):
        run_pretrain([], PretrainConfig())


def test_pessimistic_rank_examples():
    assert pessimistic_rank([0.5, 1.0, 2.0], 0) == 1
    assert pessimistic_rank([0.5, 0.5, 2.0], 0) == 2
    assert pessimistic_rank([0.5, 0.5, 2.0], 1) == 2
    with pytest.raises(EmptyCandidates):
        pessimistic_rank([], 0)


@pytest.mark.parametrize("seed", range(10))
def test_pessimistic_rank_oracle(seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 4, size=10).astype(float)
    t = int(rng.integers(10))
    assert pessimistic_rank(d, t) == pessimistic_rank_naive(d.tolist(), t)


def test_rank_products_against_embeddings(reactions):
    params = init_teacher(PretrainConfig(dim=8, hidden_dim=8), reaction_vocab(reactions))
    rx = reactions[0]
    cands = [r.products for r in reactions[:6]]
    h = encode_graphs(rx.reactants, params).sum(0)
    d = [np.linalg.norm(encode_graphs(c, params).sum(0) - h) for c in cands]
    assert rank_products(rx.reactants, cands, 0, params) == pessimistic_rank_naive(d, 0)


def test_ranking_metrics_examples():
    r = ranking_metrics([1, 1, 1])
    assert (r.mrr, r.mr) == (1.0, 1.0) and all(v == 1.0 for v in r.hits.values())
    r = ranking_metrics([1, 2, 4])
    assert abs(r.mrr - 7 / 12) < 1e-12 and abs(r.mr - 7 / 3) < 1e-12
    assert [r.hits[k] for k in (1, 3, 5, 10)] == pytest.approx([1 / 3, 2 / 3, 1.0, 1.0], abs=1e-12)
    with pytest.raises(EmptyMetricInput):
        ranking_metrics([])


def test_evaluate_ranking_with_injected_embeddings():
    lines = ["C\tN\t1.0", "O\tS\t1.0", "F\tCl\t1.0"]
    rxns = [parse_reaction_line(s) for s in lines]
    table = {"C": [0.0], "N": [1.0], "O": [10.0], "S": [10.5], "F": [20.0], "Cl": [11.0]}

    def embed(graphs):
        return np.array([table[g.atoms[0].element] for g in graphs])

    res = evaluate_ranking(rxns, embed)
    # distances: C -> N 1, S 10.5, Cl 11 -> rank 1; O -> S .5, Cl 1, N 9 -> rank 1;
    # F -> Cl 9, S 9.5, N 19 -> rank 1
    assert res.ranks == [1, 1, 1]
    table["Cl"] = [30.0]
    res = evaluate_ranking(rxns, embed)
    # F -> S 9.5, Cl 10, N 19 -> rank 2
    assert res.ranks == [1, 1, 2]
    assert res.mrr == pytest.approx((1 + 1 + 0.5) / 3, abs=1e-12)


def test_encoder_embedder_matches_direct(reactions):
    params = init_teacher(PretrainConfig(dim=8, hidden_dim=8), reaction_vocab(reactions))
    graphs = reactions[0].reactants + reactions[1].products
    np.testing.assert_array_equal(encoder_embedder(params)(graphs), encode_graphs(graphs, params))


def test_cosine_distance_identities():
    u = np.array([1.0, 0.0])
    assert cosine_distances(u, [[0.0, 1.0]])[0] == pytest.approx(1.0)
    assert cosine_distances(u, [[-2.0, 0.0]])[0] == pytest.approx(2.0)
    assert cosine_distances(u, [[0.0, 0.0]])[0] == 1.0
    assert nearest_embeddings(u, [[0.0, 1.0], [3.0, 0.0]], 1) == [(1, 0.0)]


def test_nearest_matches_sort_oracle():
    rng = np.random.default_rng(9)
    q, refs = rng.normal(size=4), rng.normal(size=(20, 4))
    d = [1 - q @ r / (np.linalg.norm(q) * np.linalg.norm(r)) for r in refs]
    expected = sorted(range(20), key=lambda k: d[k])
    assert [i for i, _ in nearest_embeddings(q, refs, 20)] == expected
