import numpy as np
import pytest

from oracles import auc_naive, mae_naive, rmse_naive
from molkd.chem_parse import parse_molecule
from molkd.encoder import init_encoder
from molkd.errors import EmptyMetricInput, LabelOutOfDomain, SingleClass
from molkd.evalkit import (
    PerturbationSet,
    atom_weight_rows,
    atom_weights,
    auc_roc,
    effect_score,
    load_perturbation_csv,
    macro_auc,
    mae,
    rmse,
)
from molkd.featurize import build_vocab


def test_auc_examples():
    assert auc_roc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auc_roc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
    assert auc_roc([0.5, 0.5], [1, 0]) == 0.5


def test_auc_errors():
    with pytest.raises(SingleClass):
        auc_roc([0.1, 0.2], [1, 1])
    with pytest.raises(LabelOutOfDomain):
        auc_roc([0.1, 0.2], [1, 2])


@pytest.mark.parametrize("seed", range(10))
def test_auc_matches_pairwise_count(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    s = rng.integers(0, 6, size=n) / 5.0
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    assert auc_roc(s, y) == auc_naive(s.tolist(), y.tolist())


def test_auc_shuffled_labels_near_half():
    rng = np.random.default_rng(0)
    s = rng.normal(size=100)
    y = np.array([0, 1] * 50)
    vals = [auc_roc(s, rng.permutation(y)) for _ in range(1000)]
    assert abs(np.mean(vals) - 0.5) < 0.03


def test_macro_auc_ignores_missing_and_single_class():
    s = np.array([[0.9, 0.1], [0.1, 0.2], [0.5, 0.3]])
    y = np.array([[1, 1], [0, np.nan], [1, 1]])
    assert macro_auc(s, y) == 1.0


def test_rmse_mae():
    assert rmse([1, 2], [1, 2]) == 0.0 and mae([1, 2], [1, 2]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5), abs=1e-15)
    assert mae([0, 0], [3, 4]) == 3.5
    rng = np.random.default_rng(1)
    p, y = rng.normal(size=50), rng.normal(size=50)
    assert abs(rmse(p, y) - rmse_naive(p, y)) < 1e-12
    assert abs(mae(p, y) - mae_naive(p, y)) < 1e-12
    with pytest.raises(EmptyMetricInput):
        rmse([], [])


def _pset():
    mols = [parse_molecule(s) for s in ("CCO", "CCN", "CCC", "OCO")]
    return PerturbationSet(mols, np.array([1.0, 2.0, 3.0, 4.0]), mols[::-1],
                           np.array([1.5, 2.0, 2.0, 5.0]), np.array([1, 1, 2, 2]))


def test_effect_score_identities():
    ps = _pset()
    # the predictor is called on originals, then on perturbed molecules
    calls = iter([ps.properties, ps.perturbed_properties])
    perfect = effect_score(lambda graphs: next(calls), ps)
    assert perfect == {1: 0.0, 2: 0.0}
    const = effect_score(lambda graphs: np.full(len(graphs), 7.0), ps)
    for level in (1, 2):
        sel = ps.levels == level
        assert const[level] == -rmse(ps.properties[sel], ps.perturbed_properties[sel])


def test_load_perturbation_csv(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("smiles,property,perturbed_smiles,perturbed_property,level\n"
                 "CCO,1.0,CCN,1.2,1\nC,0.5,N,0.4,2\n")
    ps = load_perturbation_csv(p)
    assert len(ps.molecules) == 2 and list(ps.levels) == [1, 2]


def test_atom_weights_zero_encoder():
    g = parse_molecule("CCO")
    v = build_vocab([g])
    p = init_encoder("TAG", v.total_dim, 8, 8, vocab=v)
    for t in p.weights.values():
        t.data[...] = 0.0
    np.testing.assert_array_equal(atom_weights(g, p), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_atom_weights_single_atom(seed):
    g = parse_molecule("[Na+]")
    v = build_vocab([g])
    w = atom_weights(g, init_encoder("GCN", v.total_dim, 8, 8, seed=seed, vocab=v))
    assert w.shape == (1,) and w[0] in (-1.0, 0.0, 1.0)


def test_atom_weights_scaled():
    g = parse_molecule("CC(=O)O")
    v = build_vocab([g])
    w = atom_weights(g, init_encoder("TAG", v.total_dim, 8, 8, seed=1, vocab=v))
    assert w.shape == (g.n_atoms,) and np.max(np.abs(w)) == 1.0
    rows = atom_weight_rows(g, w)
    assert rows[0][:2] == (0, "C") and len(rows) == g.n_atoms
