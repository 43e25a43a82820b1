import json

import numpy as np
import pytest

from molkd import checkpoint as ckpt
from molkd.chem_parse import parse_molecule
from molkd.distill import DistillConfig, init_predictor
from molkd.encoder import ARCHITECTURES, encode_graph, init_encoder
from molkd.errors import BadMagic, CheckpointError, TruncatedPayload, VocabMismatch
from molkd.featurize import build_vocab


def _teacher(arch="TAG", seed=0):
    g = parse_molecule("CC(=O)O")
    v = build_vocab([g], unk=True)
    return init_encoder(arch, v.total_dim, 12, 10, seed=seed, vocab=v), g


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_encoder_round_trip_bitwise(tmp_path, arch):
    p, g = _teacher(arch, seed=3)
    path = tmp_path / "t.ckpt"
    ckpt.save_encoder(path, p, {"seed": 3})
    q = ckpt.load_encoder(path)
    assert list(q.weights) == list(p.weights)
    for k in p.weights:
        assert q.weights[k].data.tobytes() == p.weights[k].data.tobytes()
    assert q.vocab == p.vocab
    assert encode_graph(g, q).tobytes() == encode_graph(g, p).tobytes()
    ckpt.save_encoder(tmp_path / "again.ckpt", q, {"seed": 3})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_predictor_round_trip(tmp_path):
    teacher, g = _teacher()
    pred = init_predictor(teacher, DistillConfig(hidden_dim=6, head_dim=5, seed=1), 2)
    ckpt.save_predictor(tmp_path / "p.ckpt", pred)
    back = ckpt.load_predictor(tmp_path / "p.ckpt")
    assert [(n, t.data.tobytes()) for n, t in back.named_tensors()] == \
           [(n, t.data.tobytes()) for n, t in pred.named_tensors()]
    np.testing.assert_array_equal(back.predict([g]), pred.predict([g]))


def test_manifest_is_readable_json(tmp_path):
    p, _ = _teacher()
    ckpt.save_encoder(tmp_path / "t.ckpt", p)
    blob = (tmp_path / "t.ckpt").read_bytes()
    assert blob[:6] == b"MOLKD1"
    n = int.from_bytes(blob[6:10], "little")
    manifest = json.loads(blob[10:10 + n])
    assert manifest["kind"] == "encoder"
    assert [t["name"] for t in manifest["tensors"]] == list(p.weights)


def test_corrupt_files(tmp_path):
    p, _ = _teacher()
    blob = ckpt.dumps(ckpt.encoder_manifest(p), [(n, t.data) for n, t in p.weights.items()])
    with pytest.raises(BadMagic):
        ckpt.loads(b"NOTIT" + blob)
    with pytest.raises(TruncatedPayload):
        ckpt.loads(blob[:-8])
    with pytest.raises(TruncatedPayload):
        ckpt.loads(blob[:12])
    ckpt.save(tmp_path / "x.ckpt", {"kind": "predictor"}, [])
    with pytest.raises(CheckpointError):
        ckpt.load_encoder(tmp_path / "x.ckpt")


def test_vocab_width_mismatch_on_load(tmp_path):
    p, _ = _teacher()
    manifest = ckpt.encoder_manifest(p)
    manifest["vocab"]["values"][0].append("Zz")
    ckpt.save(tmp_path / "bad.ckpt", manifest, [(n, t.data) for n, t in p.weights.items()])
    with pytest.raises(VocabMismatch):
        ckpt.load_encoder(tmp_path / "bad.ckpt")


def test_atomic_write_leaves_no_temp_on_failure(tmp_path):
    target = tmp_path / "out.txt"
    target.write_text("old")
    with pytest.raises(TypeError):
        ckpt.atomic_write(target, 123)  # neither bytes nor str
    assert target.read_text() == "old"
    assert [f.name for f in tmp_path.iterdir()] == ["out.txt"]
