"""Bit-exact checkpoint files.

Layout::

    b"MOLKD1" | u32 little-endian manifest length | UTF-8 JSON manifest |
    float64 little-endian tensors, row-major, in manifest order

The manifest lists every tensor's name and shape under ``"tensors"``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from molkd import __version__
from molkd.encoder import EncoderParams, weight_shapes
from molkd.errors import BadMagic, CheckpointError, TruncatedPayload, VocabMismatch
from molkd.featurize import FeatureVocab
from molkd.ndiff import Tensor

MAGIC = b"MOLKD1"
_LEN = struct.Struct("<I")


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(manifest: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    manifest = dict(manifest)
    manifest["tensors"] = [{"name": n, "shape": list(np.shape(a))} for n, a in tensors]
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in tensors)
    return MAGIC + _LEN.pack(len(head)) + head + payload


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagic("not a molkd checkpoint (bad magic bytes)")
    start = len(MAGIC) + _LEN.size
    if len(blob) < start:
        raise TruncatedPayload("checkpoint ends inside the header")
    (n,) = _LEN.unpack(blob[len(MAGIC):start])
    if len(blob) < start + n:
        raise TruncatedPayload("checkpoint ends inside the manifest")
    try:
        manifest = json.loads(blob[start:start + n].decode("utf-8"))
        specs = [(t["name"], tuple(int(s) for s in t["shape"])) for t in manifest["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    payload = memoryview(blob)[start + n:]
    expected = sum(8 * int(np.prod(s, dtype=np.int64)) for _, s in specs)
    if len(payload) != expected:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, manifest declares {expected}")
    out, pos = {}, 0
    for name, shape in specs:
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(payload[pos:pos + 8 * size], dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * size
    return manifest, out


def save(path, manifest: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    atomic_write(path, dumps(manifest, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def _meta(extra: dict | None = None) -> dict:
    meta = {"molkd_version": __version__, "float": "float64-le"}
    meta.update(extra or {})
    return meta


# --- encoders ------------------------------------------------------------


def encoder_manifest(params: EncoderParams, config: dict | None = None) -> dict:
    return {"kind": "encoder", "encoder": params.manifest(),
            "vocab": params.vocab.to_json() if params.vocab else None,
            "config": config or {}, "created": _meta()}


def encoder_from(manifest_part: dict, arrays: dict[str, np.ndarray], prefix: str,
                 vocab: FeatureVocab | None) -> EncoderParams:
    m = manifest_part
    shapes = weight_shapes(m["arch"], m["in_dim"], m["hidden_dim"], m["out_dim"], m["n_layers"], m["hops"])
    weights = {}
    for name, shape in shapes.items():
        arr = arrays.get(prefix + name)
        if arr is None or arr.shape != shape:
            raise CheckpointError(f"tensor {prefix + name} missing or mis-shaped")
        weights[name] = Tensor(arr.copy(), requires_grad=True)
    if vocab is not None and vocab.total_dim != m["in_dim"]:
        raise VocabMismatch(f"vocabulary width {vocab.total_dim} != encoder input {m['in_dim']}")
    return EncoderParams(m["arch"], m["in_dim"], m["hidden_dim"], m["out_dim"],
                         m["n_layers"], m["hops"], weights, vocab)


def save_encoder(path, params: EncoderParams, config: dict | None = None) -> None:
    save(path, encoder_manifest(params, config),
         [(n, t.data) for n, t in params.weights.items()])


def load_encoder(path) -> EncoderParams:
    manifest, arrays = load(path)
    if manifest.get("kind") != "encoder":
        raise CheckpointError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not an encoder")
    vocab = FeatureVocab.from_json(manifest["vocab"]) if manifest.get("vocab") else None
    return encoder_from(manifest["encoder"], arrays, "", vocab)


# --- predictors ----------------------------------------------------------


def save_predictor(path, predictor, config: dict | None = None, extra: dict | None = None) -> None:
    student = predictor.student
    manifest = {
        "kind": "predictor",
        "task": predictor.task,
        "encoder": student.manifest(),
        "head": {"head_dim": int(predictor.head["w0"].shape[1]),
                 "n_tasks": int(predictor.head["w1"].shape[1])},
        "projection": {"in_dim": int(predictor.projection["w"].shape[0])},
        "vocab": student.vocab.to_json() if student.vocab else None,
        "config": config or {},
        "created": _meta(extra),
    }
    save(path, manifest, [(n, t.data) for n, t in predictor.named_tensors()])


def load_predictor(path):
    from molkd.distill import Predictor

    manifest, arrays = load(path)
    if manifest.get("kind") != "predictor":
        raise CheckpointError(f"{path} holds a {manifest.get('kind')!r} checkpoint, not a predictor")
    vocab = FeatureVocab.from_json(manifest["vocab"]) if manifest.get("vocab") else None
    student = encoder_from(manifest["encoder"], arrays, "student.", vocab)

    def group(prefix):
        return {k[len(prefix):]: Tensor(v.copy(), requires_grad=True)
                for k, v in arrays.items() if k.startswith(prefix)}

    return Predictor(student, group("head."), group("projection."), manifest["task"])
