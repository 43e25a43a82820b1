"""``molkd`` command-line interface.

Verbs: pretrain, finetune, rank-eval, query, robustness, interpret, split.
Exit status is 0 on success, 2 for usage errors and missing inputs, 1 for
any other failure.  Outputs are written to a temp file and renamed into
place, so a failed command leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from molkd import checkpoint as ckpt
from molkd.chem_parse import iter_reaction_lines, load_reactions, parse_molecule
from molkd.config import RunConfig, load_config
from molkd.distill import (
    PropertyDataset,
    finetune,
    load_property_csv,
    load_split_file,
    random_split,
)
from molkd.encoder import EncoderParams
from molkd.errors import EmptyDataset, MolKDError, UnseenValue, VocabMismatch
from molkd.evalkit import atom_weight_rows, atom_weights, effect_score, load_perturbation_csv
from molkd.featurize import graph_features
from molkd.pretrain import (
    Embedder,
    RankingResult,
    encoder_embedder,
    evaluate_ranking,
    nearest_molecules,
    run_pretrain,
)

log = logging.getLogger("molkd")


class UsageError(Exception):
    pass


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"missing required {what} path")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        ckpt.atomic_write(out, text)
    else:
        sys.stdout.write(text)


# --- verbs ---------------------------------------------------------------


def cmd_pretrain(cfg: RunConfig) -> dict:
    reactions_path = _require(cfg.reactions, "reactions TSV")
    pcfg = cfg.pretrain_config()
    dataset = load_reactions(reactions_path)
    if not dataset:
        raise EmptyDataset(f"{reactions_path} holds no reactions")
    result = run_pretrain(dataset, pcfg)
    out = cfg.out or "teacher.ckpt"
    log_path = cfg.log or out + ".log"
    log_text = "".join(line + "\n" for line in result.log_lines())
    ckpt.atomic_write(log_path, log_text)
    ckpt.save_encoder(out, result.params, cfg.echo())
    return {"checkpoint": out, "log": log_path, "final_loss": result.epoch_losses[-1] if result.epoch_losses else None}


def _check_vocab(dataset: PropertyDataset, teacher: EncoderParams) -> None:
    try:
        for g in dataset.graphs:
            graph_features(g, teacher.vocab)
    except UnseenValue as exc:
        raise VocabMismatch(f"data does not featurize under the checkpoint vocabulary: {exc}") from exc


def load_splits(cfg: RunConfig, n: int) -> dict[str, np.ndarray]:
    given = {name: getattr(cfg, f"split_{name}") for name in ("train", "valid", "test")}
    if not any(given.values()):
        return random_split(n, cfg.seed)
    splits = {}
    for name, path in given.items():
        if path:
            idx = load_split_file(_require(path, f"{name} split"))
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise MolKDError(f"{name} split has indices outside 0..{n - 1}")
            splits[name] = idx
    return splits


def cmd_finetune(cfg: RunConfig) -> dict:
    data_path = _require(cfg.data, "property CSV")
    teacher_path = _require(cfg.teacher, "teacher checkpoint")
    dcfg = cfg.distill_config()
    teacher = ckpt.load_encoder(teacher_path)
    if teacher.vocab is None:
        raise VocabMismatch("teacher checkpoint has no vocabulary")
    dataset = load_property_csv(data_path, dcfg.task)
    _check_vocab(dataset, teacher)
    dataset.splits = load_splits(cfg, len(dataset.graphs))
    result = finetune(dataset, teacher, dcfg)
    out = cfg.out or "predictor.ckpt"
    report = {"task": dcfg.task, "best_epoch": result.best_epoch, "metrics": result.metrics,
              "beta": dcfg.beta, "tau": dcfg.tau, "kd": dcfg.kd_active, "seed": dcfg.seed}
    report_path = cfg.report or out + ".report.json"
    log_path = cfg.log or out + ".log"
    ckpt.atomic_write(log_path, "".join(line + "\n" for line in result.log_lines()))
    ckpt.atomic_write(report_path, _json_text(report))
    ckpt.save_predictor(out, result.predictor, cfg.echo())
    return report


def run_rank_eval(teacher_path, reactions_path, embed: Embedder | None = None) -> RankingResult:
    """Ranking metrics for a reaction TSV; ``embed`` replaces the encoder (test hook)."""
    reactions = load_reactions(_require(str(reactions_path), "reactions TSV"))
    if not reactions:
        raise EmptyDataset(f"{reactions_path} holds no reactions")
    if embed is None:
        embed = encoder_embedder(ckpt.load_encoder(_require(str(teacher_path), "teacher checkpoint")))
    return evaluate_ranking(reactions, embed)


def _reference_smiles(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.split("\t")[0].strip() for _, line in iter_reaction_lines(fh)]


def run_query(checkpoint_path, smiles: str, refs_path, k: int) -> list[dict]:
    params = ckpt.load_encoder(_require(str(checkpoint_path), "checkpoint"))
    refs = _reference_smiles(_require(str(refs_path), "reference TSV"))
    if not refs:
        raise EmptyDataset(f"{refs_path} holds no reference molecules")
    hits = nearest_molecules(parse_molecule(smiles), [parse_molecule(s) for s in refs], k, params)
    return [{"rank": r + 1, "index": i, "smiles": refs[i], "cosine_distance": d}
            for r, (i, d) in enumerate(hits)]


def predictor_fn(predictor):
    return lambda graphs: predictor.predict(list(graphs))[:, 0]


def run_robustness(predictor_path, pset_path) -> dict:
    predictor = ckpt.load_predictor(_require(str(predictor_path), "predictor checkpoint"))
    pset = load_perturbation_csv(_require(str(pset_path), "perturbation CSV"))
    scores = effect_score(predictor_fn(predictor), pset)
    return {"effect_score": {str(k): v for k, v in scores.items()}}


def run_interpret(predictor_path, smiles: str) -> str:
    predictor = ckpt.load_predictor(_require(str(predictor_path), "predictor checkpoint"))
    g = parse_molecule(smiles)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["atom_index", "element", "weight"])
    for i, el, w in atom_weight_rows(g, atom_weights(g, predictor.student)):
        writer.writerow([i, el, repr(w)])
    return buf.getvalue()


def run_split(n: int, seed: int, out_dir) -> dict[str, str]:
    splits = random_split(n, seed)
    paths = {}
    for name, idx in splits.items():
        path = Path(out_dir) / f"{name}.txt"
        ckpt.atomic_write(path, "".join(f"{i}\n" for i in idx))
        paths[name] = str(path)
    return paths


# --- argument parsing ----------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path")
    p.add_argument("--threads", type=int, help="cap on BLAS threads (also MOLKD_THREADS)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("pretrain", help="pre-train a teacher encoder on reactions")
    _common(p)
    p.add_argument("--reactions")
    p.add_argument("--epochs", type=int)
    p.add_argument("--log")

    p = sub.add_parser("finetune", help="distill a teacher into a property predictor")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--teacher")
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--task", choices=["classification", "regression"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-kd", dest="use_kd", action="store_false", default=None)
    p.add_argument("--init-from-teacher", dest="init_from_teacher", action="store_true", default=None)
    p.add_argument("--report")
    p.add_argument("--log")

    p = sub.add_parser("rank-eval", help="product ranking metrics for a reaction TSV")
    _common(p)
    p.add_argument("--teacher")
    p.add_argument("--reactions")

    p = sub.add_parser("query", help="nearest reference molecules by cosine distance")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--smiles", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("-k", type=int, default=8)

    p = sub.add_parser("robustness", help="perturbation effect score per level")
    _common(p)
    p.add_argument("--predictor", required=True)
    p.add_argument("--perturbations", required=True)

    p = sub.add_parser("interpret", help="per-atom weights as CSV")
    _common(p)
    p.add_argument("--predictor", required=True)
    p.add_argument("--smiles", required=True)

    p = sub.add_parser("split", help="seeded random 8:1:1 split index files")
    _common(p)
    p.add_argument("--n", type=int, help="dataset size")
    p.add_argument("--data", help="property CSV to count rows from")
    return parser


_CONFIG_FLAGS = ("seed", "out", "threads", "reactions", "epochs", "log", "data", "teacher",
                 "beta", "tau", "task", "use_kd", "init_from_teacher", "report")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for name in _CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if "threads" not in overrides and os.environ.get("MOLKD_THREADS"):
        overrides["threads"] = os.environ["MOLKD_THREADS"]
    if args.config:
        _require(args.config, "config file")
    return load_config(args.config, overrides)


def _thread_limit(n: int):
    if n and n > 0:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    return nullcontext()


def dispatch(args: argparse.Namespace, cfg: RunConfig) -> None:
    verb = args.verb
    if verb == "pretrain":
        summary = cmd_pretrain(cfg)
        log.info("wrote %s", summary["checkpoint"])
    elif verb == "finetune":
        cmd_finetune(cfg)
    elif verb == "rank-eval":
        result = run_rank_eval(cfg.teacher, cfg.reactions)
        _emit(_json_text(result.to_json()), cfg.out or None)
    elif verb == "query":
        _emit(_json_text(run_query(args.checkpoint, args.smiles, args.refs, args.k)), cfg.out or None)
    elif verb == "robustness":
        _emit(_json_text(run_robustness(args.predictor, args.perturbations)), cfg.out or None)
    elif verb == "interpret":
        _emit(run_interpret(args.predictor, args.smiles), cfg.out or None)
    elif verb == "split":
        if args.n is None and not args.data:
            raise UsageError("split needs --n or --data")
        n = args.n if args.n is not None else len(load_property_csv(_require(args.data, "property CSV")).graphs)
        run_split(n, cfg.seed, cfg.out or ".")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(cfg.threads):
            dispatch(args, cfg)
    except (UsageError, FileNotFoundError) as exc:
        print(f"molkd {args.verb}: {exc}", file=sys.stderr)
        return 2
    except (MolKDError, OSError, ValueError) as exc:
        print(f"molkd {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
