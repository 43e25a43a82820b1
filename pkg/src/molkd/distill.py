"""Reaction-to-molecule contrastive distillation and supervised fine-tuning.

The student encoder is trained on labelled molecules with

    loss = beta * supervised + (1 - beta) * infonce(student, proj(teacher))

where the teacher is a frozen pre-trained encoder and ``proj`` is a single
linear + relu layer mapping teacher width to student width.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from molkd import ndiff as nd
from molkd.chem_parse import MolGraph, parse_molecule
from molkd.encoder import (
    EncoderParams,
    encode_batch,
    init_encoder,
    make_batch,
    prepare_graph,
)
from molkd.errors import BetaOutOfRange, ConfigError, DimMismatch, LabelOutOfDomain, VocabMismatch
from molkd.evalkit import macro_auc, mae, rmse
from molkd.ndiff import Adam, Tape, Tensor

log = logging.getLogger(__name__)

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass
class DistillConfig:
    tau: float = 0.1
    beta: float = 0.5
    task: str = CLASSIFICATION
    arch: str = "TAG"
    hidden_dim: int = 64
    n_layers: int = 2
    hops: int = 3
    head_dim: int = 64
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    use_kd: bool = True
    init_from_teacher: bool = False

    TAU_GRID = (0.05, 0.075, 0.1)
    BETA_GRID = (0.2, 0.5, 0.8)

    def validate(self) -> "DistillConfig":
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise BetaOutOfRange(f"beta={self.beta} outside [0, 1]")
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ConfigError(f"unknown task kind {self.task!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        return self

    @property
    def kd_active(self) -> bool:
        return self.use_kd and self.beta < 1.0


@dataclass
class PropertyDataset:
    graphs: list[MolGraph]
    labels: np.ndarray  # N x T, NaN marks a missing label
    task: str = CLASSIFICATION
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    smiles: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if len(self.graphs) != len(self.labels):
            raise DimMismatch("graphs and labels differ in length")
        seen = self.labels[~np.isnan(self.labels)]
        if not np.all(np.isfinite(seen)):
            raise LabelOutOfDomain("labels must be finite")
        if self.task == CLASSIFICATION and not np.all((seen == 0) | (seen == 1)):
            raise LabelOutOfDomain("classification labels must be 0 or 1")

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    def split(self, name: str) -> np.ndarray:
        return np.asarray(self.splits.get(name, np.array([], dtype=int)), dtype=int)


def load_property_csv(path, task: str = CLASSIFICATION) -> PropertyDataset:
    """``smiles,label[,label2,...]`` with empty cells for missing labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if not header or header[0].strip() != "smiles" or len(header) < 2:
        raise ConfigError(f"{path}: header must start with 'smiles,label'")
    smiles = [r[0] for r in rows]
    labels = np.array([[float(c) if c.strip() else np.nan for c in r[1:]] for r in rows])
    graphs = [parse_molecule(s) for s in smiles]
    return PropertyDataset(graphs, labels, task, smiles=smiles, label_names=header[1:])


def load_split_file(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=int)


def random_split(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return {"train": np.sort(order[:n_train]),
            "valid": np.sort(order[n_train:n_train + n_valid]),
            "test": np.sort(order[n_train + n_valid:])}


# --- losses --------------------------------------------------------------


def infonce_kd_loss(student: Tensor, teacher: Tensor, tau: float) -> Tensor:
    """InfoNCE over cosine similarities; row i's negatives are teacher rows j != i."""
    student, teacher = nd.tensor(student), nd.tensor(teacher)
    if student.shape != teacher.shape or student.data.ndim != 2:
        raise DimMismatch(f"student {student.shape} vs teacher {teacher.shape}")
    logits = nd.cosine_similarity(student, teacher) * (1.0 / tau)
    return nd.reduce_mean(nd.logsumexp(logits, axis=1) - nd.diagonal(logits))


def supervised_loss(predictions, labels, task: str, mask=None) -> Tensor:
    """BCE-with-logits (classification) or MSE (regression), averaged over observed labels."""
    z = nd.tensor(predictions)
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    observed = ~np.isnan(y) if mask is None else np.asarray(mask, dtype=bool).reshape(z.shape)
    y = np.where(observed, y, 0.0)
    if task == CLASSIFICATION:
        if not np.all((y == 0) | (y == 1)):
            raise LabelOutOfDomain("classification labels must be 0 or 1")
        per = nd.softplus(z) - z * y
    elif task == REGRESSION:
        if not np.all(np.isfinite(y)):
            raise LabelOutOfDomain("regression labels must be finite")
        diff = z - y
        per = diff * diff
    else:
        raise ValueError(f"unknown task kind {task!r}")
    count = max(int(observed.sum()), 1)
    return nd.reduce_sum(per * observed.astype(np.float64)) * (1.0 / count)


def combined_loss(sup, kd, beta: float):
    if not 0.0 <= beta <= 1.0:
        raise BetaOutOfRange(f"beta={beta} outside [0, 1]")
    return beta * sup + (1.0 - beta) * kd


# --- model ---------------------------------------------------------------


@dataclass
class Predictor:
    """Student encoder, two-layer prediction head, and teacher projection."""

    student: EncoderParams
    head: dict[str, Tensor]
    projection: dict[str, Tensor]
    task: str = CLASSIFICATION

    def trainable(self, with_projection: bool = True) -> list[Tensor]:
        out = self.student.tensors() + list(self.head.values())
        return out + list(self.projection.values()) if with_projection else out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return ([(f"student.{k}", v) for k, v in self.student.weights.items()]
                + [(f"head.{k}", v) for k, v in self.head.items()]
                + [(f"projection.{k}", v) for k, v in self.projection.items()])

    def represent(self, batch) -> Tensor:
        return encode_batch(batch, self.student)

    def head_forward(self, reps: Tensor) -> Tensor:
        h = nd.relu(nd.matmul(reps, self.head["w0"]) + self.head["b0"])
        return nd.matmul(h, self.head["w1"]) + self.head["b1"]

    def project(self, teacher_reps) -> Tensor:
        return nd.relu(nd.matmul(nd.tensor(teacher_reps), self.projection["w"]) + self.projection["b"])

    def predict(self, graphs: Sequence[MolGraph]) -> np.ndarray:
        vocab = self.student.vocab
        return self.predict_prepared([prepare_graph(g, vocab, self.student.arch) for g in graphs])

    def predict_prepared(self, prepared) -> np.ndarray:
        if not prepared:
            return np.zeros((0, self.head["b1"].shape[0]))
        return self.head_forward(self.represent(make_batch(prepared))).data.copy()

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for _, t in self.named_tensors()]

    def restore(self, arrays: list[np.ndarray]) -> None:
        for (_, t), a in zip(self.named_tensors(), arrays):
            t.data[...] = a


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_predictor(teacher: EncoderParams, cfg: DistillConfig, n_tasks: int) -> Predictor:
    if cfg.init_from_teacher:
        student = teacher.copy()
        for t in student.tensors():
            t.requires_grad = True
    else:
        student = init_encoder(cfg.arch, teacher.in_dim, cfg.hidden_dim, cfg.hidden_dim,
                               cfg.n_layers, cfg.hops, seed=cfg.seed, vocab=teacher.vocab)
    d = student.out_dim
    rng = np.random.default_rng([cfg.seed, 2])
    head = {"w0": _uniform(rng, d, (d, cfg.head_dim)), "b0": _uniform(rng, d, (cfg.head_dim,)),
            "w1": _uniform(rng, cfg.head_dim, (cfg.head_dim, n_tasks)),
            "b1": _uniform(rng, cfg.head_dim, (n_tasks,))}
    proj = {"w": _uniform(rng, teacher.out_dim, (teacher.out_dim, d)),
            "b": _uniform(rng, teacher.out_dim, (d,))}
    return Predictor(student, head, proj, cfg.task)


# --- training ------------------------------------------------------------


@dataclass
class FinetuneResult:
    predictor: Predictor
    train_losses: list[float]
    valid_metrics: list[float]
    best_epoch: int
    metrics: dict[str, float]

    def log_lines(self) -> list[str]:
        return [f"{e + 1}\t{l!r}\t{v!r}"
                for e, (l, v) in enumerate(zip(self.train_losses, self.valid_metrics))]


def evaluate(predictor: Predictor, dataset: PropertyDataset, idx, prepared=None) -> dict[str, float]:
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        return {}
    if prepared is None:
        preds = predictor.predict([dataset.graphs[i] for i in idx])
    else:
        preds = predictor.predict_prepared([prepared[i] for i in idx])
    y = dataset.labels[idx]
    if dataset.task == CLASSIFICATION:
        return {"AUC-ROC": macro_auc(preds, y)}
    seen = ~np.isnan(y)
    return {"RMSE": rmse(preds[seen], y[seen]), "MAE": mae(preds[seen], y[seen])}


def _selection_score(metrics: dict[str, float], task: str) -> float:
    """Higher is better."""
    if not metrics:
        return -np.inf
    v = metrics["AUC-ROC"] if task == CLASSIFICATION else -metrics["RMSE"]
    return -np.inf if np.isnan(v) else v


def teacher_representations(teacher: EncoderParams, graphs: Sequence[MolGraph],
                            prepared=None) -> np.ndarray:
    """Frozen teacher embeddings; runs outside any tape so no gradient can reach the teacher."""
    prepared = prepared or [prepare_graph(g, teacher.vocab, teacher.arch) for g in graphs]
    batch = make_batch(prepared)
    return encode_batch(batch, teacher).data.copy()


def finetune(dataset: PropertyDataset, teacher: EncoderParams, cfg: DistillConfig) -> FinetuneResult:
    cfg.validate()
    if teacher.vocab is None:
        raise VocabMismatch("teacher checkpoint carries no vocabulary")
    if dataset.task != cfg.task:
        raise ConfigError(f"dataset task {dataset.task!r} but config task {cfg.task!r}")
    train_idx = dataset.split("train")
    if train_idx.size == 0:
        raise ConfigError("empty training split")
    predictor = init_predictor(teacher, cfg, dataset.n_tasks)
    student_arch = predictor.student.arch
    prepared = [prepare_graph(g, teacher.vocab, student_arch) for g in dataset.graphs]
    if cfg.kd_active:
        t_prepared = prepared if teacher.arch == student_arch else None
        t_reps = teacher_representations(teacher, dataset.graphs, t_prepared)
    else:
        t_reps = None
    opt = Adam(predictor.trainable(cfg.kd_active), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 3])

    losses, valid, best = [], [], (-np.inf, -1, predictor.snapshot())
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        batch_losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = make_batch([prepared[i] for i in idx])
            with Tape() as tape:
                reps = predictor.represent(batch)
                sup = supervised_loss(predictor.head_forward(reps), dataset.labels[idx], cfg.task)
                if cfg.kd_active:
                    kd = infonce_kd_loss(reps, predictor.project(t_reps[idx]), cfg.tau)
                    loss = combined_loss(sup, kd, cfg.beta)
                else:
                    loss = sup
            tape.backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
        metrics = evaluate(predictor, dataset, dataset.split("valid"), prepared)
        score = _selection_score(metrics, cfg.task)
        valid.append(float(-score if cfg.task == REGRESSION else score) if np.isfinite(score) else float("nan"))
        if score > best[0] or best[1] < 0:
            best = (score, epoch, predictor.snapshot())
        log.debug("epoch %d loss %.6f valid %s", epoch + 1, losses[-1], metrics)
    if cfg.epochs:
        predictor.restore(best[2])
    report = {f"test_{k}": v for k, v in evaluate(predictor, dataset, dataset.split("test"), prepared).items()}
    report.update({f"valid_{k}": v for k, v in evaluate(predictor, dataset, dataset.split("valid"), prepared).items()})
    return FinetuneResult(predictor, losses, valid, best[1] + 1, report)
