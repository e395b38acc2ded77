"""Surrogate-label classifiers and time-dependent distillation.

Pipeline: assign labels to the training data, fit an ordinary (clean-input)
teacher, sample a synthetic set from the diffusion model and soft-label it
with the teacher, then distil a time-conditioned student that predicts the
teacher's clean-input distribution from noised inputs ``x_t``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from memextract import diffusion
from memextract.nn import AdamW, Mlp, MlpConfig, NonFiniteError, add_time_modules, log_softmax, softmax

log = logging.getLogger(__name__)

LABEL_KINDS = ("original", "random_per_sample", "random_k", "cluster_k")


class LabelError(ValueError):
    """Label assignment would not be informative or is otherwise invalid."""


@dataclass(frozen=True)
class LabelSource:
    kind: str = "original"
    k: int = 0
    seed: int = 0
    pca_components: int = 0

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise LabelError(f"unknown label source {self.kind!r}")


def check_informative(labels: np.ndarray) -> None:
    """Every class must be non-empty and a strict subset of the data."""
    labels = np.asarray(labels)
    n = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.max() >= n:
        raise LabelError("a single class covers the whole dataset; labels are not informative")
    if not np.array_equal(classes, np.arange(len(classes))):
        raise LabelError("labels must be contiguous integers 0..C-1")


def _relabel_by_first_seen(labels):
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(y), len(mapping)) for y in labels], dtype=np.int64)


def cluster_features(data: np.ndarray, components: int = 0) -> np.ndarray:
    """Raw features, or the top principal-component scores when ``components > 0``."""
    data = np.asarray(data, dtype=np.float64)
    if components <= 0 or components >= data.shape[1]:
        return data
    centred = data - data.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return centred @ vt[:components].T


def assign_labels(data, source: LabelSource, original=None) -> np.ndarray:
    data = np.asarray(data)
    n = len(data)
    if n == 0:
        raise LabelError("empty dataset")
    rng = np.random.default_rng(source.seed)
    if source.kind == "original":
        if original is None:
            raise LabelError("original labels requested but none supplied")
        labels = np.asarray(original, dtype=np.int64).copy()
        if labels.shape != (n,):
            raise LabelError("original labels must have one entry per sample")
    elif source.kind == "random_per_sample":
        labels = rng.permutation(n).astype(np.int64)
    else:
        k = source.k
        if k == 1:
            raise LabelError("k = 1 is not an informative labelling")
        if not 2 <= k <= n:
            raise LabelError(f"need 2 <= k <= N, got k={k}, N={n}")
        if source.kind == "random_k":
            labels = rng.permutation(np.arange(n) % k).astype(np.int64)
        else:
            feats = cluster_features(data, source.pca_components)
            _, raw = kmeans2(feats, k, minit="++", seed=source.seed)
            labels = _relabel_by_first_seen(raw.astype(np.int64))
    check_informative(labels)
    return labels


def write_label_table(path, labels, source: LabelSource) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "source_kind", "seed"])
        for i, y in enumerate(labels):
            w.writerow([i, int(y), source.kind, source.seed])


def read_label_table(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([int(r["label"]) for r in rows], dtype=np.int64)


@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "silu"
    norm: bool = True
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    seed: int = 0


@dataclass(frozen=True)
class DistillConfig:
    student_hidden: tuple[int, ...] | None = None
    time_embed_dim: int = 32
    init_from_teacher: bool = True
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-2
    synthetic_factor: int = 4
    holdout_fraction: float = 0.1
    kl_threshold: float = 0.05
    seed: int = 0
    pseudo_seed: int = 1


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    accuracy: float = float("nan")
    holdout_kl: float = float("nan")


def cross_entropy_grad(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = len(labels)
    lsm = log_softmax(logits)
    loss = -float(lsm[np.arange(n), labels].mean())
    g = np.exp(lsm)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def kl_to_student(teacher_probs, student_logits):
    """Mean ``KL(teacher || student)`` and its gradient with respect to student logits.

    The teacher distribution is the first argument; swapping the order changes
    both value and gradient.
    """
    n = len(teacher_probs)
    lsm = log_softmax(student_logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_log = np.where(teacher_probs > 0, np.log(teacher_probs), 0.0)
    kl = float(np.sum(teacher_probs * (t_log - lsm)) / n)
    return kl, (np.exp(lsm) - teacher_probs) / n


def train_teacher(data, labels, config: ClassifierConfig = ClassifierConfig(),
                  n_classes: int | None = None) -> tuple[Mlp, TrainLog]:
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or int(labels.max()) + 1
    if np.bincount(labels, minlength=n_classes).min() < 1:
        raise LabelError("every class needs at least one sample")
    net = Mlp(MlpConfig(data.shape[1], config.hidden, n_classes, config.activation,
                        norm=config.norm), seed=config.seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    out = TrainLog()
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            logits, cache = net.forward(data[idx], train=True, return_cache=True)
            loss, g = cross_entropy_grad(logits, labels[idx])
            if not math.isfinite(loss):
                raise NonFiniteError("teacher loss diverged")
            grads, _ = net.backward(cache, g)
            opt.step(net.params, grads)
            total += loss * len(idx)
        out.losses.append(total / n)
    out.accuracy = float(np.mean(net.forward(data).argmax(axis=1) == labels))
    log.info("teacher: final loss %.4f, train accuracy %.3f", out.losses[-1], out.accuracy)
    return net, out


@dataclass
class PseudoDataset:
    samples: np.ndarray
    soft_labels: np.ndarray

    def __post_init__(self):
        if len(self.samples) != len(self.soft_labels):
            raise ValueError("samples and soft labels differ in length")
        if not np.allclose(self.soft_labels.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("soft labels must be probability vectors")


def generate_pseudo_dataset(model, teacher: Mlp, sched, n: int, seed: int, steps: int = 50,
                            eta: float = 0.0, threads: int = 1) -> PseudoDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    batch = diffusion.sample(model, sched, n, seed, steps=steps, eta=eta, threads=threads)
    return PseudoDataset(batch.samples, softmax(teacher.forward(batch.samples)))


def make_student(teacher: Mlp, config: DistillConfig) -> Mlp:
    if config.init_from_teacher and config.student_hidden in (None, teacher.config.hidden):
        return add_time_modules(teacher, config.time_embed_dim, seed=config.seed)
    hidden = config.student_hidden or teacher.config.hidden
    cfg = MlpConfig(teacher.config.in_dim, hidden, teacher.config.out_dim,
                    teacher.config.activation, norm=teacher.config.norm,
                    time_embed_dim=config.time_embed_dim, time_mode="film")
    return Mlp(cfg, seed=config.seed)


def distill(teacher: Mlp, pseudo: PseudoDataset, sched, config: DistillConfig = DistillConfig()
            ) -> tuple[Mlp, TrainLog]:
    """Fit a time-conditioned student to the teacher's clean-input soft labels.

    Each step draws a fresh timestep uniformly from ``1..T`` and fresh noise
    per sample.  The returned log's ``accuracy`` is the held-out top-1
    agreement with the teacher at ``t = 1``; ``losses`` holds per-epoch
    training KL.
    """
    n = len(pseudo.samples)
    if n == 0:
        raise ValueError("pseudo dataset is empty")
    rng = np.random.default_rng(config.seed)
    n_hold = int(round(n * config.holdout_fraction)) if n > 1 else 0
    perm = rng.permutation(n)
    hold, train_idx = perm[:n_hold], perm[n_hold:]
    x, p = pseudo.samples, pseudo.soft_labels
    student = make_student(teacher, config)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    out = TrainLog()
    for _ in range(config.epochs):
        order = rng.permutation(train_idx)
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            xt = diffusion.forward_noise(x[idx], t, rng.standard_normal(x[idx].shape), sched)
            logits, cache = student.forward(xt, t, train=True, return_cache=True)
            loss, g = kl_to_student(p[idx], logits)
            if not math.isfinite(loss):
                raise NonFiniteError("distillation loss diverged")
            grads, _ = student.backward(cache, g)
            opt.step(student.params, grads)
            total += loss * len(idx)
        out.losses.append(total / max(len(train_idx), 1))
    if n_hold:
        kl, agree = heldout_fidelity(student, pseudo, hold, t=1)
        out.accuracy = agree
        out.holdout_kl = kl
        log.info("student: held-out KL at t=1 %.4f, top-1 agreement %.3f", kl, agree)
        if kl > config.kl_threshold:
            log.warning("held-out distillation KL %.4f exceeds threshold %.4f", kl,
                        config.kl_threshold)
    return student, out


def heldout_fidelity(student: Mlp, pseudo: PseudoDataset, idx, t: int = 1,
                     sched=None, seed: int = 0) -> tuple[float, float]:
    """KL and top-1 agreement of the student at step ``t`` against the teacher's labels.

    Without ``sched`` the clean samples are fed directly, i.e. ``x_t = x``.
    """
    x, p = pseudo.samples[idx], pseudo.soft_labels[idx]
    if sched is not None:
        rng = np.random.default_rng(seed)
        x = diffusion.forward_noise(x, np.full(len(x), t), rng.standard_normal(x.shape), sched)
    logits = student.forward(x, np.full(len(x), t))
    kl, _ = kl_to_student(p, logits)
    return kl, float(np.mean(logits.argmax(axis=1) == p.argmax(axis=1)))
