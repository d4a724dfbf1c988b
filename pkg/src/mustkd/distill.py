"""Multilingual student-teacher distillation.

A teacher is a frozen source-language ASR followed by a frozen mapping model
into the target vocabulary. The student is an ordinary hybrid model whose
objective gains a KL term pulling its CTC-head frame posteriors towards the
teachers' soft labels.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .asr import AsrHyper, AsrModel, Batch, Vocab, batch_frame_posteriors, check_corpus, check_weights, fit, init_asr
from .ensemble import TeacherOutputs, WeightingStrategy, frame_weights, select_st
from .mapping import MesdModel, batch_map_posteriors
from .posteriors import PosteriorSequence, check_aligned, kl_divergence
from .synth import Utterance

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class TeacherPipeline:
    source_asr: AsrModel
    mapping: MesdModel
    source_language: str
    target_language: str
    # number of utterances this teacher has labelled
    calls: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.source_asr.language_id != self.source_language:
            raise ValueError(f"source ASR is {self.source_asr.language_id}, pipeline says {self.source_language}")
        if self.mapping.target_language != self.target_language:
            raise ValueError(f"mapping targets {self.mapping.target_language}, pipeline says {self.target_language}")
        if self.source_language not in self.mapping.source_dims:
            raise ValueError(f"mapping has no encoder for {self.source_language}")
        if self.mapping.source_dims[self.source_language] != self.source_asr.dim:
            raise ValueError("mapping encoder width does not match the source ASR output")

    @property
    def teacher_id(self) -> str:
        return self.source_language

    @property
    def dim(self) -> int:
        return self.mapping.target_dim

    def soft_labels(self, utts: Sequence[Utterance]) -> list[PosteriorSequence]:
        for u in utts:
            if u.language_id != self.target_language:
                raise ValueError(f"{u.utt_id} is {u.language_id}, teacher serves {self.target_language}")
        self.calls += len(utts)
        return batch_map_posteriors(self.mapping, self.source_language, batch_frame_posteriors(self.source_asr, utts))


def teacher_soft_labels(pipeline: TeacherPipeline, utt: Utterance) -> PosteriorSequence:
    """Source-ASR posteriors for a target utterance, mapped into the target vocabulary."""
    return pipeline.soft_labels([utt])[0]


@dataclass
class DistillConfig:
    lam: float = 0.5
    strategy: WeightingStrategy = field(default_factory=lambda: WeightingStrategy("ta"))
    hyper: AsrHyper = field(default_factory=AsrHyper)
    # memoize soft labels by utt_id instead of recomputing them every epoch
    cache: bool = False

    def __post_init__(self):
        check_weights(self.hyper.alpha, self.lam)


def kd_loss(student: PosteriorSequence, teacher: PosteriorSequence) -> float:
    """Sum over frames of KL(teacher || student)."""
    check_aligned(student, teacher)
    return float(kl_divergence(teacher.frames, student.frames).sum())


def ensemble_kd_loss(student: PosteriorSequence, outputs: TeacherOutputs, strategy: WeightingStrategy) -> float:
    """Strategy-weighted KD loss against every teacher (frame weights for FWM)."""
    w = frame_weights(outputs, strategy)
    total = 0.0
    for k, (_, seq) in enumerate(outputs.teachers):
        check_aligned(student, seq)
        total += float(np.dot(w[:, k], kl_divergence(seq.frames, student.frames)))
    return total


def must_total_loss(l_ctc: float, l_ce: float, l_kd: float, alpha: float, lam: float) -> float:
    check_weights(alpha, lam)
    return alpha * l_ctc + (1.0 - alpha) * (lam * l_kd + (1.0 - lam) * l_ce)


def _neg_entropy(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0).sum(axis=-1)


class _KdTerm:
    """The ``kd`` hook handed to :func:`fit`.

    Per utterance the loss is sum_k sum_t w_tk KL(p_k,t || s_t) divided by T,
    averaged over the batch. Its student-dependent part is a cross-entropy
    against the fused labels sum_k w_tk p_k,t, so the graph only needs those
    plus a per-utterance constant.
    """

    def __init__(self, pipelines: Sequence[TeacherPipeline], strategy: WeightingStrategy, cache: bool):
        self.pipelines = list(pipelines)
        self.strategy = strategy
        self.ids = [p.teacher_id for p in self.pipelines]
        self.active = list(range(len(self.pipelines)))
        if strategy.kind == "st":
            table = {t: strategy.accuracies[t] for t in self.ids if t in strategy.accuracies}
            self.active = [self.ids.index(select_st(table))]
        self.cache: dict[str, tuple[np.ndarray, float, np.ndarray]] | None = {} if cache else None

    def _targets(self, utts: Sequence[Utterance]):
        todo = [u for u in utts if self.cache is None or u.utt_id not in self.cache]
        fresh = {}
        if todo:
            labels = {i: self.pipelines[i].soft_labels(todo) for i in self.active}
            for n, u in enumerate(todo):
                outputs = TeacherOutputs(tuple((self.ids[i], labels[i][n]) for i in self.active))
                w = frame_weights(outputs, self.strategy)
                stacked = outputs.stack()
                fused = np.einsum("tk,ktd->td", w, stacked)
                const = float(np.sum(w * _neg_entropy(stacked).T))
                full_w = np.zeros((w.shape[0], len(self.pipelines)))
                full_w[:, self.active] = w
                fresh[u.utt_id] = (fused, const, full_w.mean(axis=0))
            if self.cache is not None:
                self.cache.update(fresh)
        source = self.cache if self.cache is not None else fresh
        return [source[u.utt_id] for u in utts]

    def __call__(self, batch: Batch, logits: ad.Tensor):
        targets = self._targets(batch.utts)
        width = logits.shape[1]
        fused = np.zeros(logits.shape)
        for b, (f, _, _) in enumerate(targets):
            fused[b, : f.shape[0]] = f
        if fused.shape[1] != width:
            raise ValueError("soft labels are longer than the student input")
        const = np.array([c for _, c, _ in targets])
        cross = (ad.log_softmax(logits) * fused).sum(axis=(1, 2))
        l_kd = ad.mean((const - cross) * (1.0 / batch.lengths))
        weights = np.mean([w for _, _, w in targets], axis=0).tolist()
        return l_kd, weights


def train_student(
    utts: Sequence[Utterance],
    vocab: Vocab,
    pipelines: Sequence[TeacherPipeline],
    config: DistillConfig | None = None,
    log_path: str | os.PathLike | None = None,
) -> AsrModel:
    """Train a target-language student on ground truth plus teacher soft labels.

    With ``lam == 0`` no teacher is consulted and the run is exactly
    :func:`train_asr`. Teachers are only read.
    """
    config = config or DistillConfig()
    lang = check_corpus(utts)
    if config.lam > 0 and not pipelines:
        raise ValueError("distillation with lambda > 0 needs at least one teacher")
    for p in pipelines:
        if p.target_language != lang:
            raise ValueError(f"teacher {p.teacher_id} targets {p.target_language}, corpus is {lang}")
        if p.dim != vocab.dim:
            raise ValueError(f"teacher {p.teacher_id} emits {p.dim} classes, student has {vocab.dim}")
    hyper = config.hyper
    model = init_asr(lang, vocab, utts[0].features.shape[1], hyper.hidden, hyper.embed, hyper.seed)
    kd = _KdTerm(pipelines, config.strategy, config.cache) if config.lam > 0 else None
    fit(model, utts, hyper, lam=config.lam, kd=kd)
    for p in pipelines:
        logger.info("teacher %s labelled %d utterances", p.teacher_id, p.calls)
    if log_path is not None:
        write_training_log(log_path, model.history, [p.teacher_id for p in pipelines], hyper.alpha, config.lam)
    return model


def write_training_log(
    path: str | os.PathLike, history: Sequence[dict], teacher_ids: Sequence[str], alpha: float, lam: float
) -> None:
    """One CSV row per batch; floats are written with round-trip precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "batch", "alpha", "lambda", "l_ctc", "l_ce", "l_kd", *[f"w_{t}" for t in teacher_ids], "total"])
        for row in history:
            weights = list(row["weights"]) or [0.0] * len(teacher_ids)
            w.writerow(
                [row["epoch"], row["batch"], repr(alpha), repr(lam), repr(row["l_ctc"]), repr(row["l_ce"]),
                 repr(row["l_kd"]), *map(repr, weights), repr(row["total"])]
            )


def read_training_log(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "batch") else float(v)) for k, v in r.items()} for r in rows]
