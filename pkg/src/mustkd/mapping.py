"""Multi-encoder single-decoder (MESD) posterior mapping.

One bidirectional encoder per source language reads that language's ASR
posteriors; a language switch hands the chosen encoder's states to a single
bidirectional decoder that emits distributions over the target vocabulary.
Training minimizes frame-wise KL against the target ASR's own posteriors.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .asr import AsrModel, batch_frame_posteriors, check_corpus
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint, write_metadata
from .ctc import log_softmax as np_log_softmax
from .posteriors import PosteriorSequence, check_aligned, kl_divergence
from .synth import Utterance

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MappingAccuracy:
    correctly_mapped_frames: int
    total_frames: int

    def __post_init__(self):
        if self.total_frames < 1:
            raise ValueError("mapping accuracy needs at least one frame")

    @property
    def ratio(self) -> float:
        return self.correctly_mapped_frames / self.total_frames


@dataclass
class MesdHyper:
    epochs: int = 20
    lr: float = 0.5
    hidden: int = 32
    batch_size: int = 16
    clip: float = 5.0
    rank_weighting: bool = True
    seed: int = 0


@dataclass(eq=False)
class MesdModel:
    target_language: str
    target_dim: int
    source_dims: dict[str, int]
    hidden: int
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def source_languages(self) -> list[str]:
        return list(self.source_dims)

    def metadata(self) -> dict:
        return {
            "kind": "mesd",
            "target_language": self.target_language,
            "target_dim": self.target_dim,
            "source_languages": self.source_languages,
            "source_dims": [self.source_dims[s] for s in self.source_languages],
            "hidden": self.hidden,
        }

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.params)
        write_metadata(path, self.metadata())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MesdModel":
        meta = read_metadata(path)
        dims = dict(zip(meta["source_languages"], meta["source_dims"]))
        return cls(meta["target_language"], meta["target_dim"], dims, meta["hidden"], load_checkpoint(path))


def init_mesd(target_language: str, target_dim: int, source_dims: dict[str, int], hidden: int = 32, seed: int = 0) -> MesdModel:
    rng = np.random.default_rng(seed)
    params = {}
    for lang, dim in source_dims.items():
        params.update(nn.birnn_params(rng, f"enc.{lang}", dim, hidden))
    params.update(nn.birnn_params(rng, "dec", 2 * hidden, hidden))
    params.update(nn.linear_params(rng, "out", 2 * hidden, target_dim))
    return MesdModel(target_language, target_dim, dict(source_dims), hidden, params)


def mesd_logits(p, source_language: str, posts: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """Route (B, T, d_S) posteriors through the named encoder and the shared decoder."""
    enc = nn.birnn(p, f"enc.{source_language}", ad.Tensor(posts), mask)
    return nn.linear(p, "out", nn.birnn(p, "dec", enc, mask))


# ------------------------------------------------------------------- losses


def kl_frame_loss(target: PosteriorSequence, mapped: PosteriorSequence) -> float:
    """Sum over frames of KL(target || mapped)."""
    check_aligned(target, mapped)
    return float(kl_divergence(target.frames, mapped.frames).sum())


def rank_sum_weights(losses: Sequence[float]) -> list[float]:
    """Rank-sum weights: the r-th largest loss gets ``2(K+1-r) / (K(K+1))``.

    Equal losses are ranked by position, lower index first.
    """
    k = len(losses)
    if k < 1:
        raise ValueError("need at least one loss")
    order = sorted(range(k), key=lambda i: (-losses[i], i))
    weights = [0.0] * k
    for rank, i in enumerate(order, start=1):
        weights[i] = 2.0 * (k + 1 - rank) / (k * (k + 1))
    return weights


def _neg_entropy(p: np.ndarray) -> np.ndarray:
    """sum_c p log p per frame with 0 log 0 := 0."""
    return np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0).sum(axis=-1)


def pair_kl(logits: ad.Tensor, target: np.ndarray, mask: np.ndarray, lengths: np.ndarray) -> ad.Tensor:
    """Mean over utterances of (sum over frames of KL(target || softmax(logits))) / T."""
    cross = (ad.log_softmax(logits) * (target * mask[:, :, None])).sum(axis=(1, 2))
    const = (_neg_entropy(target) * mask).sum(axis=1)
    return ad.mean((const - cross) * (1.0 / lengths))


# ----------------------------------------------------------------- training


def _aligned_streams(target_asr: AsrModel, source_asrs: Sequence[AsrModel], utts: Sequence[Utterance]):
    p_target = [p.frames for p in batch_frame_posteriors(target_asr, utts)]
    streams = {}
    for asr in source_asrs:
        posts = [p.frames for p in batch_frame_posteriors(asr, utts)]
        for u, a, b in zip(utts, p_target, posts):
            if a.shape[0] != b.shape[0]:
                raise ValueError(
                    f"{u.utt_id}: {asr.language_id} posteriors have {b.shape[0]} frames, target has {a.shape[0]}"
                )
        streams[asr.language_id] = posts
    return p_target, streams


def train_mesd(
    target_asr: AsrModel,
    source_asrs: Sequence[AsrModel],
    utts: Sequence[Utterance],
    hyper: MesdHyper | None = None,
) -> MesdModel:
    """Train one mapping model for the target language against frozen ASRs.

    Each batch yields one KL loss per source encoder; the losses are combined
    with rank-sum weights recomputed from that batch (or a plain mean when
    ``rank_weighting`` is off). The ASR models are only read.
    """
    hyper = hyper or MesdHyper()
    if not source_asrs:
        raise ValueError("need at least one source ASR")
    lang = check_corpus(utts)
    if lang != target_asr.language_id:
        raise ValueError(f"corpus language {lang} differs from target ASR {target_asr.language_id}")
    p_target, streams = _aligned_streams(target_asr, source_asrs, utts)
    sources = [a.language_id for a in source_asrs]
    model = init_mesd(lang, target_asr.dim, {a.language_id: a.dim for a in source_asrs}, hyper.hidden, hyper.seed)
    n_src = len(sources)
    shuffle = np.random.default_rng(hyper.seed + 1)
    for epoch in range(hyper.epochs):
        order = shuffle.permutation(len(utts))
        epoch_total = 0.0
        for bi, idx in enumerate(nn.chunks(order, hyper.batch_size)):
            target, mask, lengths = nn.pad([p_target[i] for i in idx])
            inputs = {s: nn.pad([streams[s][i] for i in idx])[0] for s in sources}
            record = {}

            def build(p, _inputs, target=target, mask=mask, lengths=lengths, inputs=inputs, record=record):
                losses = [pair_kl(mesd_logits(p, s, inputs[s], mask), target, mask, lengths) for s in sources]
                values = [float(l.data) for l in losses]
                if hyper.rank_weighting:
                    weights = rank_sum_weights(values)
                else:
                    weights = [1.0 / n_src] * n_src
                record.update(pair_losses=values, weights=weights)
                total = losses[0] * weights[0]
                for loss, w in zip(losses[1:], weights[1:]):
                    total = total + loss * w
                return total

            graph = ad.Graph(build, model.params)
            total = float(graph.forward())
            nn.sgd_step(model.params, graph.backward(), hyper.lr, hyper.clip)
            model.history.append({"epoch": epoch, "batch": bi, **record, "total": total})
            epoch_total += total
        logger.info("mesd %s epoch %d loss %.4f", lang, epoch, epoch_total / (bi + 1))
    return model


# ---------------------------------------------------------------- inference


def batch_map_posteriors(
    model: MesdModel, source_language: str, posts: Sequence[PosteriorSequence], batch_size: int = 64
) -> list[PosteriorSequence]:
    if source_language not in model.source_dims:
        raise KeyError(f"no encoder for source language {source_language!r}")
    dim = model.source_dims[source_language]
    out = []
    for start in range(0, len(posts), batch_size):
        group = posts[start : start + batch_size]
        for ps in group:
            if ps.dim != dim:
                raise ValueError(f"{source_language} encoder expects {dim}-dim posteriors, got {ps.dim}")
        x, mask, lengths = nn.pad([ps.frames for ps in group])
        logp = np_log_softmax(mesd_logits(model.params, source_language, x, mask).data)
        for b in range(len(group)):
            probs = np.exp(logp[b, : lengths[b]])
            out.append(PosteriorSequence(probs / probs.sum(axis=1, keepdims=True), model.target_language))
    return out


def map_posteriors(model: MesdModel, source_language: str, source_posts: PosteriorSequence) -> PosteriorSequence:
    """Translate one source-language posterior sequence into the target vocabulary."""
    return batch_map_posteriors(model, source_language, [source_posts])[0]


def argmax_agreement(a: Sequence[PosteriorSequence], b: Sequence[PosteriorSequence]) -> MappingAccuracy:
    """Frames whose most probable class agrees (lowest index wins ties), over paired sequences."""
    correct = total = 0
    for x, y in zip(a, b):
        n = min(x.num_frames, y.num_frames)
        correct += int(np.sum(x.argmax()[:n] == y.argmax()[:n]))
        total += n
    return MappingAccuracy(correct, total)


def mapping_accuracy(
    model: MesdModel,
    source_language: str,
    target_asr: AsrModel,
    source_asr: AsrModel,
    utts: Sequence[Utterance],
) -> MappingAccuracy:
    """Fraction of frames where the mapped and target posteriors share their argmax."""
    if not utts:
        raise ValueError("empty corpus")
    target = batch_frame_posteriors(target_asr, utts)
    mapped = batch_map_posteriors(model, source_language, batch_frame_posteriors(source_asr, utts))
    return argmax_agreement(target, mapped)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("a derangement needs at least two items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shuffled_pair_chance(
    model: MesdModel,
    source_language: str,
    target_asr: AsrModel,
    source_asr: AsrModel,
    utts: Sequence[Utterance],
    seed: int = 0,
) -> float:
    """Argmax agreement when mapped posteriors are paired with a different utterance's targets.

    This is the agreement a mapping reaches with no utterance-specific
    information (frame-class priors only); frames beyond the shorter sequence
    are dropped.
    """
    target = batch_frame_posteriors(target_asr, utts)
    mapped = batch_map_posteriors(model, source_language, batch_frame_posteriors(source_asr, utts))
    perm = derangement(len(utts), np.random.default_rng(seed))
    return argmax_agreement([target[j] for j in perm], mapped).ratio
