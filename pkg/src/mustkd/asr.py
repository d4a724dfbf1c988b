"""Toy hybrid CTC/attention recognizer.

Encoder: one bidirectional Elman layer over the input frames (no
subsampling, so every model emits exactly one posterior row per frame).
CTC head: affine projection of the encoder states. Decoder: one Elman layer
over embedded previous tokens with dot-product attention on the encoder
states. The blank index doubles as the decoder's start/end symbol.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .checkpoint import load_checkpoint, read_metadata, save_checkpoint, write_metadata
from .ctc import log_softmax as np_log_softmax
from .posteriors import PosteriorSequence
from .synth import Utterance

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9


@dataclass(frozen=True)
class Vocab:
    characters: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("vocabulary characters must be unique")

    @property
    def blank_index(self) -> int:
        return len(self.characters)

    @property
    def dim(self) -> int:
        return len(self.characters) + 1

    def encode(self, text: str) -> list[int]:
        lookup = {c: i for i, c in enumerate(self.characters)}
        try:
            return [lookup[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, indices: Sequence[int]) -> str:
        return "".join(self.characters[i] for i in indices)


@dataclass
class AsrHyper:
    alpha: float = 0.3
    epochs: int = 20
    lr: float = 0.5
    hidden: int = 32
    embed: int = 16
    batch_size: int = 16
    clip: float = 5.0
    seed: int = 0


@dataclass(eq=False)
class AsrModel:
    language_id: str
    vocab: Vocab
    feat_dim: int
    hidden: int
    embed: int
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.vocab.dim

    def metadata(self) -> dict:
        return {
            "kind": "asr",
            "language_id": self.language_id,
            "characters": list(self.vocab.characters),
            "feat_dim": self.feat_dim,
            "hidden": self.hidden,
            "embed": self.embed,
            "dim": self.dim,
        }

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.params)
        write_metadata(path, self.metadata())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AsrModel":
        meta = read_metadata(path)
        return cls(
            meta["language_id"],
            Vocab(tuple(meta["characters"])),
            meta["feat_dim"],
            meta["hidden"],
            meta["embed"],
            load_checkpoint(path),
        )


def init_asr(language_id: str, vocab: Vocab, feat_dim: int, hidden: int = 32, embed: int = 16, seed: int = 0) -> AsrModel:
    rng = np.random.default_rng(seed)
    d, h2 = vocab.dim, 2 * hidden
    params = {}
    params.update(nn.birnn_params(rng, "enc", feat_dim, hidden))
    # Feature dimensions never exercised in training keep their initial
    # weights; starting from zero keeps them silent on foreign inputs.
    params["enc.fw.Wx"][:] = 0.0
    params["enc.bw.Wx"][:] = 0.0
    params.update(nn.linear_params(rng, "ctc", h2, d))
    params["dec.emb"] = nn.init_uniform(rng, (d, embed), embed)
    params.update(nn.rnn_params(rng, "dec.rnn", embed, h2))
    params.update(nn.linear_params(rng, "dec.comb", 2 * h2, h2))
    params.update(nn.linear_params(rng, "dec.out", h2, d))
    return AsrModel(language_id, vocab, feat_dim, hidden, embed, params)


# ----------------------------------------------------------------- batched graph


@dataclass
class Batch:
    utts: list[Utterance]
    features: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    targets: list[list[int]]
    tokens_in: np.ndarray
    tokens_out: np.ndarray
    token_mask: np.ndarray
    token_counts: np.ndarray


def make_batch(utts: Sequence[Utterance], vocab: Vocab) -> Batch:
    feats, mask, lengths = nn.pad([u.features for u in utts])
    targets = [vocab.encode(u.transcript) for u in utts]
    sos = vocab.blank_index
    width = max(len(t) for t in targets) + 1
    tokens_in = np.full((len(utts), width), sos, dtype=np.int64)
    tokens_out = np.zeros((len(utts), width, vocab.dim))
    token_mask = np.zeros((len(utts), width))
    for b, tgt in enumerate(targets):
        tokens_in[b, 1 : len(tgt) + 1] = tgt
        seq_out = tgt + [sos]
        tokens_out[b, np.arange(len(seq_out)), seq_out] = 1.0
        token_mask[b, : len(seq_out)] = 1.0
    counts = np.array([len(t) + 1 for t in targets], dtype=np.float64)
    return Batch(list(utts), feats, mask, lengths, targets, tokens_in, tokens_out, token_mask, counts)


def encode(p, features: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    return nn.birnn(p, "enc", ad.Tensor(features), mask)


def ctc_logits(p, enc: ad.Tensor) -> ad.Tensor:
    return nn.linear(p, "ctc", enc)


def decoder_logits(p, enc: ad.Tensor, frame_mask: np.ndarray, tokens_in: np.ndarray, token_mask: np.ndarray) -> ad.Tensor:
    emb = ad.take_rows(p["dec.emb"], tokens_in)
    states = nn.rnn(p, "dec.rnn", emb, token_mask)
    scores = states @ ad.swap_last(enc) + (1.0 - frame_mask[:, None, :]) * MASK_BIAS
    context = ad.softmax(scores) @ enc
    comb = ad.tanh(nn.linear(p, "dec.comb", ad.concat([states, context], axis=-1)))
    return nn.linear(p, "dec.out", comb)


def batch_losses(p, batch: Batch):
    """Length-normalized CTC and decoder cross-entropy, averaged over the batch.

    Returns ``(l_ctc, l_ce, ctc_logits)``; CTC is divided by the frame count and
    cross-entropy by the token count (characters plus end symbol).
    """
    enc = encode(p, batch.features, batch.mask)
    logits = ctc_logits(p, enc)
    per_utt = ad.ctc_loss(logits, batch.targets, batch.lengths)
    l_ctc = ad.mean(per_utt * (1.0 / batch.lengths))
    dec = decoder_logits(p, enc, batch.mask, batch.tokens_in, batch.token_mask)
    picked = (ad.log_softmax(dec) * (batch.tokens_out * batch.token_mask[:, :, None])).sum(axis=(1, 2))
    l_ce = ad.mean(picked * (-1.0 / batch.token_counts))
    return l_ctc, l_ce, logits


# ---------------------------------------------------------------------- training

KdHook = Callable[[Batch, ad.Tensor], tuple[ad.Tensor, list[float]]]


def check_weights(alpha: float, lam: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda={lam} outside [0, 1]")


def fit(
    model: AsrModel,
    utts: Sequence[Utterance],
    hyper: AsrHyper,
    lam: float = 0.0,
    kd: KdHook | None = None,
) -> AsrModel:
    """SGD on ``alpha*l_ctc + (1-alpha)*(lam*l_kd + (1-lam)*l_ce)``, one row of history per batch.

    Without a `kd` hook the distillation term is the constant 0.
    """
    check_weights(hyper.alpha, lam)
    alpha = hyper.alpha
    shuffle = np.random.default_rng(hyper.seed + 1)
    for epoch in range(hyper.epochs):
        order = shuffle.permutation(len(utts))
        epoch_total = 0.0
        for bi, idx in enumerate(nn.chunks(order, hyper.batch_size)):
            batch = make_batch([utts[i] for i in idx], model.vocab)
            parts = {}

            def build(p, _inputs, batch=batch, parts=parts):
                l_ctc, l_ce, logits = batch_losses(p, batch)
                if kd is None:
                    l_kd, weights = ad.Tensor(0.0), []
                else:
                    l_kd, weights = kd(batch, logits)
                parts.update(l_ctc=l_ctc, l_ce=l_ce, l_kd=l_kd, weights=weights)
                return l_ctc * alpha + (l_kd * lam + l_ce * (1.0 - lam)) * (1.0 - alpha)

            graph = ad.Graph(build, model.params)
            total = float(graph.forward())
            grads = graph.backward()
            norm = nn.sgd_step(model.params, grads, hyper.lr, hyper.clip)
            model.history.append(
                {
                    "epoch": epoch,
                    "batch": bi,
                    "l_ctc": float(parts["l_ctc"].data),
                    "l_ce": float(parts["l_ce"].data),
                    "l_kd": float(parts["l_kd"].data),
                    "weights": list(parts["weights"]),
                    "total": total,
                    "grad_norm": norm,
                }
            )
            epoch_total += total
        logger.info("%s epoch %d loss %.4f", model.language_id, epoch, epoch_total / (bi + 1))
    return model


def check_corpus(utts: Sequence[Utterance]) -> str:
    if not utts:
        raise ValueError("empty corpus")
    langs = {u.language_id for u in utts}
    if len(langs) != 1:
        raise ValueError(f"corpus mixes languages: {sorted(langs)}")
    return langs.pop()


def train_asr(utts: Sequence[Utterance], vocab: Vocab, hyper: AsrHyper | None = None) -> AsrModel:
    """Train a monolingual model on ``alpha*L_CTC + (1-alpha)*L_seq``."""
    hyper = hyper or AsrHyper()
    lang = check_corpus(utts)
    model = init_asr(lang, vocab, utts[0].features.shape[1], hyper.hidden, hyper.embed, hyper.seed)
    return fit(model, utts, hyper)


# --------------------------------------------------------------------- inference


def _check_features(model: AsrModel, utt: Utterance) -> None:
    if utt.features.ndim != 2 or utt.features.shape[1] != model.feat_dim:
        raise ValueError(f"{utt.utt_id}: features have {utt.features.shape[-1]} columns, model expects {model.feat_dim}")


def frame_log_posteriors(model: AsrModel, utts: Sequence[Utterance], batch_size: int = 64) -> list[np.ndarray]:
    out = []
    for start in range(0, len(utts), batch_size):
        group = utts[start : start + batch_size]
        for u in group:
            _check_features(model, u)
        feats, mask, lengths = nn.pad([u.features for u in group])
        logits = ctc_logits(model.params, encode(model.params, feats, mask)).data
        logp = np_log_softmax(logits)
        out.extend(logp[b, : lengths[b]] for b in range(len(group)))
    return out


def _posteriors(logp: np.ndarray, language_id: str) -> PosteriorSequence:
    probs = np.exp(logp)
    return PosteriorSequence(probs / probs.sum(axis=1, keepdims=True), language_id)


def batch_frame_posteriors(model: AsrModel, utts: Sequence[Utterance], batch_size: int = 64) -> list[PosteriorSequence]:
    return [_posteriors(lp, model.language_id) for lp in frame_log_posteriors(model, utts, batch_size)]


def frame_posteriors(model: AsrModel, utt: Utterance) -> PosteriorSequence:
    """Softmax of the CTC-head logits, one row per input frame."""
    return batch_frame_posteriors(model, [utt])[0]


def greedy_ctc_decode(posteriors: PosteriorSequence | np.ndarray, vocab: Vocab) -> str:
    """Per-frame argmax, merge repeats, drop blanks."""
    frames = posteriors.frames if isinstance(posteriors, PosteriorSequence) else np.asarray(posteriors)
    best = np.argmax(frames, axis=1)
    out = []
    prev = -1
    for k in best:
        if k != prev and k != vocab.blank_index:
            out.append(int(k))
        prev = k
    return vocab.decode(out)


class _DecoderStep:
    """Numpy mirror of :func:`decoder_logits` for one utterance, one step at a time."""

    def __init__(self, params: dict[str, np.ndarray], enc: np.ndarray):
        self.p = params
        self.enc = enc

    def __call__(self, token: int, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.p
        x = p["dec.emb"][token]
        state = np.tanh(x @ p["dec.rnn.Wx"] + p["dec.rnn.b"] + state @ p["dec.rnn.Wh"])
        scores = self.enc @ state
        w = np.exp(scores - scores.max())
        context = (w / w.sum()) @ self.enc
        comb = np.tanh(np.concatenate([state, context]) @ p["dec.comb.W"] + p["dec.comb.b"])
        logits = comb @ p["dec.out.W"] + p["dec.out.b"]
        return np_log_softmax(logits), state


def _ctc_prefix_extend(logp: np.ndarray, r_n: np.ndarray, r_b: np.ndarray, last: int, empty: bool, blank: int):
    """Prefix probabilities of every one-character extension of a hypothesis.

    ``r_n``/``r_b`` hold log P(prefix, frames[:t+1]) ending in a label or a
    blank. Returns (psi, new_r_n, new_r_b) for all non-blank labels.
    """
    n_frames, dim = logp.shape
    labels = np.arange(dim - 1) if blank == dim - 1 else np.array([k for k in range(dim) if k != blank])
    emit = logp[:, labels]
    prev_total = np.logaddexp(r_n, r_b)
    phi = np.repeat(prev_total[:, None], len(labels), axis=1)
    same = labels == last
    phi[:, same] = r_b[:, None]
    new_n = np.full((n_frames, len(labels)), -np.inf)
    new_b = np.full((n_frames, len(labels)), -np.inf)
    if empty:
        new_n[0] = emit[0]
    psi = new_n[0].copy()
    for t in range(1, n_frames):
        new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + emit[t]
        new_b[t] = np.logaddexp(new_n[t - 1], new_b[t - 1]) + logp[t, blank]
        psi = np.logaddexp(psi, phi[t - 1] + emit[t])
    return labels, psi, new_n, new_b


def joint_beam_search(
    model: AsrModel, enc: np.ndarray, logp: np.ndarray, gamma: float, beam: int = 4, max_len: int | None = None
) -> list[int]:
    """Beam search maximizing ``gamma*log P_ctc(prefix) + (1-gamma)*log P_att(prefix)``."""
    vocab = model.vocab
    blank = vocab.blank_index
    n_frames = logp.shape[0]
    max_len = 2 * n_frames if max_len is None else max_len
    step = _DecoderStep(model.params, enc)
    r_b0 = np.cumsum(logp[:, blank])
    # (score, att, ctc_psi, prefix, dec_state, r_n, r_b)
    hyps = [(0.0, 0.0, 0.0, (), np.zeros(2 * model.hidden), np.full(n_frames, -np.inf), r_b0)]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len + 1):
        candidates = []
        for score, att, _psi, prefix, state, r_n, r_b in hyps:
            token = prefix[-1] if prefix else blank
            att_logp, new_state = step(token, state)
            end_score = (1.0 - gamma) * (att + att_logp[blank])
            if gamma > 0:
                end_score += gamma * float(np.logaddexp(r_n[-1], r_b[-1]))
            candidates.append((end_score, None, prefix, None, None, None, None))
            if len(prefix) >= max_len:
                continue
            if gamma > 0:
                labels, psi, new_n, new_b = _ctc_prefix_extend(
                    logp, r_n, r_b, prefix[-1] if prefix else -1, not prefix, blank
                )
            else:
                labels = np.arange(vocab.dim - 1)
                psi = np.zeros(len(labels))
                new_n = new_b = None
            for j, c in enumerate(labels):
                a = att + att_logp[c]
                s = gamma * psi[j] + (1.0 - gamma) * a
                candidates.append(
                    (s, a, prefix + (int(c),), new_state,
                     None if new_n is None else new_n[:, j], None if new_b is None else new_b[:, j], psi[j])
                )
        candidates.sort(key=lambda c: (-c[0], c[2]))
        hyps = []
        for cand in candidates[:beam]:
            if cand[1] is None:
                finished.append((cand[0], cand[2]))
            else:
                s, a, prefix, state, r_n, r_b, psi = cand
                if r_n is None:
                    r_n = r_b = np.full(n_frames, -np.inf)
                hyps.append((s, a, psi, prefix, state, r_n, r_b))
        if not hyps:
            break
        best_done = max((f[0] for f in finished), default=-np.inf)
        if best_done >= max(h[0] for h in hyps):
            break
    if finished:
        return list(max(finished, key=lambda f: (f[0], [-k for k in f[1]]))[1])
    return list(max(hyps, key=lambda h: h[0])[3])


def decode(model: AsrModel, utt: Utterance, gamma: float = 0.4, beam: int = 4, max_len: int | None = None) -> str:
    """Joint CTC/attention decoding; ``gamma=1`` is greedy CTC collapse."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma={gamma} outside [0, 1]")
    _check_features(model, utt)
    feats, mask, _ = nn.pad([utt.features])
    enc = encode(model.params, feats, mask)
    logp = np_log_softmax(ctc_logits(model.params, enc).data[0])
    if gamma == 1.0:
        return greedy_ctc_decode(np.exp(logp), model.vocab)
    return model.vocab.decode(joint_beam_search(model, enc.data[0], logp, gamma, beam, max_len))


def decode_corpus(model: AsrModel, utts: Sequence[Utterance], gamma: float = 0.4, beam: int = 4) -> list[str]:
    return [decode(model, u, gamma, beam) for u in utts]
