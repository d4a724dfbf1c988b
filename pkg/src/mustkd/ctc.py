"""CTC loss by the log-space forward-backward recursion.

The blank symbol sits at the last index of the output dimension. Gradients
are taken with respect to the unnormalized logits (the log-softmax is part of
the loss).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

NEG_INF = -np.inf


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def required_frames(target: Sequence[int]) -> int:
    """Minimum number of frames a CTC alignment of `target` needs."""
    repeats = sum(1 for a, b in zip(target[:-1], target[1:]) if a == b)
    return len(target) + repeats


def _extend(targets, blank):
    max_len = max((len(t) for t in targets), default=0)
    n_states = 2 * max_len + 1
    ext = np.full((len(targets), n_states), blank, dtype=np.int64)
    skip = np.zeros((len(targets), n_states), dtype=bool)
    for b, tgt in enumerate(targets):
        tgt = np.asarray(tgt, dtype=np.int64)
        ext[b, 1 : 2 * len(tgt) : 2] = tgt
        if len(tgt) > 1:
            # state s=2i+1 may be entered from s-2 when the labels differ
            skip[b, 3 : 2 * len(tgt) : 2] = tgt[1:] != tgt[:-1]
    return ext, skip


def ctc_loss_batch(
    logits: np.ndarray,
    targets: Sequence[Sequence[int]],
    input_lengths: Sequence[int] | None = None,
    blank: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-utterance CTC negative log-likelihoods and their logit gradients.

    logits: (B, T, d). Frames at or beyond ``input_lengths[b]`` are ignored and
    receive zero gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n_batch, n_frames, dim = logits.shape
    blank = dim - 1 if blank is None else blank
    if input_lengths is None:
        input_lengths = [n_frames] * n_batch
    lengths = np.asarray(input_lengths, dtype=np.int64)
    for b, tgt in enumerate(targets):
        if any(int(k) < 0 or int(k) >= dim or int(k) == blank for k in tgt):
            raise ValueError(f"target {b} contains an index outside the label set")
        if not 1 <= lengths[b] <= n_frames:
            raise ValueError(f"input length {lengths[b]} out of range for utterance {b}")
        if required_frames(list(tgt)) > lengths[b]:
            raise ValueError(
                f"no valid alignment: target of length {len(tgt)} needs "
                f"{required_frames(list(tgt))} frames, utterance {b} has {lengths[b]}"
            )

    ext, skip = _extend(targets, blank)
    n_states = ext.shape[1]
    state_counts = np.array([2 * len(t) + 1 for t in targets])
    valid = np.arange(n_states)[None, :] < state_counts[:, None]

    logp = log_softmax(logits)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[:, None, :], (n_batch, n_frames, n_states)), axis=2)
    emit = np.where(valid[:, None, :], emit, NEG_INF)

    alpha = np.full((n_batch, n_frames, n_states), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if n_states > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, n_frames):
        prev = alpha[:, t - 1]
        acc = prev.copy()
        acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
        alpha[:, t] = acc + emit[:, t]

    rows = np.arange(n_batch)
    last = lengths - 1
    end = state_counts - 1
    ll = alpha[rows, last, end]
    has_two = state_counts > 1
    ll = np.where(has_two, np.logaddexp(ll, alpha[rows, last, np.maximum(end - 1, 0)]), ll)

    beta = np.full((n_batch, n_frames, n_states), NEG_INF)
    for t in range(n_frames - 1, -1, -1):
        init = np.full((n_batch, n_states), NEG_INF)
        init[rows, end] = emit[rows, t, end]
        init[rows[has_two], end[has_two] - 1] = emit[rows[has_two], t, end[has_two] - 1]
        if t < n_frames - 1:
            nxt = beta[:, t + 1]
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
            rec = acc + emit[:, t]
        else:
            rec = init
        beta[:, t] = np.where((t == last)[:, None], init, np.where((t < last)[:, None], rec, NEG_INF))

    if not np.all(np.isfinite(ll)):
        raise ValueError("no valid alignment")

    with np.errstate(invalid="ignore"):
        log_occ = alpha + beta - np.where(np.isfinite(emit), emit, 0.0) - ll[:, None, None]
    occ = np.exp(np.where(np.isfinite(log_occ), log_occ, NEG_INF))
    onehot = np.eye(dim)[ext] * valid[:, :, None]
    label_occ = np.einsum("bts,bsk->btk", occ, onehot)
    frame_mask = (np.arange(n_frames)[None, :] < lengths[:, None])[:, :, None]
    grad = (np.exp(logp) - label_occ) * frame_mask
    return -ll, grad


def ctc_loss(logits: np.ndarray, target: Sequence[int], blank: int | None = None) -> tuple[float, np.ndarray]:
    """CTC loss of one (T, d) logit matrix against a label index sequence.

    Returns ``(loss, gradient)`` where the gradient has the shape of `logits`.
    Raises ``ValueError`` when the target cannot be aligned to T frames.
    """
    logits = np.asarray(logits, dtype=np.float64)
    losses, grads = ctc_loss_batch(logits[None], [list(target)], blank=blank)
    return float(losses[0]), grads[0]
