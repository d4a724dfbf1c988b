"""Layer helpers shared by the ASR, mapping and student models."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def rnn_params(rng: np.random.Generator, prefix: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.Wx": init_uniform(rng, (n_in, hidden), n_in),
        f"{prefix}.Wh": init_uniform(rng, (hidden, hidden), hidden),
        f"{prefix}.b": init_uniform(rng, (hidden,), n_in),
    }


def birnn_params(rng: np.random.Generator, prefix: str, n_in: int, hidden: int) -> dict[str, np.ndarray]:
    return {**rnn_params(rng, f"{prefix}.fw", n_in, hidden), **rnn_params(rng, f"{prefix}.bw", n_in, hidden)}


def linear_params(rng: np.random.Generator, prefix: str, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.W": init_uniform(rng, (n_in, n_out), n_in),
        f"{prefix}.b": init_uniform(rng, (n_out,), n_in),
    }


def rnn(p: Mapping[str, ad.Tensor], prefix: str, x: ad.Tensor, mask=None, reverse: bool = False) -> ad.Tensor:
    pre = x @ p[f"{prefix}.Wx"] + p[f"{prefix}.b"]
    return ad.recurrence(pre, p[f"{prefix}.Wh"], mask, reverse=reverse)


def birnn(p: Mapping[str, ad.Tensor], prefix: str, x: ad.Tensor, mask=None) -> ad.Tensor:
    """Bidirectional Elman layer; forward and backward states concatenated on the last axis."""
    return ad.concat([rnn(p, f"{prefix}.fw", x, mask), rnn(p, f"{prefix}.bw", x, mask, reverse=True)], axis=-1)


def linear(p: Mapping[str, ad.Tensor], prefix: str, x: ad.Tensor) -> ad.Tensor:
    return x @ p[f"{prefix}.W"] + p[f"{prefix}.b"]


def pad(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack (T_i, F) arrays into (B, T_max, F) with a 0/1 frame mask and the lengths."""
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    width = arrays[0].shape[1]
    out = np.zeros((len(arrays), int(lengths.max()), width))
    for b, a in enumerate(arrays):
        out[b, : a.shape[0]] = a
    mask = (np.arange(out.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
    return out, mask, lengths


def chunks(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, len(order), size)]


def sgd_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float, max_norm: float) -> float:
    """In-place SGD with global gradient-norm clipping; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    scale = lr * (max_norm / norm if norm > max_norm else 1.0)
    for name, g in grads.items():
        params[name] = params[name] - scale * g
    return norm
