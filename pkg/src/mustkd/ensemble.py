"""Teacher weighting strategies and posterior fusion.

Every strategy reduces to a (T, K) matrix of per-frame teacher weights whose
rows sum to one; fusion is the frame-wise convex combination under those
weights. Selection strategies (FWM, ES, ST) are one-hot rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .posteriors import ROW_SUM_TOL, PosteriorSequence

KINDS = ("ta", "fwm", "es", "saw", "ftw", "st")
FUSION_KINDS = ("ta", "fwm", "es", "saw", "ftw")


@dataclass(frozen=True, eq=False)
class TeacherOutputs:
    """Aligned soft-label sequences from K teachers, in a fixed teacher order."""

    teachers: tuple[tuple[str, PosteriorSequence], ...]

    def __post_init__(self):
        teachers = tuple(self.teachers)
        if not teachers:
            raise ValueError("need at least one teacher")
        ids = [t for t, _ in teachers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate teacher ids: {ids}")
        shape = teachers[0][1].frames.shape
        for tid, seq in teachers[1:]:
            if seq.frames.shape != shape:
                raise ValueError(f"teacher {tid} has shape {seq.frames.shape}, expected {shape}")
        object.__setattr__(self, "teachers", teachers)

    @classmethod
    def from_dict(cls, outputs: Mapping[str, PosteriorSequence]) -> "TeacherOutputs":
        return cls(tuple(outputs.items()))

    @property
    def ids(self) -> list[str]:
        return [t for t, _ in self.teachers]

    @property
    def k(self) -> int:
        return len(self.teachers)

    def stack(self) -> np.ndarray:
        """(K, T, d) array of teacher posteriors."""
        return np.stack([s.frames for _, s in self.teachers])

    def confidences(self) -> np.ndarray:
        """Per-teacher mean over frames of the maximum posterior."""
        return np.array([s.frame_max().mean() for _, s in self.teachers])


@dataclass(frozen=True)
class WeightingStrategy:
    kind: str
    tau: float = 10.0
    fixed_weights: tuple[float, ...] | None = None
    # ST only: mapping accuracy of each teacher for this target language
    accuracies: Mapping[str, float] | None = field(default=None, hash=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.kind == "ftw":
            if self.fixed_weights is None:
                raise ValueError("ftw needs fixed_weights")
            check_weights(self.fixed_weights)
            object.__setattr__(self, "fixed_weights", tuple(float(w) for w in self.fixed_weights))
        if self.kind == "st" and not self.accuracies:
            raise ValueError("st needs a mapping accuracy table")


def check_weights(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"weights must be finite and non-negative: {w.tolist()}")
    if abs(w.sum() - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"weights sum to {w.sum()!r}, not 1")
    return w


def weights_ta(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("need at least one teacher")
    return np.full(k, 1.0 / k)


def saw_from_confidences(mu: Sequence[float], tau: float) -> np.ndarray:
    """``tau**mu_k / sum_j tau**mu_j``, evaluated as a softmax of ``mu * ln(tau)``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = np.asarray(mu, dtype=np.float64) * np.log(tau)
    e = np.exp(z - z.max())
    return e / e.sum()


def weights_saw(outputs: TeacherOutputs, tau: float = 10.0) -> np.ndarray:
    return saw_from_confidences(outputs.confidences(), tau)


def select_es(outputs: TeacherOutputs) -> str:
    """Teacher with the highest mean frame-max posterior (first on ties)."""
    return outputs.ids[int(np.argmax(outputs.confidences()))]


def fwm_choices(outputs: TeacherOutputs) -> np.ndarray:
    """Index of the most confident teacher at every frame (first on ties)."""
    return np.argmax(np.stack([s.frame_max() for _, s in outputs.teachers]), axis=0)


def select_fwm(outputs: TeacherOutputs) -> PosteriorSequence:
    stacked = outputs.stack()
    choice = fwm_choices(outputs)
    frames = stacked[choice, np.arange(stacked.shape[1])]
    return PosteriorSequence(frames, outputs.teachers[0][1].language_id)


def select_st(accuracy_table: Mapping[str, float]) -> str:
    """Source with the best mapping accuracy; ties go to the smallest tag."""
    if not accuracy_table:
        raise ValueError("empty accuracy table")
    return min(accuracy_table, key=lambda s: (-accuracy_table[s], s))


def _one_hot(k: int, index: int) -> np.ndarray:
    w = np.zeros(k)
    w[index] = 1.0
    return w


def frame_weights(outputs: TeacherOutputs, strategy: WeightingStrategy) -> np.ndarray:
    """(T, K) teacher weights that `strategy` assigns to this utterance."""
    k = outputs.k
    n_frames = outputs.teachers[0][1].num_frames
    kind = strategy.kind
    if kind == "fwm":
        return np.eye(k)[fwm_choices(outputs)]
    if kind == "ta":
        w = weights_ta(k)
    elif kind == "saw":
        w = weights_saw(outputs, strategy.tau)
    elif kind == "es":
        w = _one_hot(k, outputs.ids.index(select_es(outputs)))
    elif kind == "ftw":
        if len(strategy.fixed_weights) != k:
            raise ValueError(f"ftw has {len(strategy.fixed_weights)} weights for {k} teachers")
        w = np.asarray(strategy.fixed_weights)
    else:
        table = {t: strategy.accuracies[t] for t in outputs.ids if t in strategy.accuracies}
        w = _one_hot(k, outputs.ids.index(select_st(table)))
    return np.tile(w, (n_frames, 1))


def fuse(outputs: TeacherOutputs, weights: Sequence[float] | np.ndarray) -> PosteriorSequence:
    """Convex combination of the teachers, with K weights or (T, K) per-frame weights."""
    w = np.asarray(weights, dtype=np.float64)
    stacked = outputs.stack()
    if w.ndim == 1:
        if w.size != outputs.k:
            raise ValueError(f"{w.size} weights for {outputs.k} teachers")
        check_weights(w)
        fused = np.tensordot(w, stacked, axes=1)
    else:
        if w.shape != (stacked.shape[1], outputs.k):
            raise ValueError(f"frame weights have shape {w.shape}, expected {(stacked.shape[1], outputs.k)}")
        for row in w:
            check_weights(row)
        fused = np.einsum("tk,ktd->td", w, stacked)
    return PosteriorSequence(fused, outputs.teachers[0][1].language_id)


def apply_strategy(outputs: TeacherOutputs, strategy: WeightingStrategy) -> PosteriorSequence:
    return fuse(outputs, frame_weights(outputs, strategy))
