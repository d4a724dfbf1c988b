"""Per-frame posterior distributions, the currency passed between models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PosteriorSequence:
    """A T x d matrix of per-frame distributions over one language's output classes."""

    frames: np.ndarray
    language_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"posteriors must be a non-empty T x d matrix, got shape {frames.shape}")
        if np.any(frames < 0) or not np.all(np.isfinite(frames)):
            raise ValueError("posteriors must be finite and non-negative")
        sums = frames.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise ValueError(f"frame {bad[0]} sums to {sums[bad[0]]!r}, not 1")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def argmax(self) -> np.ndarray:
        # np.argmax returns the first maximal index: lowest-index tie rule
        return np.argmax(self.frames, axis=1)

    def frame_max(self) -> np.ndarray:
        return self.frames.max(axis=1)


def kl_divergence(target: np.ndarray, other: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Per-frame KL(target || other) with 0 log 0 := 0 and logs floored at `floor`."""
    target = np.asarray(target, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    log_t = np.log(np.maximum(target, floor))
    log_o = np.log(np.maximum(other, floor))
    terms = np.where(target > 0, target * (log_t - log_o), 0.0)
    return terms.sum(axis=-1)


def check_aligned(a: PosteriorSequence, b: PosteriorSequence) -> None:
    if a.frames.shape != b.frames.shape:
        raise ValueError(f"posterior shapes differ: {a.frames.shape} vs {b.frames.shape}")
