"""Synthetic multilingual corpora with controlled acoustic overlap.

Each language draws its phoneme inventory from a shared pool of latent units.
A unit owns one prototype feature vector, so two languages that share a unit
share its acoustics exactly. Languages are written in disjoint Unicode scripts
by default, which is the situation where plain distillation cannot be applied.

The default ``"dense"`` layout draws every prototype over all feature
dimensions, so even unshared units resemble one another by chance. The
``"blocks"`` layout splits the dimensions into one block per language and
keeps a unit's prototype on the blocks of the languages that own it. A model
then sees only noise on the blocks of languages it shares no units with, and
overlap alone decides how much one language's posteriors reveal about
another's.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

FEATURE_MAGIC = b"MUSTFEAT"
FEATURE_VERSION = 1

# (first code point, number of usable letters) for each script
SCRIPTS = [
    (0x0061, 26),  # Latin
    (0x03B1, 25),  # Greek
    (0x0430, 32),  # Cyrillic
    (0x0561, 38),  # Armenian
    (0x05D0, 27),  # Hebrew
    (0x10D0, 33),  # Georgian
    (0x3041, 86),  # Hiragana
]


class InfeasibleOverlapError(ValueError):
    def __init__(self, pair: tuple[str, str], message: str):
        super().__init__(f"{pair[0]}/{pair[1]}: {message}")
        self.pair = pair


@dataclass
class FamilyConfig:
    language_ids: list[str]
    overlap: list[list[float]]
    inventory_sizes: list[int]
    feat_dim: int = 8
    seed: int = 0
    noise_std: float = 0.3
    duration_range: tuple[int, int] = (2, 4)
    prototype_scale: float = 1.0
    script_disjoint: bool = True
    layout: str = "dense"


@dataclass
class LanguageSpec:
    language_id: str
    phoneme_inventory: list[int]
    grapheme_map: dict[int, str]
    prototype_bank: dict[int, np.ndarray]
    durations: dict[int, tuple[int, int]]
    noise_std: float = 0.3

    @property
    def character_set(self) -> frozenset[str]:
        return frozenset(self.grapheme_map.values())

    @property
    def characters(self) -> list[str]:
        """Characters in inventory order; this order defines the model vocabulary."""
        return [self.grapheme_map[p] for p in self.phoneme_inventory]

    @property
    def feat_dim(self) -> int:
        return len(next(iter(self.prototype_bank.values())))


@dataclass(eq=False)
class Utterance:
    utt_id: str
    language_id: str
    features: np.ndarray
    transcript: str

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def shared_counts(config: FamilyConfig) -> np.ndarray:
    """Integer number of shared units required for every language pair."""
    n = len(config.language_ids)
    counts = np.zeros((n, n), dtype=np.int64)
    for i, j in itertools.combinations(range(n), 2):
        size = min(config.inventory_sizes[i], config.inventory_sizes[j])
        counts[i, j] = counts[j, i] = int(np.floor(config.overlap[i][j] * size + 0.5))
    return counts


def _validate(config: FamilyConfig) -> np.ndarray:
    ids = config.language_ids
    n = len(ids)
    if len(set(ids)) != n:
        raise ValueError("language ids must be unique")
    ov = np.asarray(config.overlap, dtype=np.float64)
    if ov.shape != (n, n) or len(config.inventory_sizes) != n:
        raise ValueError("overlap matrix and inventory sizes must match the number of languages")
    if any(s < 2 for s in config.inventory_sizes):
        raise ValueError("inventory sizes must be at least 2")
    for i, j in itertools.combinations(range(n), 2):
        if ov[i, j] != ov[j, i]:
            raise InfeasibleOverlapError((ids[i], ids[j]), "overlap matrix is not symmetric")
        if not 0.0 <= ov[i, j] <= 1.0:
            raise InfeasibleOverlapError((ids[i], ids[j]), f"overlap {ov[i, j]} outside [0, 1]")
    counts = shared_counts(config)
    inv = config.inventory_sizes
    # |A&B| + |A&C| - |A| <= |A&B&C| <= |B&C|
    for a, b, c in itertools.permutations(range(n), 3):
        if b < c and counts[a, b] + counts[a, c] - inv[a] > counts[b, c]:
            raise InfeasibleOverlapError(
                (ids[b], ids[c]),
                f"sharing {counts[a, b]} with {ids[a]}/{ids[b]} and {counts[a, c]} with {ids[a]}/{ids[c]} "
                f"forces more than the {counts[b, c]} units allowed",
            )
    return counts


def _region_counts(config: FamilyConfig, counts: np.ndarray) -> dict[tuple[int, ...], int]:
    """Sizes of the shared Venn regions realizing the pairwise counts exactly.

    Solved as a small integer program preferring units shared by few languages.
    """
    n = len(config.language_ids)
    subsets = [s for k in range(2, n + 1) for s in itertools.combinations(range(n), k)]
    if not subsets:
        return {}
    pairs = list(itertools.combinations(range(n), 2))
    a_eq = np.array([[1.0 if set(p) <= set(s) else 0.0 for s in subsets] for p in pairs])
    b_eq = np.array([counts[p] for p in pairs], dtype=np.float64)
    a_ub = np.array([[1.0 if i in s else 0.0 for s in subsets] for i in range(n)])
    b_ub = np.asarray(config.inventory_sizes, dtype=np.float64)
    cost = np.array([len(s) for s in subsets], dtype=np.float64)
    res = milp(
        cost,
        constraints=[LinearConstraint(a_eq, b_eq, b_eq), LinearConstraint(a_ub, -np.inf, b_ub)],
        integrality=np.ones(len(subsets)),
        bounds=Bounds(0, np.inf),
    )
    if res.x is None:
        i, j = max(pairs, key=lambda p: counts[p])
        ids = config.language_ids
        raise InfeasibleOverlapError((ids[i], ids[j]), "no assignment of shared units satisfies all overlaps")
    return {s: int(round(v)) for s, v in zip(subsets, res.x) if round(v) > 0}


def _prototypes(config: FamilyConfig, owners: list[list[int]], rng: np.random.Generator) -> np.ndarray:
    n = len(config.language_ids)
    pool = rng.normal(scale=config.prototype_scale, size=(len(owners), config.feat_dim))
    if config.layout == "dense":
        return pool
    if config.layout != "blocks":
        raise ValueError(f"unknown prototype layout {config.layout!r}")
    if config.feat_dim < n:
        raise ValueError("the blocks layout needs at least one feature dimension per language")
    blocks = np.array_split(np.arange(config.feat_dim), n)
    for u, langs in enumerate(owners):
        support = np.zeros(config.feat_dim, dtype=bool)
        for i in langs:
            support[blocks[i]] = True
        pool[u, ~support] = 0.0
    return pool


def generate_family(config: FamilyConfig) -> list[LanguageSpec]:
    """Build one :class:`LanguageSpec` per configured language.

    Pairwise overlaps are realized exactly: languages i and j share
    ``round(overlap[i][j] * min(size_i, size_j))`` units. Raises
    :class:`InfeasibleOverlapError` naming a pair when that is impossible.
    """
    counts = _validate(config)
    regions = _region_counts(config, counts)
    n = len(config.language_ids)
    if config.script_disjoint and n > len(SCRIPTS):
        raise ValueError(f"at most {len(SCRIPTS)} script-disjoint languages are supported")
    rng = np.random.default_rng(config.seed)

    members: list[list[int]] = [[] for _ in range(n)]
    next_unit = 0
    for subset in sorted(regions):
        for _ in range(regions[subset]):
            for i in subset:
                members[i].append(next_unit)
            next_unit += 1
    for i in range(n):
        while len(members[i]) < config.inventory_sizes[i]:
            members[i].append(next_unit)
            next_unit += 1
    owners = [[i for i in range(n) if u in set(members[i])] for u in range(next_unit)]
    pool = _prototypes(config, owners, rng)

    specs = []
    for i, lang in enumerate(config.language_ids):
        units = sorted(members[i])
        if config.script_disjoint:
            base, size = SCRIPTS[i]
            if len(units) > size:
                raise ValueError(f"{lang}: inventory of {len(units)} exceeds its script's {size} letters")
            graphemes = {u: chr(base + k) for k, u in enumerate(units)}
        else:
            if next_unit > 0x7F - 0x21:
                raise ValueError("too many units for a shared script")
            graphemes = {u: chr(0x21 + u) for u in units}
        specs.append(
            LanguageSpec(
                language_id=lang,
                phoneme_inventory=units,
                grapheme_map=graphemes,
                prototype_bank={u: pool[u].copy() for u in units},
                durations={u: tuple(config.duration_range) for u in units},
                noise_std=config.noise_std,
            )
        )
    return specs


def shared_units(a: LanguageSpec, b: LanguageSpec) -> set[int]:
    return set(a.phoneme_inventory) & set(b.phoneme_inventory)


def synthesize_utterance(spec: LanguageSpec, num_phonemes: int, seed: int, utt_id: str | None = None) -> Utterance:
    """Render a random phoneme string of the language as noisy prototype frames.

    Consecutive phonemes always differ. Each phoneme lasts a uniformly drawn
    number of frames from its duration range; every frame is its prototype
    plus white Gaussian noise of the language's noise level.
    """
    if num_phonemes < 1:
        raise ValueError("num_phonemes must be at least 1")
    rng = np.random.default_rng(seed)
    inventory = spec.phoneme_inventory
    seq = [int(rng.integers(len(inventory)))]
    for _ in range(num_phonemes - 1):
        step = int(rng.integers(1, len(inventory)))
        seq.append((seq[-1] + step) % len(inventory))
    units = [inventory[k] for k in seq]
    rows = []
    for u in units:
        lo, hi = spec.durations[u]
        dur = int(rng.integers(lo, hi + 1))
        frames = np.tile(spec.prototype_bank[u], (dur, 1))
        if spec.noise_std > 0:
            frames = frames + rng.normal(scale=spec.noise_std, size=frames.shape)
        rows.append(frames)
    return Utterance(
        utt_id=utt_id or f"{spec.language_id}-{seed}",
        language_id=spec.language_id,
        features=np.concatenate(rows, axis=0),
        transcript="".join(spec.grapheme_map[u] for u in units),
    )


def generate_corpus(
    spec: LanguageSpec,
    count: int,
    seed: int,
    length_range: tuple[int, int] = (4, 10),
    prefix: str | None = None,
) -> list[Utterance]:
    rng = np.random.default_rng(seed)
    prefix = prefix or spec.language_id
    lengths = rng.integers(length_range[0], length_range[1] + 1, size=count)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    return [
        synthesize_utterance(spec, int(n), int(s), utt_id=f"{prefix}-{i:05d}")
        for i, (n, s) in enumerate(zip(lengths, seeds))
    ]


# ---------------------------------------------------------------- file formats


def write_features(path: str | os.PathLike, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQQ", FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, n_frames, n_dims = struct.unpack_from("<IQQ", blob, 8)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    if len(blob) != 28 + 8 * n_frames * n_dims:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(blob, dtype="<f8", offset=28).reshape(n_frames, n_dims).astype(np.float64)


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    path: str
    transcript: str
    language_id: str
    num_frames: int


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    split: str
    root: Path = field(default=Path("."), compare=False)

    def __len__(self):
        return len(self.entries)

    @property
    def languages(self) -> set[str]:
        return {e.language_id for e in self.entries}

    def utterances(self) -> list[Utterance]:
        return [
            Utterance(e.utt_id, e.language_id, read_features(self.root / e.path), e.transcript)
            for e in self.entries
        ]


class ManifestError(ValueError):
    pass


def write_manifest(corpus: Sequence[Utterance], directory: str | os.PathLike, split: str = "train") -> CorpusManifest:
    """Write features under ``directory/<split>/`` and the manifest ``directory/<split>.tsv``.

    The manifest starts with a ``#split<TAB><name>`` header; every following
    line is ``utt_id, relative path, transcript, language_id, frame count``
    separated by tabs.
    """
    root = Path(directory)
    (root / split).mkdir(parents=True, exist_ok=True)
    seen = set()
    entries = []
    for utt in corpus:
        if utt.utt_id in seen:
            raise ManifestError(f"duplicate utt_id {utt.utt_id}")
        seen.add(utt.utt_id)
        rel = f"{split}/{utt.utt_id}.feat"
        write_features(root / rel, utt.features)
        entries.append(ManifestEntry(utt.utt_id, rel, utt.transcript, utt.language_id, utt.num_frames))
    lines = [f"#split\t{split}"]
    lines += ["\t".join([e.utt_id, e.path, e.transcript, e.language_id, str(e.num_frames)]) for e in entries]
    (root / f"{split}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return CorpusManifest(entries, split, root)


def read_manifest(path: str | os.PathLike) -> CorpusManifest:
    path = Path(path)
    root = path.parent
    split = path.stem
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        fields = line.split("\t")
        if fields[0] == "#split":
            if len(fields) != 2:
                raise ManifestError(f"{path}:{lineno}: malformed split header")
            split = fields[1]
            continue
        if len(fields) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        utt_id, rel, transcript, lang, frames = fields
        try:
            n_frames = int(frames)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad frame count {frames!r}") from None
        if utt_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate utt_id {utt_id}")
        seen.add(utt_id)
        feat = root / rel
        if not feat.exists():
            raise ManifestError(f"{path}:{lineno}: feature file for {utt_id} is missing ({rel})")
        with open(feat, "rb") as fh:
            header = fh.read(28)
        if len(header) < 28 or header[:8] != FEATURE_MAGIC or struct.unpack_from("<Q", header, 12)[0] != n_frames:
            raise ManifestError(f"{path}:{lineno}: feature file for {utt_id} does not hold {n_frames} frames")
        entries.append(ManifestEntry(utt_id, rel, transcript, lang, n_frames))
    return CorpusManifest(entries, split, root)


def subset(utterances: Iterable[Utterance], fraction: float) -> list[Utterance]:
    """Leading ``fraction`` of a corpus (at least one utterance)."""
    utts = list(utterances)
    return utts[: max(1, int(round(fraction * len(utts))))]
