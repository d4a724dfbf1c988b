"""Turn source-language recognisers into teachers for a target language.

A source model's posteriors live in the wrong alphabet. A mapping model
learns to translate them into the target's alphabet, and the pair then acts
as a teacher. This script trains everything at toy scale (a few seconds),
reports how well each mapping agrees with the target model, and decodes the
fused teacher outputs under every weighting strategy.
"""

from mustkd.asr import AsrHyper, Vocab, greedy_ctc_decode, train_asr
from mustkd.distill import TeacherPipeline
from mustkd.ensemble import FUSION_KINDS, TeacherOutputs, WeightingStrategy, apply_strategy
from mustkd.mapping import MesdHyper, mapping_accuracy, shuffled_pair_chance, train_mesd
from mustkd.metrics import cer
from mustkd.synth import FamilyConfig, generate_corpus, generate_family

config = FamilyConfig(["la", "lb", "lc"], [[1, 0.9, 0.3], [0.9, 1, 0.3], [0.3, 0.3, 1]], [8, 8, 8], seed=4)
specs = {s.language_id: s for s in generate_family(config)}
vocab = {k: Vocab(tuple(s.characters)) for k, s in specs.items()}
train = {k: generate_corpus(s, 400, seed=i) for i, (k, s) in enumerate(specs.items())}
low = train["la"][:150]
dev = generate_corpus(specs["la"], 40, seed=10, prefix="dev")

hyper = AsrHyper(epochs=20, hidden=24, embed=8, seed=4)
sources = {k: train_asr(train[k], vocab[k], hyper) for k in ("lb", "lc")}
target = train_asr(low, vocab["la"], AsrHyper(epochs=60, hidden=24, embed=8, seed=4))
mapping = train_mesd(target, list(sources.values()), low, MesdHyper(epochs=60, hidden=24, seed=4))

for k, model in sources.items():
    acc = mapping_accuracy(mapping, k, target, model, dev)
    chance = shuffled_pair_chance(mapping, k, target, model, dev)
    print(f"{k} -> la: {acc.correctly_mapped_frames}/{acc.total_frames} frames agree ({acc.ratio:.3f}; chance {chance:.3f})")

pipes = [TeacherPipeline(m, mapping, k, "la") for k, m in sources.items()]
labels = [p.soft_labels(dev) for p in pipes]
refs = [u.transcript for u in dev]
strategies = {k: WeightingStrategy(k) for k in FUSION_KINDS if k != "ftw"}
strategies["ftw"] = WeightingStrategy("ftw", fixed_weights=(0.8, 0.2))
print("\ngreedy CER of fused teacher outputs on la:")
for name, strategy in strategies.items():
    hyps = [
        greedy_ctc_decode(apply_strategy(TeacherOutputs(tuple((p.teacher_id, labels[i][n]) for i, p in enumerate(pipes))), strategy), vocab["la"])
        for n in range(len(dev))
    ]
    print(f"  {name:4s} {cer(hyps, refs).cer:.3f}")
