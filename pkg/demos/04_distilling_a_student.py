"""Train a low-resource student with and without teacher soft labels.

Both runs share the seed, data and schedule; only the distillation weight
differs. The per-batch log written for the distilled run carries every loss
component, so the logged total can be recomputed by hand. Takes about twenty
seconds. A single seed says little about which model is better; the acceptance
tests compare the two over ten seeds.
"""

import tempfile
from pathlib import Path

from mustkd.asr import AsrHyper, Vocab, decode, train_asr
from mustkd.distill import DistillConfig, TeacherPipeline, must_total_loss, read_training_log, train_student
from mustkd.ensemble import WeightingStrategy
from mustkd.mapping import MesdHyper, mapping_accuracy, train_mesd
from mustkd.metrics import cer
from mustkd.synth import FamilyConfig, generate_corpus, generate_family

config = FamilyConfig(["la", "lb", "lc"], [[1, 0.9, 0.3], [0.9, 1, 0.3], [0.3, 0.3, 1]], [8, 8, 8], seed=4)
specs = {s.language_id: s for s in generate_family(config)}
vocab = {k: Vocab(tuple(s.characters)) for k, s in specs.items()}
low = generate_corpus(specs["la"], 150, seed=0)
dev = generate_corpus(specs["la"], 40, seed=10, prefix="dev")
evals = generate_corpus(specs["la"], 60, seed=11, prefix="eval")

sources = {k: train_asr(generate_corpus(specs[k], 400, seed=i + 1), vocab[k], AsrHyper(epochs=20, hidden=24, embed=8, seed=4))
           for i, k in enumerate(("lb", "lc"))}
low_hyper = AsrHyper(epochs=60, hidden=24, embed=8, seed=4)
mono = train_asr(low, vocab["la"], low_hyper)
mapping = train_mesd(mono, list(sources.values()), low, MesdHyper(epochs=60, hidden=24, seed=4))
accuracy = {k: mapping_accuracy(mapping, k, mono, m, dev).ratio for k, m in sources.items()}
print("mapping accuracy per source:", {k: round(v, 3) for k, v in accuracy.items()})

pipes = [TeacherPipeline(m, mapping, k, "la") for k, m in sources.items()]
strategy = WeightingStrategy("st", accuracies=accuracy)
log = Path(tempfile.mkdtemp()) / "student.csv"
student = train_student(low, vocab["la"], pipes, DistillConfig(lam=0.5, strategy=strategy, hyper=low_hyper), log)
print("teacher invocations:", {p.teacher_id: p.calls for p in pipes})

refs = [u.transcript for u in evals]
for name, model in (("mono", mono), ("student", student)):
    print(f"{name:8s} eval CER {cer([decode(model, u) for u in evals], refs).cer:.3f}")

rows = read_training_log(log)
worst = max(abs(must_total_loss(r["l_ctc"], r["l_ce"], r["l_kd"], r["alpha"], r["lambda"]) - r["total"]) for r in rows)
print(f"{len(rows)} logged batches; largest gap between logged and recomputed total: {worst:.1e}")
