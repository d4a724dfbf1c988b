"""Build a family of synthetic languages and look at what they share.

Two languages that share a latent unit produce identical acoustics for it,
yet write it with different letters.
"""

import numpy as np

from mustkd.synth import FamilyConfig, generate_corpus, generate_family, shared_units

config = FamilyConfig(
    language_ids=["la", "lb", "lc"],
    overlap=[[1.0, 0.8, 0.3], [0.8, 1.0, 0.3], [0.3, 0.3, 1.0]],
    inventory_sizes=[12, 12, 12],
    seed=0,
)
la, lb, lc = generate_family(config)
for spec in (la, lb, lc):
    print(spec.language_id, "writes", "".join(spec.characters))

common = sorted(shared_units(la, lb))
print(f"\nla and lb share {len(common)} of 12 units; la and lc share {len(shared_units(la, lc))}")

unit = common[0]
a_char, b_char = la.grapheme_map[unit], lb.grapheme_map[unit]
print(f"unit {unit} is '{a_char}' in la and '{b_char}' in lb")

utts = generate_corpus(la, 3, seed=1)
for u in utts:
    print(f"{u.utt_id}: '{u.transcript}' -> {u.features.shape[0]} frames of {u.features.shape[1]} features")
print("mean frame norm:", np.mean([np.linalg.norm(u.features, axis=1).mean() for u in utts]).round(3))
