"""Walk through the autodiff engine and the CTC loss built on it.

Run with ``python3 demos/01_gradients_and_ctc.py``; it takes a second or two.
"""

import itertools

import numpy as np

from mustkd import autodiff as ad
from mustkd.ctc import ctc_loss

rng = np.random.default_rng(0)

# A graph is a function of named parameters. Gradients come from one reverse sweep.
graph = ad.Graph(lambda p, _: ad.tanh(p["w"] @ p["x"]).sum(), {"w": rng.normal(size=(3, 4)), "x": rng.normal(size=4)})
print("f(w, x) =", float(graph.forward()))
print("df/dx   =", np.round(graph.backward()["x"], 4))
print("relative error against central differences:", f"{ad.grad_check(graph):.1e}")

# CTC sums over every frame-level path that collapses to the target.
# For three frames we can list those paths and compare.
logits = rng.normal(size=(3, 3))  # two characters plus the blank (index 2)
target = [0, 1]
loss, grad = ctc_loss(logits, target)
probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)


def collapse(path):
    out = [k for k, _ in itertools.groupby(path)]
    return [k for k in out if k != 2]


paths = [p for p in itertools.product(range(3), repeat=3) if collapse(p) == target]
print("\npaths that spell the target:", paths)
brute = -np.log(sum(np.prod(probs[np.arange(3), p]) for p in paths))
print(f"forward-backward loss {loss:.12f}")
print(f"enumerated loss       {brute:.12f}")
print("gradient rows sum to zero:", np.allclose(grad.sum(axis=1), 0.0))
