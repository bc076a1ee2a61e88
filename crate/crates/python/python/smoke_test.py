"""Quick check that the extension module loads and its main entry points work."""

import json
import math
import os
import tempfile

import udlm_py

post = udlm_py.posterior(z_t=1, x=0, t=0.6, s=0.3, n=4)
assert abs(sum(post) - 1.0) < 1e-12, post

guided = udlm_py.cfg([[0.7, 0.2, 0.1]], [[0.4, 0.4, 0.2]], 2.0)
assert max(range(3), key=lambda i: guided[0][i]) == 0, guided

seqs, labels = udlm_py.labeled_corpus(n=3, length=6, count=200, seed=1)
assert len(seqs) == len(labels) == 200

model = udlm_py.Model.train(seqs, 3, labels=labels, epochs=2, hidden=16, seed=0)
samples = model.sample(50, steps=16, guidance="cfg", gamma=2.0, label=1, seed=3)
assert len(samples) == 50 and all(len(s) == 6 for s in samples)
assert samples == model.sample(50, steps=16, guidance="cfg", gamma=2.0, label=1, seed=3)

nats, bpc = model.nelbo(seqs[0], steps=8, label=labels[0])
assert math.isfinite(nats) and nats > 0
js = udlm_py.kmer_divergence(samples, seqs, k=2)
assert 0.0 <= js <= 1.0

with tempfile.TemporaryDirectory() as d:
    path = os.path.join(d, "m.json")
    model.save(path)
    again = udlm_py.Model.load(path)
    assert again.nelbo(seqs[0], steps=8, label=labels[0]) == (nats, bpc)

report = json.loads(udlm_py.verify("posteriors", 0))
assert report["passed"], report

try:
    udlm_py.Model.train(["abz"], 3)
except ValueError:
    pass
else:
    raise AssertionError("out-of-vocabulary symbol accepted")

print(f"ok: nelbo {nats:.3f} nats, bpc {bpc:.3f}, 2-mer js {js:.4f}")
