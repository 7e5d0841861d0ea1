"""Train a small personalised/non-personalised model on the toy corpus and compare modes.

Run: python demos/desk_experiment.py [epochs]
A handful of epochs takes a few minutes; the acceptance run uses a few hundred.
"""

import sys

import numpy as np

from upn.desk import build_desk
from upn.harness import enhance_aligned, si_sdr
from upn.trainer import TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
desk = build_desk(seed=0, segments_per_speaker=4, n_test=8)
result = train(desk.train_set, TrainConfig(epochs=epochs))
params = result.best_params

print(f"{'mixture':<8} {'pse->target':>12} {'nse->target':>12} {'nse->all':>9} {'pse->all':>9}")
for k, (spk, tri) in enumerate(desk.test_set):
    z = desk.enroll_embeddings[spk]
    pse = enhance_aligned(params, tri.mixture, z, "pse")
    nse = enhance_aligned(params, tri.mixture, None, "nse")
    t, a = tri.personalized_ref.samples, tri.non_personalized_ref.samples
    print(f"{k:<8} {si_sdr(pse, t):12.2f} {si_sdr(nse, t):12.2f} {si_sdr(nse, a):9.2f} {si_sdr(pse, a):9.2f}")
print(f"best validation loss {result.best_val:.4f} after {epochs} epochs")
