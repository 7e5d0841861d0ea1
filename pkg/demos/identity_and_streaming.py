"""Unit gains reproduce the input, and chunked inference matches whole-clip inference.

Run: python demos/identity_and_streaming.py
"""

import numpy as np

from upn import toy
from upn.conditioning import make_condition, sample_schedule
from upn.dsp import extract_features
from upn.net import NetConfig, forward, init_params
from upn.postproc import EnhancerOutput, compensate_delay, synthesize

speaker = toy.make_speakers(8)[3]
clip = toy.make_clip(speaker, 4.0, seed=1)
feats, spec, periods = extract_features(clip, return_spectra=True)

# gains of one and zero comb strength leave the signal untouched, 30 ms late
y = synthesize(spec, EnhancerOutput.constant(len(feats)), periods)
est, ref = compensate_delay(y, clip)
print(f"identity SNR: {10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2)):.1f} dB")

# an untrained network is enough to show the streaming contract
params = init_params(NetConfig(cond_dim=33), seed=0)
z = np.random.default_rng(0).standard_normal(32)
cond = make_condition(z / np.linalg.norm(z), sample_schedule(len(feats), rng_seed=0).q)
whole, _ = forward(params, feats, cond)
state, gains = None, []
for start in range(0, len(feats), 10):
    out, state = forward(params, feats[start:start + 10], cond[start:start + 10], state)
    gains.append(out.gains)
print("chunked == whole:", np.array_equal(np.concatenate(gains), whole.gains))
