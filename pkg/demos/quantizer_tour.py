"""
The two-layer stochastic quantizer
==================================

"""

import numpy as np
from rlfsq import quantizer as Q

# a latent frame has four dimensions; each passes through a sigmoid first
rq = Q.ResidualQuantizer()
z = np.array([-1.3, 0.0, 0.4, 2.2])
res = rq.quantize(z)
print("bounded   ", np.round(res.bounded, 4))
print("layer 1   ", res.idx1, "layer 2", res.idx2)
print("value     ", np.round(res.value, 4))
print("codes     ", res.codes, "->", rq.bits_per_frame, "bits per frame")

# the second layer refines the first: error falls by roughly the grid ratio
coarse = Q.dequantize(res.idx1, Q.LAYER1)
print("error, one layer ", np.abs(res.bounded - coarse).max())
print("error, two layers", np.abs(res.bounded - res.value).max())

# sampling: the policy over levels is softmax(-(b - g)^2 / tau)
rng = np.random.default_rng(0)
for tau in (1.0, 0.05, 0.01):
    draws = rq.quantize(np.broadcast_to(z, (5000, 4)), tau=tau, rng=rng)
    agree = np.mean(draws.idx1 == res.idx1)
    print(f"tau={tau:<5} layer-1 agreement with nearest level: {agree:.3f}")

# log-probabilities are exact, so they can drive a policy gradient
lp = rq.action_log_prob(res.bounded, res.idx1, res.idx2, 0.05)
print("log pi of the nearest action per dim:", np.round(lp, 3))
