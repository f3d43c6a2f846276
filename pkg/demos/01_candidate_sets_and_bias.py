"""How big are the recorded candidate sets, and what does restricting the softmax cost?

For a few logit vectors of different sharpness we pick the dynamic top-K set,
then compare the restricted loss gradient with the full one. The gradient
error in logit space is governed entirely by the probability mass left
outside the set.
"""

import numpy as np

from logits_replay.loss import full_ce, gradient_bias, restricted_ce
from logits_replay.numerics import Rng, softmax
from logits_replay.topk import SelectorConfig, select

rng = Rng(0)
V = 1000
base = rng.normal(V)
gold = int(np.argmax(base))

print(f"{'temperature':>11} {'tau':>6} {'|S|':>5} {'rho':>9} {'|dg|_1':>9} {'2*rho':>9} {'CE full':>8} {'CE restr':>8}")
for temp in (0.2, 0.5, 1.0):
    z = base / temp
    for tau in (0.9, 0.99):
        cs = select(z, gold, SelectorConfig(tau=tau, k_max=200))
        rep = gradient_bias(z, cs, gold)
        print(f"{temp:11.1f} {tau:6.2f} {len(cs):5d} {rep.rho:9.2e} {rep.l1_bias:9.2e} {2 * rep.rho:9.2e} "
              f"{full_ce(z, gold).value:8.4f} {restricted_ce(z, cs, gold).value:8.4f}")

# A gold token the model considers unlikely is appended to the set.
z = base / 0.3
p = softmax(z)
rare = int(np.argmin(p))
cs = select(z, rare, SelectorConfig(tau=0.95))
print(f"\nunlikely gold {rare} (p={p[rare]:.1e}) appended: {cs.gold_appended}, |S| = {len(cs)}")
print("the restricted loss still trains toward it:",
      f"grad at gold = {restricted_ce(z, cs, rare).grad_logits[rare]:.4f}")
