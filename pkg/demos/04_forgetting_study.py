"""The four-arm forgetting study over several seeds.

Usage: python demos/04_forgetting_study.py [n_seeds]   (default 2; about 20 s per seed)
"""

import sys
import tempfile

from logits_replay.experiment import ARMS, ExperimentConfig, forgetting_verdict, run_experiment, stability_verdict

n = int(sys.argv[1]) if len(sys.argv) > 1 else 2
cfg = ExperimentConfig()
with tempfile.TemporaryDirectory() as tmp:
    results = run_experiment(cfg, range(n), tmp)

print(f"{'seed':>4} " + " ".join(f"{a:>14}" for a in ARMS) + "   (dPPL on B)")
for r in results:
    print(f"{r.seed:4d} " + " ".join(f"{r.arms[a].delta_ppl_b:14.3f}" for a in ARMS))
f = forgetting_verdict(results)
print(f"\nMoClip+replay cuts the median dPPL(B) of AdamW SFT by {f['relative_reduction']:.0%}; "
      f"A loss differs by {f['nll_a_relative_gap']:.1%}")
print("stability wins:", stability_verdict(results))
