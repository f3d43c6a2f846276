"""The two-stage workflow on a small model, end to end, in memory.

Stage 0 runs the pretrained model once over the fine-tuning data and stores a
candidate set per position. Stage 1 fine-tunes against those sets with
MoClip. We compare against ordinary fine-tuning on the same data.
"""

import tempfile
from pathlib import Path

from logits_replay.experiment import ExperimentConfig, build_corpora, collect, finetune, pretrain_base
from logits_replay.harness import evaluate, flop_accounting
from logits_replay.model import param_distance
from logits_replay.topk import SelectorConfig

cfg = ExperimentConfig(n_pretrain_a=200, n_pretrain_b=1500, n_finetune_a=400, n_val=200,
                       selector=SelectorConfig(tau=0.995, k_max=200))
seed = 0
data = build_corpora(cfg, seed)
base, _ = pretrain_base(cfg, seed, data["pretrain"])
print(f"base model: NLL(A) = {evaluate(base, data['val_a'])[0]:.3f}, NLL(B) = {evaluate(base, data['val_b'])[0]:.3f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "replay.jsonl"
    header, stats = collect(cfg, seed, base, data["finetune_a"], path)
    flops = flop_accounting(stats, cfg.model.vocab_size)
    print(f"stage 0: {stats.record_count} positions, mean |S| = {stats.mean_set_size:.1f} of "
          f"{cfg.model.vocab_size}, softmax work kept r = {flops.r:.2f}")
    runs = {
        "AdamW full SFT": finetune(cfg, seed, base, data["finetune_a"], "adamw"),
        "MoClip + replay": finetune(cfg, seed, base, data["finetune_a"], "moclip", path),
    }

_, base_ppl_b = evaluate(base, data["val_b"])
for name, (tuned, metrics) in runs.items():
    nll_a, _ = evaluate(tuned, data["val_a"])
    _, ppl_b = evaluate(tuned, data["val_b"])
    print(f"{name:<16} NLL(A) {nll_a:.3f}  dPPL(B) {ppl_b - base_ppl_b:+.3f}  "
          f"rel-L2 {param_distance(tuned, base):.3f}  grad-norm CV {metrics.grad_norm_cv:.3f}")
