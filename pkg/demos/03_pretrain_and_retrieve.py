"""Contrastive pretraining on synthetic walkers, then zero-shot retrieval on unseen walkers.

Takes well under a minute on one core.
Run: python demos/03_pretrain_and_retrieve.py [out_dir]
"""
import sys

from gaitscale.config import desk_config
from gaitscale.pipeline import run_eval, run_pretrain

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = desk_config()

res = run_pretrain(cfg, f"{out}/pretrain")
loss = res.log.column("l_simclr")
print(f"{len(res.log)} steps on {res.n_sequences} sequences, contrastive loss {loss[0]:.3f} -> {loss[-1]:.3f}")

report, manifest = run_eval(cfg, res.model, f"{out}/eval")
print(f"controlled aggregate rank-1: {report.aggregate_controlled:.3f}")
print(f"wild rank-1 / rank-5:        {report.rank1:.3f} / {report.rank5:.3f}")
print("artifacts:", ", ".join(manifest.artifacts))
