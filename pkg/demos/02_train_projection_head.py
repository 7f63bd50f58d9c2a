"""
Training a projection head
==========================

Train a small mapper from hidden states into the teacher's space, then
compare it with the teacher on held-out triggers. Runs in well under a minute.
"""

import numpy as np

from hsproj import projection_head as ph
from hsproj import synthetic_oracle as so
from hsproj import trainer as tr
from hsproj.retrieval_eval import build_report

world = so.generate_world(so.WorldConfig(seed=11, num_conversations=200, corpus_size=3000, d_h=32, d=16))

# Student architecture: project, encode, pool, project, normalize.
mapper = ph.MapperConfig(d_h=32, d_m=32, d=16, layers=1, heads=4, seed=0)
print(f"mapper parameters: {ph.parameter_count(mapper):,}")

# All three losses on, a short cosine schedule, validation every epoch.
cfg = tr.TrainConfig(epochs=15, lr_start=1e-3, lr_end=5e-5, top_k=64, val_every=1)
params, history = tr.train(world.split("train"), world.index, mapper, cfg, val_traces=world.split("val"))

print("\nepoch  align   contra  rank    val R@10")
for e in history.epochs:
    print(f"{e.epoch:>5}  {e.align:.4f}  {e.contra:.4f}  {e.rank:.4f}  {e.val_recall:.3f}")
print(f"best epoch {history.best_epoch}, learning rate {history.lr_sequence()[0]:g} -> {history.lr_sequence()[-1]:g}")

# Paired comparison on the test split: bootstrap CIs, McNemar, win/tie/loss.
ours = tr.evaluate_mapper(history.best_params, world.split("test"), world.index)
teacher = so.teacher_baseline_results(world)
report = build_report(ours, teacher, system="mapper", baseline_name="teacher")
print()
print(report.render_table())
print(f"\nretention {report.retention:.3f}")

# The mapper replaces the encoder call: one forward pass per trigger.
H = world.split("test")[0].hidden_states
v = ph.forward(history.best_params, H).data
print("single-trigger embedding norm", float(np.linalg.norm(v)))
