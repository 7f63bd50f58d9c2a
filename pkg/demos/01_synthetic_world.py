"""
A synthetic retrieval world
===========================

Build a small world, look at what a trace holds, and score the teacher
against its own corpus. Run with ``python demos/01_synthetic_world.py``.
"""

import tempfile

import numpy as np

from hsproj import synthetic_oracle as so
from hsproj.retrieval_eval import random_chance_recall

# A world is fully determined by its config. Keep it small so it builds instantly.
config = so.WorldConfig(seed=7, num_conversations=60, corpus_size=1000, d_h=32, d=16)
world = so.generate_world(config)
for key, value in world.summary().items():
    print(f"{key:>20}: {value}")

# Each trace is one retrieval trigger: token hidden states plus the teacher vector.
trace = world.split("train")[0]
print("\ntrigger", trace.trigger_id, "from", trace.conversation_id)
print("hidden states", trace.hidden_states.shape, trace.hidden_states.dtype)
print("teacher norm ", np.linalg.norm(trace.teacher_embedding))

# The teacher is the ceiling the student is measured against.
report = so.teacher_baseline_eval(world)
chance = random_chance_recall(world.index, world.splits["test"])
print(f"\nteacher Recall@10 {report.recall:.3f}  (random chance {chance:.4f})")

# Noise in the teacher's view of each query is the main difficulty knob.
for noise in (0.0, 0.1, 0.3):
    noisy = so.generate_world(so.WorldConfig(seed=7, num_conversations=60, corpus_size=1000, d_h=32, d=16, noise=noise))
    print(f"noise {noise:.1f}: teacher Recall@10 {so.teacher_baseline_eval(noisy).recall:.3f}")

# Worlds persist to a directory of binary files and load back unchanged.
with tempfile.TemporaryDirectory() as tmp:
    so.save_world(world, tmp)
    print("\nreloaded world identical:", so.load_world(tmp).equal(world))
