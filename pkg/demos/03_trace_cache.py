"""
The trace cache
===============

Write traces under a settings digest, scan them back, and watch the reader
reject damaged files.
"""

import tempfile
from pathlib import Path

import numpy as np

from hsproj import trace_store as ts
from hsproj.errors import CacheMiss, CorruptionError

rng = np.random.default_rng(0)
key = ts.CacheKey("demo-llm", 2048, 32)
print("digest", key.digest())

root = Path(tempfile.mkdtemp())
for i in range(3):
    t = rng.normal(size=16)
    trace = ts.Trace(f"trig{i:03d}", "conv0", rng.normal(size=(5 + i, 64)), f"query {i}", t / np.linalg.norm(t))
    print("wrote", ts.write_trace(root, key, trace).relative_to(root))

print("cached ids:", ts.scan(root, key))

# A different generation setting lands in a different directory, so nothing stale is read.
other = ts.CacheKey("demo-llm", 2048, 64)
try:
    ts.read_trace(root, other, "trig000")
except CacheMiss as exc:
    print("miss:", exc)

# Flip a single bit: the CRC catches it.
path = ts.trace_path(root, key, "trig001")
raw = bytearray(path.read_bytes())
raw[40] ^= 0x01
path.write_bytes(bytes(raw))
try:
    ts.read_trace(root, key, "trig001")
except CorruptionError as exc:
    print("corrupt:", exc)
