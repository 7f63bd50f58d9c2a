import os
import subprocess
import sys
import threading
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hsproj import container
from hsproj import trace_store as ts
from hsproj.errors import CacheMiss, CorruptionError, DataError, DecodeError, VersionError

KEY = ts.CacheKey("demo-llm", 2048, 32)


def make_trace(rng, tid="t0001", n=5, d_h=16, d=8, teacher=True):
    emb = None
    if teacher:
        emb = rng.normal(size=d)
        emb /= np.linalg.norm(emb)
    return ts.Trace(tid, "conv-1", rng.normal(size=(n, d_h)).astype(np.float32), "what is é?", emb)


class TestCacheKey:
    def test_published_digests(self):
        assert KEY.digest() == "49f3ab4aa09b9214"
        assert ts.CacheKey("demo-llm", 2048, 64).digest() == "5291b9c6a7e3df4b"
        assert ts.cache_key_digest(KEY) == KEY.digest()

    def test_canonical_form(self):
        assert KEY.canonical() == "demo-llm|2048|32"

    def test_stable_across_processes(self):
        code = "from hsproj.trace_store import CacheKey; print(CacheKey('demo-llm', 2048, 32).digest())"
        env = dict(os.environ, PYTHONHASHSEED="12345")
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
        assert out.stdout.strip() == KEY.digest()


@settings(max_examples=50)
@given(name=st.text(min_size=1, max_size=20), a=st.integers(0, 10**6), b=st.integers(0, 10**6))
def test_digest_is_pure_function_of_fields(name, a, b):
    k1, k2 = ts.CacheKey(name, a, b), ts.CacheKey(name, a, b)
    assert k1.digest() == k2.digest() and len(k1.digest()) == 16
    assert ts.CacheKey(name, a, b + 1).digest() != k1.digest()


class TestTrace:
    def test_requires_rows(self):
        with pytest.raises(DataError):
            ts.Trace("t", "c", np.zeros((0, 4)))

    def test_teacher_must_be_unit(self):
        with pytest.raises(DataError):
            ts.Trace("t", "c", np.zeros((2, 4)), teacher_embedding=np.array([1.0, 1.0]))

    def test_stored_as_float32(self, rng):
        t = ts.Trace("t", "c", rng.normal(size=(3, 4)))
        assert t.hidden_states.dtype == np.float32 and t.token_count == 3


class TestReadWrite:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        t = make_trace(rng)
        path = ts.write_trace(tmp_path, KEY, t)
        assert path == tmp_path / KEY.digest() / "t0001.htrc"
        assert ts.read_trace(tmp_path, KEY, "t0001").equal(t)
        assert path.read_bytes()[:4] == b"HTRC"

    def test_roundtrip_without_teacher(self, rng, tmp_path):
        t = make_trace(rng, teacher=False)
        ts.write_trace(tmp_path, KEY, t)
        back = ts.read_trace(tmp_path, KEY, t.trigger_id)
        assert back.teacher_embedding is None and back.equal(t)

    def test_wrong_digest_is_miss(self, rng, tmp_path):
        ts.write_trace(tmp_path, KEY, make_trace(rng))
        with pytest.raises(CacheMiss):
            ts.read_trace(tmp_path, ts.CacheKey("demo-llm", 2048, 64), "t0001")

    def test_truncated_is_corruption(self, rng, tmp_path):
        path = ts.write_trace(tmp_path, KEY, make_trace(rng))
        for cut in (2, 10, 40, 5):
            raw = path.read_bytes()
            path.write_bytes(raw[: len(raw) - cut] if cut != 2 else raw[:2])
            with pytest.raises(CorruptionError):
                ts.read_trace(tmp_path, KEY, "t0001")
            ts.write_trace(tmp_path, KEY, make_trace(np.random.default_rng(0)))

    def test_bit_flip_is_corruption(self, rng, tmp_path):
        path = ts.write_trace(tmp_path, KEY, make_trace(rng))
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            ts.read_trace(tmp_path, KEY, "t0001")

    def test_version_bump_is_version_error(self, rng):
        raw = container.encode(ts.TRACE_MAGIC, ts.TRACE_VERSION + 1, {}, [])
        with pytest.raises(VersionError):
            ts.decode_trace(raw)

    def test_wrong_magic(self, rng):
        raw = container.encode(b"HSPH", 1, {}, [])
        with pytest.raises(DecodeError):
            ts.decode_trace(raw)

    def test_unsafe_id_rejected(self, rng, tmp_path):
        with pytest.raises(DataError):
            ts.write_trace(tmp_path, KEY, make_trace(rng, tid="../escape"))

    def test_concurrent_readers_never_see_partial_file(self, rng, tmp_path):
        traces = [make_trace(np.random.default_rng(i), n=200, d_h=64) for i in range(2)]
        ts.write_trace(tmp_path, KEY, traces[0])
        stop = threading.Event()
        errors, reads = [], [0]

        def reader():
            while not stop.is_set():
                try:
                    got = ts.read_trace(tmp_path, KEY, "t0001")
                    if not any(got.equal(t) for t in traces):
                        errors.append("mixed content")
                    reads[0] += 1
                except Exception as exc:  # noqa: BLE001 - any failure is a test failure
                    errors.append(repr(exc))

        threads = [threading.Thread(target=reader) for _ in range(3)]
        for t in threads:
            t.start()
        for i in range(60):
            ts.write_trace(tmp_path, KEY, traces[i % 2])
        stop.set()
        for t in threads:
            t.join()
        assert not errors and reads[0] > 0


class TestScan:
    def test_empty(self, tmp_path):
        assert ts.scan(tmp_path, KEY) == []

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ts.scan(tmp_path / "nope", KEY)

    def test_three_sorted(self, rng, tmp_path):
        for tid in ("t3", "t1", "t2"):
            ts.write_trace(tmp_path, KEY, make_trace(rng, tid=tid))
        (tmp_path / KEY.digest() / ".t9.htrc.abc.tmp").write_bytes(b"partial")
        assert ts.scan(tmp_path, KEY) == ["t1", "t2", "t3"]

    def test_ten_thousand_under_a_second(self, rng, tmp_path):
        raw = ts.encode_trace(make_trace(rng, n=2, d_h=4, d=2))
        sub = tmp_path / KEY.digest()
        sub.mkdir()
        for i in range(10_000):
            (sub / f"t{i:05d}.htrc").write_bytes(raw)
        start = time.perf_counter()
        ids = ts.scan(tmp_path, KEY)
        assert time.perf_counter() - start < 1.0
        assert len(ids) == 10_000 and ids[0] == "t00000"


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(n=st.integers(1, 20), d_h=st.integers(1, 12), seed=st.integers(0, 2**16), text=st.text(max_size=30))
def test_encode_decode_roundtrip(n, d_h, seed, text):
    rng = np.random.default_rng(seed)
    t = ts.Trace("x", "c", rng.normal(size=(n, d_h)).astype(np.float32), text)
    assert ts.decode_trace(ts.encode_trace(t)).equal(t)
