"""Synthetic stand-in for the LLM, the teacher encoder and the relevance data.

A world plants a fixed linear map ``G`` from hidden space to embedding space.
Each conversation has a latent topic, each trigger a latent intent; token
hidden states are topic + intent + a shared positional signal + token noise.
The teacher embedding of a trigger is ``normalize(G @ mean(H))`` perturbed by
noise of size ``noise``, and its relevant documents sit close to that
embedding. Distractor documents are random unit vectors, a ``distractor_corr``
fraction of them drawn near conversation topics.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container, trace_store
from .errors import ConfigurationError, DataError
from .retrieval_eval import CorpusIndex, EvalReport, build_report, score_rankings
from .trace_store import CacheKey, Trace

CORPUS_MAGIC = b"HCRP"
CORPUS_VERSION = 1
SPLITS = ("train", "val", "test")

# seed stream ids, so adding a stream never shifts the others
_S_MAP, _S_POS, _S_CONV, _S_DOCS, _S_SPLIT, _S_DOMAIN = range(6)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    d_h: int = 64
    d: int = 32
    num_conversations: int = 540
    triggers_min: int = 3
    triggers_max: int = 7
    tokens_min: int = 4
    tokens_max: int = 16
    max_positions: int = 128
    corpus_size: int = 5000
    relevant_per_query: int = 3
    noise: float = 0.1
    distractor_corr: float = 0.3
    distractor_spread: float = 1.0
    num_domains: int = 4
    topic_spread: float = 0.25
    intent_scale: float = 0.25
    token_noise: float = 1.0
    position_scale: float = 0.3
    train_frac: float = 0.74
    val_frac: float = 0.07

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.d <= self.d_h:
            raise ConfigurationError(f"need 1 <= d <= d_h, got d={self.d}, d_h={self.d_h}")
        if self.noise < 0 or self.token_noise < 0 or self.intent_scale < 0 or self.position_scale < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if self.num_domains < 1 or self.topic_spread < 0:
            raise ConfigurationError("need num_domains >= 1 and topic_spread >= 0")
        if not 0.0 <= self.distractor_corr <= 1.0:
            raise ConfigurationError("distractor_corr must be in [0, 1]")
        if self.relevant_per_query < 1 or self.corpus_size < 10 * self.relevant_per_query:
            raise ConfigurationError("corpus_size must be at least 10 * relevant_per_query")
        if not 1 <= self.triggers_min <= self.triggers_max:
            raise ConfigurationError("need 1 <= triggers_min <= triggers_max")
        if not 1 <= self.tokens_min <= self.tokens_max:
            raise ConfigurationError("need 1 <= tokens_min <= tokens_max")
        if self.tokens_max > self.max_positions:
            raise ConfigurationError(
                f"tokens_max={self.tokens_max} exceeds max_positions={self.max_positions}"
            )
        if self.num_conversations < 3:
            raise ConfigurationError("need at least 3 conversations for a train/val/test split")
        if not (0 < self.train_frac < 1 and 0 <= self.val_frac < 1 and self.train_frac + self.val_frac < 1):
            raise ConfigurationError("split fractions must leave room for a test split")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> WorldConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown WorldConfig keys: {sorted(unknown)}")
        return cls(**data)

    def cache_key(self) -> CacheKey:
        return CacheKey(f"synthetic-world-seed{self.seed}", self.max_positions, self.tokens_max)


@dataclass
class SyntheticWorld:
    config: WorldConfig
    traces: list
    index: CorpusIndex
    splits: dict
    ground_truth_map: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self._by_id = {t.trigger_id: t for t in self.traces}

    def trace(self, trigger_id: str) -> Trace:
        return self._by_id[trigger_id]

    def split(self, name: str) -> list:
        if name not in self.splits:
            raise ConfigurationError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [self._by_id[t] for t in self.splits[name]]

    def summary(self) -> dict:
        out = OrderedDict()
        out["conversations"] = len({t.conversation_id for t in self.traces})
        out["triggers"] = len(self.traces)
        out["corpus_size"] = self.index.size
        for name in SPLITS:
            out[f"{name}_triggers"] = len(self.splits[name])
            out[f"{name}_conversations"] = len({self._by_id[t].conversation_id for t in self.splits[name]})
        return out

    def equal(self, other: SyntheticWorld) -> bool:
        return (
            self.config == other.config
            and self.splits == other.splits
            and len(self.traces) == len(other.traces)
            and all(a.equal(b) for a, b in zip(self.traces, other.traces))
            and self.index.doc_ids == other.index.doc_ids
            and self.index.embeddings.tobytes() == other.index.embeddings.tobytes()
            and self.index.qrels == other.index.qrels
        )


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _perturb(rng: np.random.Generator, v: np.ndarray, scale: float) -> np.ndarray:
    """Add isotropic noise of expected norm ``scale`` and renormalise."""
    if scale == 0:
        return v.copy()
    return _unit(v + scale * rng.standard_normal(v.shape) / np.sqrt(v.shape[-1]))


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Generate a full world; identical configs give bit-identical worlds."""
    config.validate()
    seed = config.seed
    d_h, d = config.d_h, config.d
    g_map = np.random.default_rng([seed, _S_MAP]).standard_normal((d, d_h)) / np.sqrt(d_h)
    positional = (
        np.random.default_rng([seed, _S_POS]).standard_normal((config.tokens_max, d_h))
        * config.position_scale
        / np.sqrt(d_h)
    )

    domains = np.random.default_rng([seed, _S_DOMAIN]).standard_normal((config.num_domains, d_h)) / np.sqrt(d_h)

    # relevant documents sit at expected cosine ~(1 - noise) from their teacher vector
    doc_scale = float(np.sqrt(1.0 / (1.0 - min(config.noise, 0.9)) ** 2 - 1.0))

    traces: list[Trace] = []
    relevant_vecs: list[tuple[str, np.ndarray]] = []
    topics = np.empty((config.num_conversations, d))
    for ci in range(config.num_conversations):
        rng = np.random.default_rng([seed, _S_CONV, ci])
        conv_id = f"c{ci:04d}"
        domain = domains[rng.integers(0, config.num_domains)]
        topic = domain + config.topic_spread * rng.standard_normal(d_h) / np.sqrt(d_h)
        topics[ci] = _unit(g_map @ topic)
        n_trig = int(rng.integers(config.triggers_min, config.triggers_max + 1))
        for tj in range(n_trig):
            trig_id = f"{conv_id}-t{tj:02d}"
            intent = config.intent_scale * rng.standard_normal(d_h) / np.sqrt(d_h)
            n_tok = int(rng.integers(config.tokens_min, config.tokens_max + 1))
            hidden = (
                topic
                + intent
                + positional[:n_tok]
                + config.token_noise * rng.standard_normal((n_tok, d_h)) / np.sqrt(d_h)
            ).astype(np.float32)
            clean = _unit(g_map @ hidden.astype(np.float64).mean(axis=0))
            teacher = _perturb(rng, clean, config.noise)
            n_rel = int(rng.choice([1, 2, 3][: config.relevant_per_query],
                                   p=_relevant_probs(config.relevant_per_query)))
            for _ in range(n_rel):
                relevant_vecs.append((trig_id, _perturb(rng, teacher, doc_scale)))
            traces.append(
                Trace(
                    trigger_id=trig_id,
                    conversation_id=conv_id,
                    hidden_states=hidden,
                    query_text=f"synthetic query for {trig_id}",
                    teacher_embedding=teacher,
                )
            )

    n_distract = config.corpus_size - len(relevant_vecs)
    if n_distract < 0:
        raise ConfigurationError(
            f"corpus_size={config.corpus_size} is smaller than the {len(relevant_vecs)} relevant documents"
        )
    rng = np.random.default_rng([seed, _S_DOCS])
    n_corr = int(round(config.distractor_corr * n_distract))
    near_topic = _perturb(rng, topics[rng.integers(0, len(topics), n_corr)], config.distractor_spread) if n_corr else np.empty((0, d))
    random_docs = _unit(rng.standard_normal((n_distract - n_corr, d)))
    vectors = np.vstack([np.array([v for _, v in relevant_vecs]).reshape(-1, d), near_topic, random_docs])
    owners = [t for t, _ in relevant_vecs] + [None] * n_distract
    order = rng.permutation(len(vectors))
    doc_ids = [f"d{i:05d}" for i in range(len(vectors))]
    embeddings = vectors[order]
    qrels: dict[str, set] = {t.trigger_id: set() for t in traces}
    for new_pos, old_pos in enumerate(order):
        owner = owners[old_pos]
        if owner is not None:
            qrels[owner].add(doc_ids[new_pos])
    index = CorpusIndex(doc_ids, embeddings, qrels)

    conv_ids = sorted({t.conversation_id for t in traces})
    shuffled = [conv_ids[i] for i in np.random.default_rng([seed, _S_SPLIT]).permutation(len(conv_ids))]
    n_train = max(1, int(round(config.train_frac * len(shuffled))))
    n_val = max(1, int(round(config.val_frac * len(shuffled)))) if config.val_frac > 0 else 0
    assignment = {}
    for i, c in enumerate(shuffled):
        assignment[c] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    splits = {name: [t.trigger_id for t in traces if assignment[t.conversation_id] == name] for name in SPLITS}
    return SyntheticWorld(config, traces, index, splits, g_map)


def _relevant_probs(max_rel: int) -> list:
    # skewed towards one relevant document, like sparse conversational qrels
    base = [0.6, 0.3, 0.1][:max_rel]
    total = sum(base)
    return [p / total for p in base]


def teacher_baseline_results(world: SyntheticWorld, split: str = "test", k: int = 10):
    traces = world.split(split)
    queries = np.array([t.teacher_embedding for t in traces])
    return score_rankings(
        [t.trigger_id for t in traces], [t.conversation_id for t in traces], queries, world.index, k
    )


def teacher_baseline_eval(world: SyntheticWorld, k: int = 10, split: str = "test", seed: int = 0) -> EvalReport:
    """Retrieval with the stored teacher embeddings, compared against itself."""
    results = teacher_baseline_results(world, split, k)
    return build_report(results, results, system="teacher", baseline_name="teacher", seed=seed)


# -- persistence -----------------------------------------------------------------------

def write_corpus(path, index: CorpusIndex, ground_truth_map: np.ndarray | None = None) -> None:
    header = {
        "doc_ids": list(index.doc_ids),
        "qrels": {t: sorted(docs) for t, docs in sorted(index.qrels.items())},
    }
    blocks = [("embeddings", index.embeddings)]
    if ground_truth_map is not None:
        blocks.append(("ground_truth_map", ground_truth_map))
    container.write(path, CORPUS_MAGIC, CORPUS_VERSION, header, blocks)


def read_corpus(path) -> tuple[CorpusIndex, np.ndarray | None]:
    header, blocks = container.read(path, CORPUS_MAGIC, CORPUS_VERSION)
    index = CorpusIndex(header["doc_ids"], blocks["embeddings"], header["qrels"])
    return index, blocks.get("ground_truth_map")


def save_world(world: SyntheticWorld, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = world.config.cache_key()
    for t in world.traces:
        trace_store.write_trace(out / "traces", key, t)
    write_corpus(out / "corpus.hcrp", world.index, world.ground_truth_map)
    meta = OrderedDict(
        [
            ("world_config", world.config.to_dict()),
            ("cache_digest", key.digest()),
            ("trigger_order", [t.trigger_id for t in world.traces]),
            ("splits", world.splits),
            ("summary", world.summary()),
        ]
    )
    container.atomic_write(out / "world.json", (json.dumps(meta, indent=2) + "\n").encode("utf-8"))
    return out


def load_world(world_dir) -> SyntheticWorld:
    root = Path(world_dir)
    meta_path = root / "world.json"
    if not meta_path.exists():
        raise DataError(f"{root} does not contain a world (missing world.json)")
    meta = json.loads(meta_path.read_text())
    config = WorldConfig.from_dict(meta["world_config"])
    key = config.cache_key()
    traces = [trace_store.read_trace(root / "traces", key, t) for t in meta["trigger_order"]]
    index, g_map = read_corpus(root / "corpus.hcrp")
    return SyntheticWorld(config, traces, index, meta["splits"], g_map)
