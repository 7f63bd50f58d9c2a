"""Distillation training loop: AdamW, per-step cosine schedule, global-norm clipping.

Candidate documents for rank distillation are looked up once from the frozen
teacher embeddings before the first epoch and reused for every epoch.
"""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import projection_head as ph
from .errors import ConfigurationError, DataError, NonFiniteError, TrainingAborted
from .losses import LossWeights, combined_loss
from .retrieval_eval import CorpusIndex, PerTriggerResult, score_rankings, topk_search
from .tensor import backward, no_grad

log = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 16
    lr_start: float = 2e-4
    lr_end: float = 1e-5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    top_k: int = 128
    align: float = 0.5
    contra: float = 0.5
    rank: float = 0.5
    tau: float = 0.05
    tau_r: float = 0.05
    seed: int = 0
    shuffle: bool = True
    dtype: str = "float64"
    val_every: int = 5
    checkpoint_every: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigurationError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigurationError("weight_decay must be >= 0 and clip_norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigurationError("invalid Adam hyperparameters")
        if self.rank > 0 and self.top_k < 2:
            raise ConfigurationError("top_k must be >= 2 when the rank loss is enabled")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.val_every < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("val_every and checkpoint_every must be >= 0")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.align, self.contra, self.rank, self.tau, self.tau_r)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ConfigurationError(f"need 0 <= step <= total_steps and total_steps >= 1, got {step}/{total_steps}")
    if step == total_steps:
        return lr_end
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


# -- optimizer --------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm observed before clipping.
    """
    if max_norm <= 0:
        raise ConfigurationError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm or not math.isfinite(norm):
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig, decay: dict | None = None) -> AdamState:
    """One decoupled-weight-decay Adam update, applied in place to ``params`` arrays.

    ``decay`` maps parameter names to whether weight decay applies; by default
    only 2-D matrices other than the positional table are decayed.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {bad}", {"parameters": bad, "step": state.step})
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        decayed = ph.is_decayed(name, p.shape) if decay is None else decay.get(name, False)
        if decayed and config.weight_decay:
            p *= 1.0 - lr * config.weight_decay
        p -= lr * update
    return state


# -- candidates ---------------------------------------------------------------------------

def precompute_candidates(teacher_embeddings, index: CorpusIndex, k: int):
    """Teacher's exact top-``k`` documents per query: ``(doc_indices [N, k], scores [N, k])``."""
    if k > index.size:
        raise ConfigurationError(f"top_k={k} exceeds corpus size {index.size}")
    q = np.atleast_2d(np.asarray(teacher_embeddings, dtype=np.float64))
    return topk_search(q, index, k)


# -- history -----------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    steps: int
    align: float
    contra: float
    rank: float
    total: float
    lrs: list
    grad_norm_mean: float
    grad_norm_max: float
    clipped_norm_max: float
    val_recall: float | None = None


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val_recall: float | None = None
    best_params: object = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_recall": self.best_val_recall,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TrainHistory:
        return cls([EpochRecord(**e) for e in data["epochs"]], data["best_epoch"], data["best_val_recall"])

    def lr_sequence(self) -> list:
        return [lr for e in self.epochs for lr in e.lrs]


# -- inference helpers ----------------------------------------------------------------------

def embed_traces(params: ph.MapperParams, traces: Sequence, batch_size: int = 256) -> np.ndarray:
    """Mapper embeddings ``[N, d]`` for ``traces`` (no graph is built)."""
    out = np.empty((len(traces), params.config.d))
    with no_grad():
        for start in range(0, len(traces), batch_size):
            chunk = traces[start : start + batch_size]
            H, mask = ph.pad_batch([t.hidden_states for t in chunk], params.config.max_positions, params.dtype)
            out[start : start + len(chunk)] = ph.forward(params, H, mask).data
    # re-normalise in float64 so downstream unit-norm checks hold for float32 params
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def evaluate_mapper(params: ph.MapperParams, traces: Sequence, index: CorpusIndex, k: int = 10) -> list[PerTriggerResult]:
    queries = embed_traces(params, traces)
    return score_rankings([t.trigger_id for t in traces], [t.conversation_id for t in traces], queries, index, k)


def _recall(results: Sequence[PerTriggerResult]) -> float:
    kept = [r.hit for r in results if r.n_relevant > 0]
    return float(np.mean(kept)) if kept else 0.0


# -- checkpoints ------------------------------------------------------------------------------

def save_checkpoint(path, params: ph.MapperParams, state: AdamState, epoch: int, history: TrainHistory, train_config: TrainConfig) -> None:
    extra_header = {
        "checkpoint": {
            "epoch": epoch,
            "adam_step": state.step,
            "history": history.to_dict(),
            "train_config": train_config.to_dict(),
        }
    }
    blocks = [(f"adam.m.{k}", state.m[k]) for k in params if k in state.m]
    blocks += [(f"adam.v.{k}", state.v[k]) for k in params if k in state.v]
    ph.save(params, path, extra_header=extra_header, extra_blocks=blocks)


def load_checkpoint(path, mapper_config: ph.MapperConfig | None = None):
    """Returns ``(params, AdamState, epoch, TrainHistory, TrainConfig)``."""
    params, header, blocks = ph.load_with_extras(path, mapper_config)
    if "checkpoint" not in header:
        raise DataError(f"{path} is a parameter file, not a training checkpoint")
    info = header["checkpoint"]
    state = AdamState(step=info["adam_step"])
    for name in params:
        if f"adam.m.{name}" in blocks:
            state.m[name] = blocks[f"adam.m.{name}"]
            state.v[name] = blocks[f"adam.v.{name}"]
    return (
        params,
        state,
        info["epoch"],
        TrainHistory.from_dict(info["history"]),
        TrainConfig.from_dict(info["train_config"]),
    )


# -- training -----------------------------------------------------------------------------------

@dataclass
class _Prepared:
    hidden: list
    teacher: np.ndarray
    cand_vectors: np.ndarray | None
    cand_scores: np.ndarray | None


def _prepare(traces, index, cfg: TrainConfig, dtype) -> _Prepared:
    if not traces:
        raise ConfigurationError("training set is empty")
    missing = [t.trigger_id for t in traces if t.teacher_embedding is None]
    if missing:
        raise DataError(f"traces without teacher embeddings: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    teacher = np.array([t.teacher_embedding for t in traces], dtype=np.float64)
    cand_vectors = cand_scores = None
    if cfg.rank > 0:
        if index is None:
            raise ConfigurationError("rank loss enabled but no corpus index was given")
        idx, cand_scores = precompute_candidates(teacher, index, cfg.top_k)
        cand_vectors = index.embeddings[idx].astype(dtype)
    return _Prepared([t.hidden_states.astype(dtype) for t in traces], teacher.astype(dtype), cand_vectors, cand_scores)


def steps_per_epoch(n_traces: int, batch_size: int) -> int:
    return -(-n_traces // batch_size)


def train(
    traces: Sequence,
    index: CorpusIndex | None,
    mapper_config: ph.MapperConfig,
    train_config: TrainConfig,
    val_traces: Sequence | None = None,
    out_dir=None,
    resume_from=None,
):
    """Train a projection head; returns ``(final_params, history)``.

    ``history.best_params`` holds the parameters of the epoch with the best
    validation Recall@10 (the final params when no validation set is given).
    With ``out_dir`` the run writes ``last.ckpt`` / ``best.hsph`` and a
    line-delimited ``history.jsonl`` as it goes.
    """
    cfg = train_config
    dtype = _DTYPES[cfg.dtype]
    data = _prepare(list(traces), index, cfg, dtype)
    n = len(data.hidden)
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    weights = cfg.weights
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        params, state, done, history, stored_cfg = load_checkpoint(resume_from, mapper_config)
        if stored_cfg != cfg:
            raise ConfigurationError("checkpoint was written with a different TrainConfig")
        best = ph.load(out / "best.hsph") if out is not None and (out / "best.hsph").exists() else params.copy()
    else:
        params, state, done, history = ph.init(mapper_config, dtype), AdamState(), 0, TrainHistory()
        best = params.copy()
        if out is not None:
            (out / "history.jsonl").unlink(missing_ok=True)
    params.requires_grad_(True)
    last_ckpt = resume_from
    validate = bool(val_traces) and index is not None

    for epoch in range(done + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle else np.arange(n)
        sums = np.zeros(4)
        lrs, norms, clipped = [], [], []
        for b in range(per_epoch):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            global_step = (epoch - 1) * per_epoch + b
            lr = cosine_lr(global_step, total_steps - 1, cfg.lr_start, cfg.lr_end) if total_steps > 1 else cfg.lr_start
            H, mask = ph.pad_batch([data.hidden[i] for i in batch], mapper_config.max_positions, dtype)
            pred = ph.forward(params, H, mask)
            cand = data.cand_vectors[batch] if data.cand_vectors is not None else None
            scores = data.cand_scores[batch] if data.cand_scores is not None else None
            loss = combined_loss(pred, data.teacher[batch], cand, scores, weights)
            diagnostics = {"epoch": epoch, "step": global_step, "loss": asdict_loss(loss)}
            if not math.isfinite(loss.total):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {global_step}", last_ckpt, diagnostics)
            backward(loss.graph)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
            params.zero_grad()
            grads, norm = clip_grad_norm(grads, cfg.clip_norm)
            try:
                adamw_step({k: t.data for k, t in params.items()}, grads, state, lr, cfg)
            except NonFiniteError as exc:
                raise TrainingAborted(str(exc), last_ckpt, {**diagnostics, **exc.diagnostics}) from exc
            sums += (loss.align, loss.contra, loss.rank, loss.total)
            lrs.append(lr)
            norms.append(norm)
            clipped.append(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))

        means = sums / per_epoch
        record = EpochRecord(
            epoch=epoch,
            steps=per_epoch,
            align=float(means[0]),
            contra=float(means[1]),
            rank=float(means[2]),
            total=float(means[3]),
            lrs=lrs,
            grad_norm_mean=float(np.mean(norms)),
            grad_norm_max=float(np.max(norms)),
            clipped_norm_max=float(np.max(clipped)),
        )
        is_last = epoch == cfg.epochs
        if validate and (is_last or (cfg.val_every and epoch % cfg.val_every == 0)):
            record.val_recall = _recall(evaluate_mapper(params, val_traces, index))
            if history.best_val_recall is None or record.val_recall > history.best_val_recall:
                history.best_val_recall = record.val_recall
                history.best_epoch = epoch
                best = params.copy()
                if out is not None:
                    ph.save(best, out / "best.hsph")
        elif not validate:
            # without validation data the latest epoch counts as best
            history.best_epoch = epoch
        history.epochs.append(record)
        log.info(
            "epoch %d total=%.5f align=%.5f contra=%.5f rank=%.5f lr=%.3g val_recall=%s",
            epoch, record.total, record.align, record.contra, record.rank, lrs[-1], record.val_recall,
        )
        if out is not None:
            with open(out / "history.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record)) + "\n")
            if is_last or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0):
                last_ckpt = out / "last.ckpt"
                save_checkpoint(last_ckpt, params, state, epoch, history, cfg)

    if not validate:
        best = params.copy()
        if out is not None:
            ph.save(best, out / "best.hsph")
    params.requires_grad_(False)
    history.best_params = best
    if out is not None:
        summary = OrderedDict(
            [
                ("epochs", cfg.epochs),
                ("steps", total_steps),
                ("final", asdict(history.epochs[-1]) if history.epochs else None),
                ("best_epoch", history.best_epoch),
                ("best_val_recall", history.best_val_recall),
            ]
        )
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return params, history


def asdict_loss(loss) -> dict:
    return {"align": loss.align, "contra": loss.contra, "rank": loss.rank, "total": loss.total}
