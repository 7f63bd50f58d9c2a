"""Projection head: hidden-state sequence -> unit vector in the teacher space.

Pipeline: input projection, learned positional table, a pre-norm transformer
encoder stack with one closing layer norm, masked mean pooling, output
projection, L2 normalisation.

Parameter files (``.hsph``) are laid out as::

    b"HSPH" | u32 version | u32 header_len | header (UTF-8 JSON)
    | raw little-endian blocks in declaration order | u32 CRC32

(see ``container``). The JSON header carries the MapperConfig and the
activation name next to the block table. Checkpoints reuse the container and
append optimizer blocks after the parameters.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .errors import (
    ConfigurationError,
    CorruptionError,
    DimensionError,
    EmptySequenceError,
    SequenceLengthError,
)
from .tensor import (
    Tensor,
    gelu,
    l2_normalize,
    layer_norm,
    masked_mean_pool,
    multi_head_self_attention,
)

PARAM_MAGIC = b"HSPH"
PARAM_VERSION = 1
ACTIVATION = "gelu"


@dataclass(frozen=True)
class MapperConfig:
    d_h: int = 4096
    d_m: int = 1024
    d: int = 1024
    layers: int = 2
    heads: int = 8
    ff_dim: int = 0  # 0 means 4 * d_m
    max_positions: int = 128
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.ff_dim == 0:
            object.__setattr__(self, "ff_dim", 4 * self.d_m)
        self.validate()

    def validate(self) -> None:
        for name in ("d_h", "d_m", "d", "heads", "ff_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"MapperConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigurationError(f"MapperConfig.layers must be >= 0, got {self.layers}")
        if self.d_m % self.heads:
            raise ConfigurationError(f"d_m={self.d_m} is not divisible by heads={self.heads}")
        if self.ln_eps <= 0:
            raise ConfigurationError("ln_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> MapperConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown MapperConfig keys: {sorted(unknown)}")
        return cls(**data)


def param_shapes(config: MapperConfig) -> OrderedDict:
    """Ordered ``name -> shape`` table; the order is the serialization order."""
    dm, ff = config.d_m, config.ff_dim
    shapes = OrderedDict()
    shapes["in.weight"] = (config.d_h, dm)
    shapes["in.bias"] = (dm,)
    shapes["pos_emb"] = (config.max_positions, dm)
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes[p + "ln1.gain"] = (dm,)
        shapes[p + "ln1.bias"] = (dm,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{proj}"] = (dm, dm)
            shapes[p + f"attn.b{proj}"] = (dm,)
        shapes[p + "ln2.gain"] = (dm,)
        shapes[p + "ln2.bias"] = (dm,)
        shapes[p + "ff.w1"] = (dm, ff)
        shapes[p + "ff.b1"] = (ff,)
        shapes[p + "ff.w2"] = (ff, dm)
        shapes[p + "ff.b2"] = (dm,)
    shapes["final_ln.gain"] = (dm,)
    shapes["final_ln.bias"] = (dm,)
    shapes["out.weight"] = (dm, config.d)
    shapes["out.bias"] = (config.d,)
    return shapes


def parameter_count(config: MapperConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def is_decayed(name: str, shape: tuple[int, ...]) -> bool:
    """Weight decay applies to projection matrices only."""
    return len(shape) == 2 and name != "pos_emb"


@dataclass
class MapperParams:
    config: MapperConfig
    tensors: OrderedDict = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> MapperParams:
        return MapperParams(self.config, OrderedDict((k, Tensor(t.data.copy())) for k, t in self.items()))

    def astype(self, dtype) -> MapperParams:
        return MapperParams(self.config, OrderedDict((k, Tensor(t.data.astype(dtype))) for k, t in self.items()))

    def requires_grad_(self, flag: bool = True) -> MapperParams:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def equal(self, other: MapperParams) -> bool:
        """Bit-level equality of config and every block."""
        if self.config != other.config or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def init(config: MapperConfig, dtype=np.float64) -> MapperParams:
    """Deterministic initialisation from ``config.seed``.

    Matrices are uniform in ``±1/sqrt(fan_in)``; biases and layer-norm shifts
    are zero, layer-norm gains one, and the positional table starts at zero.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name == "pos_emb":
            data = np.zeros(shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype))
    return MapperParams(config, tensors)


def _as_batch(H, mask, config: MapperConfig):
    H = H.data if isinstance(H, Tensor) else np.asarray(H)
    if H.ndim not in (2, 3):
        raise DimensionError(f"hidden states must be [n, d_h] or [B, n, d_h], got {H.shape}")
    if H.shape[-1] != config.d_h:
        raise DimensionError(f"hidden width {H.shape[-1]} does not match d_h={config.d_h}")
    n = H.shape[-2]
    if n < 1:
        raise EmptySequenceError("sequence has no positions")
    if n > config.max_positions:
        raise SequenceLengthError(f"sequence length {n} exceeds max_positions={config.max_positions}")
    mask = np.ones(H.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != H.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match hidden states {H.shape}")
    if not np.all(mask.any(axis=-1)):
        raise EmptySequenceError("every position of a sequence is masked")
    return H, mask


def _encode_batch(params: MapperParams, H: np.ndarray, mask: np.ndarray) -> Tensor:
    cfg = params.config
    n = H.shape[-2]
    x = Tensor(H.astype(params.dtype, copy=False)) @ params["in.weight"] + params["in.bias"]
    x = x + params["pos_emb"][:n]
    for i in range(cfg.layers):
        p = f"layers.{i}."
        h = layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.ln_eps)
        attn = {
            key: params[p + "attn." + key]
            for key in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        }
        x = x + multi_head_self_attention(h, mask, attn, cfg.heads)
        h = layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.ln_eps)
        h = gelu(h @ params[p + "ff.w1"] + params[p + "ff.b1"]) @ params[p + "ff.w2"] + params[p + "ff.b2"]
        x = x + h
    x = layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], cfg.ln_eps)
    return masked_mean_pool(x, mask)


def _batched(H, mask, config):
    H, mask = _as_batch(H, mask, config)
    if H.ndim == 2:
        return H[None], mask[None], True
    return H, mask, False


def encode(params: MapperParams, H, mask=None) -> Tensor:
    """Run the encoder and pooling; returns the unnormalised pooled vector(s)."""
    H, mask, single = _batched(H, mask, params.config)
    pooled = _encode_batch(params, H, mask)
    return pooled[0] if single else pooled


def forward(params: MapperParams, H, mask=None) -> Tensor:
    """Map ``H`` ([n, d_h] or batched [B, n, d_h]) to unit vectors of width ``d``."""
    H, mask, single = _batched(H, mask, params.config)
    out = l2_normalize(_encode_batch(params, H, mask) @ params["out.weight"] + params["out.bias"])
    return out[0] if single else out


def pad_batch(sequences, max_positions: int | None = None, dtype=np.float32):
    """Stack variable-length ``[n_i, d_h]`` arrays into ``([B, n_max, d_h], mask)``."""
    lengths = [len(s) for s in sequences]
    n_max = max(lengths)
    if max_positions is not None and n_max > max_positions:
        raise SequenceLengthError(f"sequence length {n_max} exceeds max_positions={max_positions}")
    d_h = sequences[0].shape[-1]
    out = np.zeros((len(sequences), n_max, d_h), dtype=dtype)
    mask = np.zeros((len(sequences), n_max), dtype=bool)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return out, mask


# -- serialization ---------------------------------------------------------------

def save(params: MapperParams, path, extra_header: dict | None = None, extra_blocks=()) -> None:
    header = {"config": params.config.to_dict(), "activation": ACTIVATION}
    if extra_header:
        header.update(extra_header)
    blocks = [(name, t.data) for name, t in params.items()]
    blocks.extend(extra_blocks)
    container.write(path, PARAM_MAGIC, PARAM_VERSION, header, blocks)


def load_with_extras(path, config: MapperConfig | None = None):
    """Load params plus whatever extra header keys and blocks were stored."""
    header, blocks = container.read(path, PARAM_MAGIC, PARAM_VERSION)
    if header.get("activation") != ACTIVATION:
        raise ConfigurationError(f"{path}: activation {header.get('activation')!r} not supported")
    stored = MapperConfig.from_dict(header["config"])
    if config is not None and stored != config:
        diff = {
            k: (v, getattr(config, k)) for k, v in stored.to_dict().items() if getattr(config, k) != v
        }
        raise ConfigurationError(f"{path}: stored config differs from expected: {diff}")
    tensors = OrderedDict()
    for name, shape in param_shapes(stored).items():
        if name not in blocks or blocks[name].shape != shape:
            raise CorruptionError(f"{path}: missing or misshapen parameter block {name}")
        tensors[name] = Tensor(blocks.pop(name))
    return MapperParams(stored, tensors), header, blocks


def load(path, config: MapperConfig | None = None) -> MapperParams:
    return load_with_extras(path, config)[0]
