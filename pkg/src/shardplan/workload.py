"""Parameters, flat buffers, buckets, TP shards and synthetic transformer workloads."""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULT_BUCKET_CAPACITY = 40_000_000
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class ShardingError(ValueError):
    pass


class TpSplit(str, enum.Enum):
    COLUMN = "column"
    ROW = "row"
    NONE = "none"


@dataclass(frozen=True)
class ParamSpec:
    id: int
    name: str
    shape: tuple[int, ...]
    dtype_bytes: int = 2
    tp_splittable: TpSplit = TpSplit.NONE
    layer: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "tp_splittable", TpSplit(self.tp_splittable))

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype_bytes

    @property
    def is_matrix(self) -> bool:
        return len(self.shape) == 2


@dataclass(frozen=True)
class Bucket:
    index: int
    params: tuple[ParamSpec, ...]
    offsets: tuple[int, ...]

    @property
    def size(self) -> int:
        return sum(p.numel for p in self.params)

    @property
    def param_ids(self) -> tuple[int, ...]:
        return tuple(p.id for p in self.params)

    @property
    def boundaries(self) -> tuple[int, ...]:
        """Valid atomic cut offsets: every parameter start plus the bucket end."""
        return self.offsets + (self.size,)


@dataclass(frozen=True)
class BufferLayout:
    buckets: tuple[Bucket, ...]
    R: int

    @property
    def total_size(self) -> int:
        return sum(b.size for b in self.buckets)

    @property
    def params(self) -> list[ParamSpec]:
        return [p for b in self.buckets for p in b.params]

    def __len__(self) -> int:
        return len(self.buckets)


@dataclass(frozen=True)
class TpShardSpec:
    param_id: int
    tp_rank: int
    tp_degree: int
    shard_dim: int
    shape: tuple[int, ...]

    @property
    def shard_numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a decoder-only transformer plus the parallel layout.

    ``num_kv_heads``/``head_dim`` default to plain multi-head attention with
    ``hidden_size // num_heads``; ``gated_ffn`` fuses gate and up projections
    into a single ``hidden x 2*ffn`` matrix.
    """

    num_layers: int
    hidden_size: int
    ffn_size: int
    num_heads: int
    vocab_size: int
    dtype_bytes: int = 2
    tp_degree: int = 1
    dp_degree: int = 1
    bucket_capacity: int = DEFAULT_BUCKET_CAPACITY
    num_kv_heads: int | None = None
    head_dim: int | None = None
    gated_ffn: bool = False
    norms_per_layer: int = 1
    tie_embeddings: bool = False
    name: str = "model"

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        for key in ("hidden_size", "ffn_size", "num_heads", "vocab_size",
                    "dtype_bytes", "tp_degree", "dp_degree", "bucket_capacity"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.num_kv_heads is not None and self.num_kv_heads < 1:
            raise ConfigError("num_kv_heads must be positive")
        if self.head_dim is None and self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size must be divisible by num_heads when head_dim is unset")
        if self.norms_per_layer < 0:
            raise ConfigError("norms_per_layer must be >= 0")

    @property
    def kv_heads(self) -> int:
        return self.num_kv_heads or self.num_heads

    @property
    def attn_head_dim(self) -> int:
        return self.head_dim or self.hidden_size // self.num_heads

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        flat = {}
        for key, value in data.items():
            # nested sections ([model], [parallel], [buffer]) are flattened
            if isinstance(value, dict):
                flat.update(value)
            else:
                flat[key] = value
        known = set(cls.__dataclass_fields__)
        unknown = set(flat) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**flat)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_model_config(path: str | Path) -> ModelConfig:
    """Read a TOML model config. Bare names resolve to the bundled configs."""
    path = Path(path)
    if not path.exists():
        bundled = CONFIG_DIR / f"{path.name}.toml"
        if bundled.exists():
            path = bundled
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ModelConfig.from_dict(data)


def bundled_configs() -> list[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.toml"))


def generate_transformer_params(cfg: ModelConfig) -> list[ParamSpec]:
    """Emit parameters in registration order.

    Matrices are stored as ``(in_features, out_features)``; column-parallel
    matrices shard the output dim, row-parallel ones the input dim. The
    embedding is vocab-parallel, which shards dim 0 like a row split.
    """
    h, v = cfg.hidden_size, cfg.vocab_size
    q_dim = cfg.num_heads * cfg.attn_head_dim
    kv_dim = cfg.kv_heads * cfg.attn_head_dim
    up_out = 2 * cfg.ffn_size if cfg.gated_ffn else cfg.ffn_size
    specs: list[tuple[str, tuple[int, ...], TpSplit, int | None]] = [
        ("embedding", (v, h), TpSplit.ROW, None)
    ]
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}."
        specs += [
            (pre + "attn.qkv", (h, q_dim + 2 * kv_dim), TpSplit.COLUMN, layer),
            (pre + "attn.out", (q_dim, h), TpSplit.ROW, layer),
        ]
        specs += [(pre + f"norm{j}", (h,), TpSplit.NONE, layer)
                  for j in range(cfg.norms_per_layer)]
        specs += [
            (pre + "ffn.up", (h, up_out), TpSplit.COLUMN, layer),
            (pre + "ffn.down", (cfg.ffn_size, h), TpSplit.ROW, layer),
        ]
    specs.append(("final_norm", (h,), TpSplit.NONE, None))
    if not cfg.tie_embeddings:
        specs.append(("head", (h, v), TpSplit.COLUMN, None))
    return [
        ParamSpec(i, name, shape, cfg.dtype_bytes, split, layer)
        for i, (name, shape, split, layer) in enumerate(specs)
    ]


def closed_form_param_count(cfg: ModelConfig) -> int:
    h, v, f = cfg.hidden_size, cfg.vocab_size, cfg.ffn_size
    q = cfg.num_heads * cfg.attn_head_dim
    kv = cfg.kv_heads * cfg.attn_head_dim
    attn = h * (q + 2 * kv) + q * h
    mlp = (3 if cfg.gated_ffn else 2) * h * f
    per_layer = attn + mlp + cfg.norms_per_layer * h
    heads = v * h * (1 if cfg.tie_embeddings else 2)
    return cfg.num_layers * per_layer + heads + h


def build_buffer_layout(params: Sequence[ParamSpec], bucket_capacity: int, R: int) -> BufferLayout:
    """Pack parameters into buckets in the given order.

    A new bucket starts whenever appending the next parameter would push the
    current bucket past ``bucket_capacity`` elements.
    """
    if R < 1:
        raise LayoutError(f"R must be >= 1, got {R}")
    if bucket_capacity < 1:
        raise LayoutError("bucket_capacity must be positive")
    groups: list[list[ParamSpec]] = []
    fill = 0
    for p in params:
        if p.numel > bucket_capacity:
            raise LayoutError(
                f"parameter {p.name!r} ({p.numel} elements) exceeds bucket capacity {bucket_capacity}")
        if not groups or fill + p.numel > bucket_capacity:
            groups.append([])
            fill = 0
        groups[-1].append(p)
        fill += p.numel
    buckets = []
    for i, members in enumerate(groups):
        offsets = [0]
        for p in members[:-1]:
            offsets.append(offsets[-1] + p.numel)
        buckets.append(Bucket(i, tuple(members), tuple(offsets)))
    return BufferLayout(tuple(buckets), R)


def layout_from_sizes(sizes_per_bucket: Iterable[Sequence[int]], R: int,
                      dtype_bytes: int = 2) -> BufferLayout:
    """Build a layout straight from per-bucket 1-D parameter sizes (test/experiment helper)."""
    buckets, pid = [], 0
    for i, sizes in enumerate(sizes_per_bucket):
        members, offsets, off = [], [], 0
        for n in sizes:
            members.append(ParamSpec(pid, f"p{pid}", (int(n),), dtype_bytes))
            offsets.append(off)
            off += int(n)
            pid += 1
        buckets.append(Bucket(i, tuple(members), tuple(offsets)))
    return BufferLayout(tuple(buckets), R)


def tp_shard(p: ParamSpec, tp_degree: int) -> list[TpShardSpec]:
    if tp_degree < 1:
        raise ShardingError("tp_degree must be >= 1")
    if p.tp_splittable is TpSplit.NONE:
        raise ShardingError(f"parameter {p.name!r} is not tensor-parallel splittable")
    if not p.is_matrix:
        raise ShardingError(f"parameter {p.name!r} is not a matrix")
    dim = 1 if p.tp_splittable is TpSplit.COLUMN else 0
    extent = p.shape[dim]
    if extent % tp_degree:
        raise ShardingError(
            f"{p.name!r}: extent {extent} along dim {dim} not divisible by tp={tp_degree}")
    shape = list(p.shape)
    shape[dim] = extent // tp_degree
    return [TpShardSpec(p.id, r, tp_degree, dim, tuple(shape)) for r in range(tp_degree)]


def local_params(params: Sequence[ParamSpec], tp_degree: int) -> list[ParamSpec]:
    """Per-TP-rank view of the parameters: split tensors replaced by their shard shape."""
    if tp_degree == 1:
        return list(params)
    out = []
    for p in params:
        if p.tp_splittable is TpSplit.NONE:
            out.append(p)
        else:
            out.append(replace(p, shape=tp_shard(p, tp_degree)[0].shape))
    return out


@dataclass(frozen=True)
class Workload:
    """Full parameters plus the DP buffer layout each TP rank holds."""

    params: tuple[ParamSpec, ...]
    layout: BufferLayout
    tp_degree: int = 1
    config: ModelConfig | None = field(default=None, compare=False)

    @property
    def dp_degree(self) -> int:
        return self.layout.R

    @property
    def tp_params(self) -> list[ParamSpec]:
        if self.tp_degree == 1:
            return []
        return [p for p in self.params if p.tp_splittable is not TpSplit.NONE]

    def tp_task_params(self, include_embeddings: bool = False) -> list[ParamSpec]:
        """TP-split tensors whose update runs as a holistic matrix task.

        Embedding and output head usually stay on an element-wise optimizer,
        so they are left out unless asked for.
        """
        return [p for p in self.tp_params if include_embeddings or p.layer is not None]

    def param(self, pid: int) -> ParamSpec:
        return self.params[pid]


def build_workload(cfg: ModelConfig, dp_degree: int | None = None,
                   tp_degree: int | None = None) -> Workload:
    tp = cfg.tp_degree if tp_degree is None else tp_degree
    dp = cfg.dp_degree if dp_degree is None else dp_degree
    params = generate_transformer_params(cfg)
    layout = build_buffer_layout(local_params(params, tp), cfg.bucket_capacity, dp)
    return Workload(tuple(params), layout, tp, cfg)
