"""The MV-C3D layer stack, its ablation variants, shape planning and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import ops
from .ops import PoolSpec
from .tensor import ShapeError, Tensor, relu, reshape, tensor_from_bytes, tensor_to_bytes

DEFAULT_CHANNELS = (64, 128, 256, 256, 512, 512, 512, 512)
DEFAULT_FC_DIMS = (4096, 4096)

SCHEDULES: dict[str, tuple[int, ...]] = {
    "fixed-1": (1,) * 8,
    "fixed-3": (3,) * 8,
    "fixed-5": (5,) * 8,
    "fixed-7": (7,) * 8,
    "increasing": (1, 1, 3, 3, 5, 5, 7, 7),
    "decreasing": (7, 5, 5, 5, 3, 3, 1, 1),
}

# Complexity variants: (d2, d3).
FC_PRESETS = {"MV-C3D-S": (1024, 1024), "MV-C3D-M": (2048, 2048), "MV-C3D": (4096, 4096)}

CONV_PATTERNS = ("joint3d", "independent2d")

CONV_LAYERS = ("Conv1", "Conv2", "Conv3a", "Conv3b", "Conv4a", "Conv4b", "Conv5a", "Conv5b")
FC_LAYERS = ("Fc1", "Fc2", "Fc3")
# Layer order; a pool follows the named conv.
LAYER_SEQUENCE = (
    "Conv1", "Pool1", "Conv2", "Pool2", "Conv3a", "Conv3b", "Pool3",
    "Conv4a", "Conv4b", "Pool4", "Conv5a", "Conv5b", "Pool5",
    "Fc1", "Fc2", "Fc3", "Softmax",
)  # fmt: skip

FIRST_POOL = PoolSpec(kernel=(1, 2, 2), stride=(1, 2, 2))
LATER_POOL = PoolSpec(kernel=(2, 2, 2), stride=(2, 2, 2))

CHECKPOINT_MAGIC = b"MVC3DCK\x00"
CHECKPOINT_VERSION = 1


def resolve_schedule(schedule: str | Sequence[int]) -> tuple[int, ...]:
    if isinstance(schedule, str):
        if schedule in SCHEDULES:
            return SCHEDULES[schedule]
        try:
            schedule = [int(s) for s in schedule.replace(",", "-").split("-")]
        except ValueError:
            raise ValueError(f"unknown viewpoint schedule {schedule!r}; presets: {sorted(SCHEDULES)}") from None
    sched = tuple(int(v) for v in schedule)
    if len(sched) != len(CONV_LAYERS):
        raise ValueError(f"viewpoint schedule needs {len(CONV_LAYERS)} entries, got {len(sched)}")
    for v in sched:
        if v < 1 or v % 2 == 0:
            raise ValueError(f"viewpoint kernel extents must be odd and positive, got {sched}")
    return sched


@dataclass(frozen=True)
class ModelConfig:
    n_views: int = 12
    n_classes: int = 40
    viewpoint_schedule: tuple[int, ...] = SCHEDULES["fixed-3"]
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    fc_dims: tuple[int, int] = DEFAULT_FC_DIMS
    conv_pattern: str = "joint3d"
    dropout_rate: float = 0.5
    seed: int = 0
    image_size: int = 112
    init_std: float = 0.05
    pool_view_rounding: str = "floor"

    def __post_init__(self):
        object.__setattr__(self, "viewpoint_schedule", resolve_schedule(self.viewpoint_schedule))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        if self.n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {self.n_views}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.channels) != len(CONV_LAYERS) or min(self.channels) < 1:
            raise ValueError(f"channels needs {len(CONV_LAYERS)} positive widths, got {self.channels}")
        if len(self.fc_dims) != 2 or min(self.fc_dims) < 1:
            raise ValueError(f"fc_dims needs two positive widths, got {self.fc_dims}")
        if self.conv_pattern not in CONV_PATTERNS:
            raise ValueError(f"conv_pattern must be one of {CONV_PATTERNS}, got {self.conv_pattern!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("viewpoint_schedule", "channels", "fc_dims"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def pool_specs(config: ModelConfig) -> dict[str, PoolSpec]:
    first, later = FIRST_POOL, LATER_POOL
    if config.pool_view_rounding != "floor":
        first = replace(first, viewpoint_rounding=config.pool_view_rounding)
        later = replace(later, viewpoint_rounding=config.pool_view_rounding)
    return {"Pool1": first, "Pool2": later, "Pool3": later, "Pool4": later, "Pool5": later}


_POOL_AFTER = {"Conv1": "Pool1", "Conv2": "Pool2", "Conv3b": "Pool3", "Conv4b": "Pool4", "Conv5b": "Pool5"}


def shape_plan(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output sizes, formatted as in the layer table.

    Convolution and pooling rows are ``(views, height, width, channels)``;
    the input row is ``(3, N, H, W)``; dense rows are ``(width,)``.
    """
    pools = pool_specs(config)
    v, h, w = config.n_views, config.image_size, config.image_size
    plan: list[tuple[str, tuple[int, ...]]] = [("Input", (3, v, h, w))]
    c = 3
    for name, width in zip(CONV_LAYERS, config.channels):
        c = width
        plan.append((name, (v, h, w, c)))
        if name in _POOL_AFTER:
            pname = _POOL_AFTER[name]
            v, h, w = ops.pool_output_shape((v, h, w), pools[pname])
            plan.append((pname, (v, h, w, c)))
    d2, d3 = config.fc_dims
    plan += [("Fc1", (d2,)), ("Fc2", (d3,)), ("Fc3", (config.n_classes,)), ("Softmax", (config.n_classes,))]
    return plan


def flatten_dim(config: ModelConfig) -> int:
    v, h, w, c = dict(shape_plan(config))["Pool5"]
    return v * h * w * c


class ParamCount(NamedTuple):
    total: int
    fc_estimate: int


def param_count(config: ModelConfig) -> ParamCount:
    """Exact parameter total (weights + biases) and the FC-only estimate
    ``d1*d2 + d2*d3 + d3*k``."""
    return ParamCount(sum(int(np.prod(s)) for s in param_shapes(config).values()), _fc_estimate(config))


def _fc_estimate(config: ModelConfig) -> int:
    d1 = flatten_dim(config)
    d2, d3 = config.fc_dims
    return d1 * d2 + d2 * d3 + d3 * config.n_classes


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    plan = dict(shape_plan(config))
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for name, c_out, kv in zip(CONV_LAYERS, config.channels, config.viewpoint_schedule):
        if config.conv_pattern == "joint3d":
            shapes[f"{name}.weight"] = (c_out, c_in, kv, 3, 3)
            shapes[f"{name}.bias"] = (c_out,)
        else:
            views = plan[name][0]
            shapes[f"{name}.weight"] = (views, c_out, c_in, 3, 3)
            shapes[f"{name}.bias"] = (views, c_out)
        c_in = c_out
    widths = (flatten_dim(config),) + config.fc_dims + (config.n_classes,)
    for name, d_in, d_out in zip(FC_LAYERS, widths[:-1], widths[1:]):
        shapes[f"{name}.weight"] = (d_in, d_out)
        shapes[f"{name}.bias"] = (d_out,)
    return shapes


@dataclass
class Model:
    """An instantiated MV-C3D network bound to one view count."""

    config: ModelConfig
    params: dict[str, Tensor] = field(repr=False)

    @property
    def layers(self) -> tuple[str, ...]:
        return LAYER_SEQUENCE

    @property
    def flatten_dim(self) -> int:
        return flatten_dim(self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def regularized(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.endswith(".weight")]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def requires_grad_(self, flag: bool = True) -> "Model":
        for t in self.params.values():
            t.requires_grad = flag
        return self

    def _check_batch(self, batch) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != 3:
            raise ShapeError(f"batch must be [B, 3, N, H, W], got {x.shape}")
        if x.shape[2] != cfg.n_views:
            raise ShapeError(f"model expects N={cfg.n_views} views, batch has N={x.shape[2]}")
        if x.shape[3:] != (cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"model expects {cfg.image_size}x{cfg.image_size} images, batch has {x.shape[3]}x{x.shape[4]}"
            )
        return x

    def run(self, batch, training: bool = False, rng: np.random.Generator | None = None, shapes: list | None = None):
        """Forward pass returning a dict with ``pre_flatten``, ``fc2`` and ``logits``.

        When ``shapes`` is a list, each layer's (name, output shape) is
        appended in the layer-table format.
        """
        x = self._check_batch(batch)
        p = self.params
        pools = pool_specs(self.config)
        if shapes is not None:
            shapes.append(("Input", x.shape[1:]))
        for name in CONV_LAYERS:
            if self.config.conv_pattern == "joint3d":
                x = ops.conv3d(x, p[f"{name}.weight"], p[f"{name}.bias"])
            else:
                x = ops.conv2d_independent(x, p[f"{name}.weight"], p[f"{name}.bias"])
            x = relu(x)
            if shapes is not None:
                shapes.append((name, _table_shape(x)))
            if name in _POOL_AFTER:
                pname = _POOL_AFTER[name]
                x, _ = ops.maxpool3d(x, pools[pname])
                if shapes is not None:
                    shapes.append((pname, _table_shape(x)))
        pre_flatten = x
        x = reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        rate = self.config.dropout_rate
        x = relu(ops.fully_connected(x, p["Fc1.weight"], p["Fc1.bias"]))
        x = ops.dropout(x, rate, training, rng)
        fc2 = relu(ops.fully_connected(x, p["Fc2.weight"], p["Fc2.bias"]))
        x = ops.dropout(fc2, rate, training, rng)
        logits = ops.fully_connected(x, p["Fc3.weight"], p["Fc3.bias"])
        if shapes is not None:
            shapes += [("Fc1", (self.config.fc_dims[0],)), ("Fc2", fc2.shape[1:]), ("Fc3", logits.shape[1:])]
            shapes.append(("Softmax", logits.shape[1:]))
        return {"pre_flatten": pre_flatten, "fc2": fc2, "logits": logits}

    def forward(self, batch, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``[B, k]``; softmax is left to the loss and evaluation code."""
        return self.run(batch, training, rng)["logits"]

    def predict_proba(self, batch) -> np.ndarray:
        return ops.softmax(self.forward(batch)).data


def _table_shape(x: Tensor) -> tuple[int, ...]:
    _, c, v, h, w = x.shape
    return (v, h, w, c)


def build(config: ModelConfig) -> Model:
    """Instantiate parameters: weights ~ N(0, init_std), biases zero."""
    assert flatten_dim(config) > 0
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            data = rng.normal(0.0, config.init_std, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config, params)


def extract_features(model: Model, batch) -> Tensor:
    """Fc2 activations (post-ReLU), L2-normalized per row.

    All-zero rows stay zero.
    """
    fc2 = model.run(batch, training=False)["fc2"].data
    norms = np.linalg.norm(fc2, axis=1, keepdims=True)
    return Tensor(fc2 / np.where(norms > 0, norms, 1.0))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: Model, extra: dict | None = None) -> bytes:
    """Serialize as magic, version, canonical JSON header, named tensor
    blocks, then a SHA-256 of everything before it."""
    header = _canonical_json({"config": model.config.to_dict(), "extra": extra or {}})
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    parts.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, tensor_to_bytes(t)]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path, extra: dict | None = None) -> str:
    """Write a checkpoint; returns its hex checksum."""
    blob = checkpoint_bytes(model, extra)
    Path(path).write_bytes(blob)
    return blob[-32:].hex()


def checkpoint_checksum(path) -> str:
    return Path(path).read_bytes()[-32:].hex()


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Model, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 48 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(body[pos : pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        t, pos = tensor_from_bytes(body, pos)
        t.requires_grad = True
        t.name = name
        params[name] = t
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match the stored config")
    return Model(config, params), header.get("extra", {})
