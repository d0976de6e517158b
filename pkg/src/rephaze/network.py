"""The residual attention dehazing network.

The trunk is: 3x3 head conv to 64 channels, a stride-2 3x3 conv that halves
the resolution, six multi-branch attention blocks, bilinear x2 upsampling
followed by a 3x3 conv, a 1x1 channel shrink to 16, a long skip from the
head output through its own 1x1 shrink, and a reflection-padded 7x7 tail
that emits a 3-channel residual added to the input.

Each block exists in two interchangeable forms: the multi-branch training
form (3x3 conv + 1x1 conv + identity, summed, then batch norm) and a fused
single 3x3 convolution produced by :mod:`rephaze.reparam`.  The activation,
attention and local residual parts are shared by both forms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    ChannelAttentionParams,
    SpatialAttentionParams,
    channel_attention,
    channel_attention_params,
    spatial_attention,
    spatial_attention_params,
)
from .errors import ContractError, ShapeError, StateError
from .layers import BNParams, ConvParams, batch_norm, bilinear_upsample, bn_params, conv2d, conv_params
from .tensor import Tensor, add, relu

__all__ = [
    "MABlockParams",
    "ModelConfig",
    "ModelParams",
    "build_model",
    "ma_block_forward",
    "forward",
    "forward_trace",
    "count_parameters",
    "named_parameters",
    "trainable_parameters",
    "set_bn_mode",
    "save_model",
    "load_model",
    "MAGIC",
    "FORM_TRAINING",
    "FORM_FUSED",
]


@dataclass
class MABlockParams:
    """One multi-branch attention block.

    Exactly one of the branch set (``branch3``/``branch1``/``bn``) and
    ``fused`` is active: fusing a block drops the branch set.  ``bn_per_branch``
    swaps the single post-sum batch norm for one per branch (``bn3``, ``bn1``,
    ``bn_id``); that variant exists for ablations and cannot be fused.
    """

    branch3: Optional[ConvParams]
    branch1: Optional[ConvParams]
    bn: Optional[BNParams]
    sa: Optional[SpatialAttentionParams]
    ca: Optional[ChannelAttentionParams]
    fused: Optional[ConvParams] = None
    use_bn: bool = True
    use_attention: bool = True
    use_local_residual: bool = True
    bn_per_branch: bool = False
    bn3: Optional[BNParams] = None
    bn1: Optional[BNParams] = None
    bn_id: Optional[BNParams] = None

    @property
    def is_fused(self) -> bool:
        return self.fused is not None


@dataclass
class ModelConfig:
    """Structural configuration; defaults give the standard model."""

    width: int = 64
    num_blocks: int = 6
    skip_width: int = 16
    sa_hidden: int = 8
    ca_ratio: int = 16
    use_bn: bool = True
    use_attention: bool = True
    use_local_residual: bool = True
    bn_per_branch: bool = False


@dataclass
class ModelParams:
    """Full parameter set, tagged with its form ("training" or "fused")."""

    head: ConvParams
    down: ConvParams
    blocks: list[MABlockParams]
    up_conv: ConvParams
    shrink: ConvParams
    skip_shrink: ConvParams
    tail: ConvParams
    form: str = "training"
    config: ModelConfig = field(default_factory=ModelConfig)


def _ma_block_params(c: int, cfg: ModelConfig, rng: np.random.Generator) -> MABlockParams:
    per_branch = cfg.bn_per_branch
    return MABlockParams(
        branch3=conv_params(c, c, 3, rng, padding=1),
        branch1=conv_params(c, c, 1, rng),
        bn=bn_params(c) if (cfg.use_bn and not per_branch) else None,
        sa=spatial_attention_params(cfg.sa_hidden, rng) if cfg.use_attention else None,
        ca=channel_attention_params(c, cfg.ca_ratio, rng) if cfg.use_attention else None,
        use_bn=cfg.use_bn,
        use_attention=cfg.use_attention,
        use_local_residual=cfg.use_local_residual,
        bn_per_branch=per_branch,
        bn3=bn_params(c) if per_branch else None,
        bn1=bn_params(c) if per_branch else None,
        bn_id=bn_params(c) if per_branch else None,
    )


def build_model(config: Optional[ModelConfig] = None, seed: int = 0) -> ModelParams:
    """Construct a freshly initialized training-form model.

    The tail convolution is zero-initialized, so a new model is exactly the
    identity restoration; everything else uses He initialization.
    """
    cfg = config or ModelConfig()
    rng = np.random.default_rng(seed)
    c, s = cfg.width, cfg.skip_width
    return ModelParams(
        head=conv_params(3, c, 3, rng, padding=1),
        down=conv_params(c, c, 3, rng, stride=2, padding=1),
        blocks=[_ma_block_params(c, cfg, rng) for _ in range(cfg.num_blocks)],
        up_conv=conv_params(c, c, 3, rng, padding=1),
        shrink=conv_params(c, s, 1, rng),
        skip_shrink=conv_params(c, s, 1, rng),
        tail=conv_params(s, 3, 7, rng, padding=3, padding_mode="reflection", init="zeros"),
        form="training",
        config=cfg,
    )


def ma_block_forward(x: Tensor, p: MABlockParams) -> Tensor:
    """Run one block in whichever form its parameters carry."""
    if p.is_fused:
        y = conv2d(x, p.fused)
    elif p.bn_per_branch:
        if p.branch3 is None:
            raise StateError("block has neither branch parameters nor fused weights")
        y = add(add(batch_norm(conv2d(x, p.branch3), p.bn3), batch_norm(conv2d(x, p.branch1), p.bn1)), batch_norm(x, p.bn_id))
    else:
        if p.branch3 is None:
            raise StateError("block has neither branch parameters nor fused weights")
        y = add(add(conv2d(x, p.branch3), conv2d(x, p.branch1)), x)
        if p.use_bn:
            y = batch_norm(y, p.bn)
    y = relu(y)
    if p.use_attention:
        y = channel_attention(spatial_attention(y, p.sa), p.ca)
    if p.use_local_residual:
        y = add(y, x)
    return y


def _check_input(x: Tensor) -> None:
    b, c, h, w = x.shape
    if c != 3:
        raise ShapeError(f"expected a 3-channel image batch, got {c} channels")
    if h % 32 or w % 32:
        raise ContractError(
            f"spatial size {h}x{w} must be a multiple of 32 "
            "(pad the input, e.g. with reflection padding, and crop the output)"
        )


def forward(x: Tensor, m: ModelParams) -> Tensor:
    """Restore an image batch: returns input plus the predicted residual."""
    return _forward_impl(x, m, trace=None)


def forward_trace(x: Tensor, m: ModelParams) -> tuple[Tensor, list[Tensor]]:
    """Like :func:`forward` but also returns each block's input, for
    per-block equivalence probes."""
    trace: list[Tensor] = []
    out = _forward_impl(x, m, trace=trace)
    return out, trace


def _forward_impl(x: Tensor, m: ModelParams, trace: Optional[list]) -> Tensor:
    _check_input(x)
    f0 = relu(conv2d(x, m.head))
    d = relu(conv2d(f0, m.down))
    for block in m.blocks:
        if trace is not None:
            trace.append(d)
        d = ma_block_forward(d, block)
    u = relu(conv2d(bilinear_upsample(d, 2), m.up_conv))
    s = add(conv2d(u, m.shrink), conv2d(f0, m.skip_shrink))
    residual = conv2d(s, m.tail)
    return add(x, residual)


# ---------------------------------------------------------------------------
# Parameter bookkeeping
# ---------------------------------------------------------------------------


def _conv_records(prefix: str, p: ConvParams):
    yield f"{prefix}.weight", p.weight
    yield f"{prefix}.bias", p.bias


def _bn_records(prefix: str, p: BNParams):
    yield f"{prefix}.gamma", p.gamma
    yield f"{prefix}.beta", p.beta


def named_parameters(m: ModelParams) -> list[tuple[str, Tensor]]:
    """Trainable tensors of the active form, in a stable order."""
    out: list[tuple[str, Tensor]] = []
    out += _conv_records("head", m.head)
    out += _conv_records("down", m.down)
    for i, b in enumerate(m.blocks):
        pre = f"blocks.{i}"
        if b.is_fused:
            out += _conv_records(f"{pre}.fused", b.fused)
        else:
            out += _conv_records(f"{pre}.branch3", b.branch3)
            out += _conv_records(f"{pre}.branch1", b.branch1)
            if b.bn_per_branch:
                out += _bn_records(f"{pre}.bn3", b.bn3)
                out += _bn_records(f"{pre}.bn1", b.bn1)
                out += _bn_records(f"{pre}.bn_id", b.bn_id)
            elif b.use_bn:
                out += _bn_records(f"{pre}.bn", b.bn)
        if b.use_attention:
            out += _conv_records(f"{pre}.sa.conv1", b.sa.conv1)
            out += _conv_records(f"{pre}.sa.conv2", b.sa.conv2)
            out += _conv_records(f"{pre}.ca.conv1", b.ca.conv1)
            out += _conv_records(f"{pre}.ca.conv2", b.ca.conv2)
    out += _conv_records("up_conv", m.up_conv)
    out += _conv_records("shrink", m.shrink)
    out += _conv_records("skip_shrink", m.skip_shrink)
    out += _conv_records("tail", m.tail)
    return out


def trainable_parameters(m: ModelParams) -> list[tuple[str, Tensor]]:
    return named_parameters(m)


def count_parameters(m: ModelParams) -> int:
    """Exact number of trainable scalars in the active form (running
    statistics are buffers, not parameters)."""
    return sum(t.data.size for _, t in named_parameters(m))


def _all_bn(m: ModelParams):
    for b in m.blocks:
        for bn in (b.bn, b.bn3, b.bn1, b.bn_id):
            if bn is not None:
                yield bn


def set_bn_mode(m: ModelParams, mode: str) -> None:
    """Switch every batch-norm layer to "train" or "eval"."""
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown batch-norm mode {mode!r}")
    for bn in _all_bn(m):
        bn.mode = mode


# ---------------------------------------------------------------------------
# Serialization: flat binary container, little-endian throughout.
#
#   magic "ERRA1" | form u8 (0=training, 1=fused) | record count u32
#   record: name length u32 | name utf-8 | shape 4 x u32 | payload f32[]
#
# Round-trips are bit-exact.  A pseudo-record "__config__" carries the
# structural configuration so a file fully describes its model.
# ---------------------------------------------------------------------------

MAGIC = b"ERRA1"
FORM_TRAINING = 0
FORM_FUSED = 1


def _buffer_records(m: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, b in enumerate(m.blocks):
        for name, bn in ((f"blocks.{i}.bn", b.bn), (f"blocks.{i}.bn3", b.bn3), (f"blocks.{i}.bn1", b.bn1), (f"blocks.{i}.bn_id", b.bn_id)):
            if bn is None or b.is_fused:
                continue
            c = bn.channels
            out.append((f"{name}.running_mean", bn.running_mean.astype(np.float32).reshape(1, c, 1, 1)))
            out.append((f"{name}.running_var", bn.running_var.astype(np.float32).reshape(1, c, 1, 1)))
    return out


def _config_vector(cfg: ModelConfig) -> np.ndarray:
    vals = [
        cfg.width,
        cfg.num_blocks,
        cfg.skip_width,
        cfg.sa_hidden,
        cfg.ca_ratio,
        int(cfg.use_bn),
        int(cfg.use_attention),
        int(cfg.use_local_residual),
        int(cfg.bn_per_branch),
    ]
    return np.asarray(vals, dtype=np.float32).reshape(1, 1, 1, len(vals))


def _config_from_vector(v: np.ndarray) -> ModelConfig:
    vals = [int(round(float(x))) for x in v.reshape(-1)]
    return ModelConfig(
        width=vals[0],
        num_blocks=vals[1],
        skip_width=vals[2],
        sa_hidden=vals[3],
        ca_ratio=vals[4],
        use_bn=bool(vals[5]),
        use_attention=bool(vals[6]),
        use_local_residual=bool(vals[7]),
        bn_per_branch=bool(vals[8]),
    )


def save_model(m: ModelParams, path) -> None:
    records: list[tuple[str, np.ndarray]] = [("__config__", _config_vector(m.config))]
    records += [(name, t.data.astype(np.float32, copy=False)) for name, t in named_parameters(m)]
    records += _buffer_records(m)
    form = FORM_FUSED if m.form == "fused" else FORM_TRAINING
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", form, len(records)))
        for name, arr in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<4I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError("model file is truncated")
    return buf


def load_model(path) -> ModelParams:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise ContractError(f"{path}: not a model file (bad magic)")
        form_tag, count = struct.unpack("<BI", _read_exact(fh, 5))
        records: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            shape = struct.unpack("<4I", _read_exact(fh, 16))
            size = int(np.prod(shape))
            data = np.frombuffer(_read_exact(fh, size * 4), dtype="<f4").reshape(shape)
            records[name] = data.astype(np.float32)
    if "__config__" not in records:
        raise ContractError(f"{path}: missing __config__ record")
    cfg = _config_from_vector(records.pop("__config__"))
    model = build_model(cfg, seed=0)
    model.form = "fused" if form_tag == FORM_FUSED else "training"
    if model.form == "fused":
        c = cfg.width
        for b in model.blocks:
            b.fused = ConvParams(
                Tensor(np.zeros((c, c, 3, 3), dtype=np.float32), requires_grad=True),
                Tensor(np.zeros((1, c, 1, 1), dtype=np.float32), requires_grad=True),
                stride=1,
                padding=1,
            )
            b.branch3 = b.branch1 = None
            b.bn = b.bn3 = b.bn1 = b.bn_id = None
    expected = dict(named_parameters(model))
    for name, t in expected.items():
        if name not in records:
            raise ContractError(f"{path}: missing parameter record {name!r}")
        arr = records.pop(name)
        if arr.shape != t.shape:
            raise ContractError(f"{path}: record {name!r} has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    for i, b in enumerate(model.blocks):
        for key, bn in ((f"blocks.{i}.bn", b.bn), (f"blocks.{i}.bn3", b.bn3), (f"blocks.{i}.bn1", b.bn1), (f"blocks.{i}.bn_id", b.bn_id)):
            if bn is None:
                continue
            for stat, target in (("running_mean", "running_mean"), ("running_var", "running_var")):
                rec = records.pop(f"{key}.{stat}", None)
                if rec is not None:
                    setattr(bn, target, rec.reshape(-1).astype(np.float64))
    if records:
        raise ContractError(f"{path}: unexpected records {sorted(records)}")
    return model
