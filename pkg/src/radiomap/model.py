"""UNet with deformable blocks (plus ablation variants) on top of the engine."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .engine import BatchNorm2d, Conv2d, ConvTranspose2d, DeformConv2d, Module, Tensor, no_grad
from .engine import ops

BLOCK_TYPES = ("deformable", "conv", "aspp")
ASPP_RATES = (1, 2, 4, 8)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    depth: int = 3
    block_type: str = "deformable"
    kernel: int = 3  # only used by block_type "conv"
    in_channels: int = 6
    out_channels: int = 1
    bottleneck_block: bool = True
    decoder_blocks: bool = True
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.width < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ------------------------------------------------------------------ blocks
def _conv_macs(conv: Conv2d, h: int, w: int) -> tuple[int, int]:
    m = conv.c_out * conv.c_in * conv.k * conv.k * h * w
    return m, m + (conv.c_out * h * w if conv.bias is not None else 0)


def _zero_gamma(bn: BatchNorm2d) -> BatchNorm2d:
    # residual branches start as identity maps, which speeds up early training
    bn.gamma.data = np.zeros_like(bn.gamma.data)
    return bn


class DoubleConv(Module):
    """Conv-BN-ReLU twice with a residual around the second conv."""

    def __init__(self, c_in, c_out, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype=dtype)
        self.bn2 = _zero_gamma(BatchNorm2d(c_out, dtype=dtype))

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        return ops.relu(ops.add(self.bn2(self.conv2(h)), h))

    def macs(self, h, w):
        a, b = _conv_macs(self.conv1, h, w)
        c, d = _conv_macs(self.conv2, h, w)
        return a + c, b + d


class PlainConv(Module):
    """Standard KxK conv stored under ``.conv`` so names line up with :class:`DeformConv2d`."""

    def __init__(self, c_in, c_out, k, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, rng, dtype=dtype)

    def forward(self, x):
        return self.conv(x)

    def macs(self, h, w):
        return _conv_macs(self.conv, h, w)


class DeformUnit(DeformConv2d):
    def macs(self, h, w):
        a, b = _conv_macs(self.conv, h, w)
        c, d = _conv_macs(self.offset, h, w)
        # bilinear interpolation: 4 multiplies per sampled input value
        interp = 4 * self.conv.c_in * self.k * self.k * h * w
        return a + c + interp, b + d + interp


class ASPPUnit(Module):
    """Parallel dilated 3x3 convs fused by a 1x1 conv."""

    def __init__(self, c, rng, dtype, rates=ASPP_RATES):
        super().__init__()
        self.rates = tuple(rates)
        for r in self.rates:
            setattr(self, f"branch{r}", Conv2d(c, c, 3, rng, dilation=r, dtype=dtype))
        self.fuse = Conv2d(c * len(self.rates), c, 1, rng, dtype=dtype)

    def forward(self, x):
        out = None
        for r in self.rates:
            y = getattr(self, f"branch{r}")(x)
            out = y if out is None else ops.concat_channels(out, y)
        return self.fuse(out)

    def macs(self, h, w):
        parts = [_conv_macs(getattr(self, f"branch{r}"), h, w) for r in self.rates] + [_conv_macs(self.fuse, h, w)]
        return sum(p[0] for p in parts), sum(p[1] for p in parts)


class SpecialBlock(Module):
    """Two units of (special conv, BN, ReLU) with a residual from the block input."""

    def __init__(self, c, cfg: ModelConfig, rng):
        super().__init__()
        dt = cfg.dtype
        if cfg.block_type == "aspp":
            self.conv1 = ASPPUnit(c, rng, dt)
            self.conv2 = ASPPUnit(c, rng, dt)
        elif cfg.block_type == "deformable":
            self.conv1 = DeformUnit(c, c, 3, rng, dtype=dt)
            self.conv2 = DeformUnit(c, c, 3, rng, dtype=dt)
        else:
            self.conv1 = PlainConv(c, c, cfg.kernel, rng, dt)
            self.conv2 = PlainConv(c, c, cfg.kernel, rng, dt)
        self.bn1 = BatchNorm2d(c, dtype=dt)
        self.bn2 = _zero_gamma(BatchNorm2d(c, dtype=dt))

    def forward(self, x):
        h = ops.relu(self.bn1(self.conv1(x)))
        return ops.relu(ops.add(self.bn2(self.conv2(h)), x))

    def macs(self, h, w):
        a, b = self.conv1.macs(h, w)
        c, d = self.conv2.macs(h, w)
        return a + c, b + d


class _Identity(Module):
    def forward(self, x):
        return x

    def macs(self, h, w):
        return 0, 0


# ------------------------------------------------------------------ network
class UNetDCN(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        object.__setattr__(self, "config", cfg)
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        C, d = cfg.width, cfg.depth
        c_prev = cfg.in_channels
        for s in range(d):
            setattr(self, f"enc{s}", DoubleConv(c_prev, C * 2 ** s, rng, dt))
            c_prev = C * 2 ** s
        self.bottleneck = DoubleConv(c_prev, C * 2 ** d, rng, dt)
        self.bottleneck_block = SpecialBlock(C * 2 ** d, cfg, rng) if cfg.bottleneck_block else _Identity()
        for s in reversed(range(d)):
            c_up = C * 2 ** (s + 1)
            c = C * 2 ** s
            setattr(self, f"up{s}", ConvTranspose2d(c_up, c, rng, dtype=dt))
            setattr(self, f"dec{s}", DoubleConv(2 * c, c, rng, dt))
            setattr(self, f"dec_block{s}", SpecialBlock(c, cfg, rng) if cfg.decoder_blocks else _Identity())
        self.head = Conv2d(C, cfg.out_channels, 1, rng, dtype=dt)
        self.name_parameters()

    def check_input(self, shape):
        cfg = self.config
        if len(shape) != 4 or shape[1] != cfg.in_channels:
            raise ValueError(f"expected (N, {cfg.in_channels}, H, W) input, got {tuple(shape)}")
        m = 2 ** cfg.depth
        if shape[2] % m or shape[3] % m:
            raise ValueError(f"H and W must be divisible by 2^depth = {m}, got {shape[2]}x{shape[3]}")

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.config.dtype))
        self.check_input(x.shape)
        d = self.config.depth
        skips = []
        h = x
        for s in range(d):
            h = getattr(self, f"enc{s}")(h)
            skips.append(h)
            h = ops.maxpool2x2(h)
        h = self.bottleneck_block(self.bottleneck(h))
        for s in reversed(range(d)):
            h = getattr(self, f"up{s}")(h)
            h = getattr(self, f"dec{s}")(ops.concat_channels(h, skips[s]))
            h = getattr(self, f"dec_block{s}")(h)
        return self.head(h)

    def layer_table(self, h: int, w: int) -> list[tuple[str, int, int, int]]:
        """Rows of (layer, params, MACs, MACs including bias additions) for an HxW input."""
        rows = []

        def add(name, mod, hh, ww):
            n = sum(p.size for p in mod.parameters())
            m, mb = mod.macs(hh, ww)
            rows.append((name, n, m, mb))

        d = self.config.depth
        for s in range(d):
            add(f"enc{s}", getattr(self, f"enc{s}"), h >> s, w >> s)
        add("bottleneck", self.bottleneck, h >> d, w >> d)
        add("bottleneck_block", self.bottleneck_block, h >> d, w >> d)
        for s in reversed(range(d)):
            up = getattr(self, f"up{s}")
            hi, wi = h >> (s + 1), w >> (s + 1)
            m = up.weight.size * hi * wi
            rows.append((f"up{s}", up.weight.size + up.bias.size, m, m + up.bias.size * 4 * hi * wi))
            add(f"dec{s}", getattr(self, f"dec{s}"), h >> s, w >> s)
            add(f"dec_block{s}", getattr(self, f"dec_block{s}"), h >> s, w >> s)
        rows.append(("head", sum(p.size for p in self.head.parameters()), *_conv_macs(self.head, h, w)))
        # batch-norm affine parameters are counted in params but contribute no MACs
        return rows


def build_model(config: ModelConfig) -> UNetDCN:
    return UNetDCN(config)


def conv_param_count(c_in: int, c_out: int, k: int, bias: bool = True) -> int:
    return c_out * c_in * k * k + (c_out if bias else 0)


@dataclass(frozen=True)
class Complexity:
    params: int
    macs: int
    macs_with_bias: int
    input_shape: tuple[int, int]


def param_and_mac_count(config: ModelConfig, input_hw: tuple[int, int] = (256, 256)) -> Complexity:
    model = build_model(config)
    h, w = input_hw
    model.check_input((1, config.in_channels, h, w))
    rows = model.layer_table(h, w)
    params = sum(p.size for p in model.parameters())
    return Complexity(params, sum(r[2] for r in rows), sum(r[3] for r in rows), (h, w))


def predict(model: UNetDCN, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode forward over a numpy batch ``(N, C, H, W)``; returns ``(N, 1, H, W)`` float64."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(inputs), batch_size):
                out.append(model(np.asarray(inputs[i:i + batch_size], dtype=model.config.dtype)).data)
    finally:
        model.train(was_training)
    return np.concatenate(out).astype(np.float64)


# ------------------------------------------------------------------ checkpoints
MAGIC = b"RMAPCKPT"
SCHEMA_VERSION = 1


def save_checkpoint(path, model: UNetDCN, extra: dict | None = None):
    """Binary checkpoint: magic, u32 header length, JSON header, little-endian float32 blobs."""
    sd = model.state_dict()
    entries, offset = [], 0
    for name, arr in sd.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {"schema_version": SCHEMA_VERSION, "model_config": model.config.to_dict(), "tensors": entries}
    header.update(extra or {})
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for arr in sd.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[UNetDCN, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + n])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {header.get('schema_version')}")
    blob = raw[start + n:]
    cfg = ModelConfig.from_dict(header["model_config"])
    model = build_model(cfg)
    sd = {}
    for e in header["tensors"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * size
        if end > len(blob):
            raise ValueError(f"{path}: truncated data for {e['name']}")
        sd[e["name"]] = np.frombuffer(blob, dtype="<f4", count=size, offset=e["offset"]).reshape(e["shape"]).astype(cfg.dtype)
    model.load_state_dict(sd)
    model.eval()
    model.trained = True
    return model, header
