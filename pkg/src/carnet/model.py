"""CarNet: olive-type encoder, UFPB/DCB decoder, sigmoid head.

Encoder: DB(3->c1) at 1/2, then three stages of DB + residual blocks at 1/4,
1/8 and 1/16 resolution with ``N2 >= N3 >= N4`` blocks ("olive" shape).
Decoder: UFPB merges the last three stage outputs on the 1/4 grid, DCB refines,
a 1x1 conv compresses to ``num_classes - 1`` channels, one x4 up-sampling
restores the input size and a second DCB refines before the sigmoid.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .layers import (BatchNorm2d, BilinearUpsample, Conv2d, ConvTranspose2d, LayerDescriptor,
                     MaxPool2, Module, NumericError, ReLU, Sequential, Sigmoid)
from .tensor import DTYPE, Rng, ShapeError

log = logging.getLogger(__name__)

UPSAMPLE_MODES = ("bilinear", "large_deconv", "small_deconv")


class ConfigError(ValueError):
    """Invalid architecture configuration."""


class NonOliveWarning(UserWarning):
    """Block counts violate N2 >= N3 >= N4."""


@dataclass
class CarNetConfig:
    block_counts: tuple[int, int, int] = (7, 6, 2)
    stage_channels: tuple[int, int, int, int] = (16, 64, 128, 256)
    ufpb_channels: int = 32
    upsample_mode: str = "small_deconv"
    dcb1_enabled: bool = True
    dcb2_enabled: bool = True
    num_classes: int = 2
    input_size: tuple[int, int] = (320, 480)

    def __post_init__(self):
        self.block_counts = tuple(int(v) for v in self.block_counts)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.input_size = tuple(int(v) for v in self.input_size)

    @property
    def is_olive(self) -> bool:
        n2, n3, n4 = self.block_counts
        return n2 >= n3 >= n4

    def validate(self):
        if len(self.block_counts) != 3 or any(n < 1 for n in self.block_counts):
            raise ConfigError(f"block_counts must be three positive integers, got {self.block_counts}")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be four positive integers, got {self.stage_channels}")
        chans = (3,) + self.stage_channels
        for a, b in zip(chans, chans[1:]):
            if b <= a:
                raise ConfigError(f"stage channels must strictly increase (DB concat needs c_out > c_in): {chans}")
        if self.ufpb_channels < 1:
            raise ConfigError(f"ufpb_channels must be positive, got {self.ufpb_channels}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}, got {self.upsample_mode!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        check_input_size(self.input_size)
        if not self.is_olive:
            warnings.warn(f"block counts {self.block_counts} are not olive-shaped (N2 >= N3 >= N4)",
                          NonOliveWarning, stacklevel=2)

    # -- flat key=value text format ------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CarNetConfig":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = getattr(cls(), key)
            kw[key] = _parse_value(key, value, default)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "CarNetConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _parse_value(key, value, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = value.replace("x", ",").split(",")
            return tuple(int(p) for p in parts if p.strip())
        if isinstance(default, int):
            return int(value)
        return value
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for {key}") from None


def check_input_size(size):
    h, w = size
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ConfigError(f"input size {h}x{w} must be a positive multiple of 16 in both dimensions")


# -- blocks ----------------------------------------------------------------------

class DownsamplingBlock(Module):
    """Stride-2 3x3 conv (c_out - c_in channels) in parallel with 2x2 max-pool, concat, BN, ReLU."""

    def __init__(self, c_in, c_out):
        super().__init__()
        if c_out <= c_in:
            raise ConfigError(f"DB needs c_out > c_in, got {c_in} -> {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.conv = Conv2d(c_in, c_out - c_in, 3, stride=2, pad=1, bias=False)
        self.pool = MaxPool2()
        self.bn = BatchNorm2d(c_out)
        self.relu = ReLU(inplace=True)

    def children(self):
        return [("conv", self.conv), ("pool", self.pool), ("bn", self.bn), ("relu", self.relu)]

    def forward(self, x):
        a = self.conv.forward(x)
        b = self.pool.forward(x)
        return self.relu.forward(self.bn.forward(ops.concat_channels(a, b)))

    def backward(self, g, need_dx=True):
        g = self.bn.backward(self.relu.backward(g))
        ga, gb = ops.concat_backward(g, self.c_out - self.c_in)
        dx = self.conv.backward(np.ascontiguousarray(ga), need_dx)
        if not need_dx:
            return None
        return dx + self.pool.backward(gb)

    def describe(self, shape, name):
        r1, s1 = self.conv.describe(shape, f"{name}.conv")
        r2, s2 = self.pool.describe(shape, f"{name}.pool")
        if s1[1:] != s2[1:]:
            raise ShapeError(f"{name}: conv branch {s1} and pool branch {s2} disagree (odd input size?)")
        out = (self.c_out,) + s1[1:]
        cat = LayerDescriptor(f"{name}.concat", "concat", c_in=self.c_out, c_out=self.c_out,
                              out_w=out[2], out_h=out[1])
        r3, _ = self.bn.describe(out, f"{name}.bn")
        r4, _ = self.relu.describe(out, f"{name}.relu")
        return r1 + r2 + [cat] + r3 + r4, out


class ResidualBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN, identity skip, ReLU."""

    def __init__(self, c):
        super().__init__()
        self.c = c
        self.conv1 = Conv2d(c, c, 3, pad=1, bias=False)
        self.bn1 = BatchNorm2d(c)
        self.relu1 = ReLU(inplace=True)
        self.conv2 = Conv2d(c, c, 3, pad=1, bias=False)
        self.bn2 = BatchNorm2d(c)
        self.relu2 = ReLU(inplace=True)

    def children(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("relu1", self.relu1),
                ("conv2", self.conv2), ("bn2", self.bn2), ("relu2", self.relu2)]

    def forward(self, x):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        return self.relu2.forward(ops.add(h, x))

    def backward(self, g):
        g = self.relu2.backward(g)
        gh = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(g)))))
        return gh + g

    def describe(self, shape, name):
        rows = []
        s = shape
        for lname, layer in self.children()[:5]:
            r, s = layer.describe(s, f"{name}.{lname}")
            rows += r
        c, h, w = s
        rows.append(LayerDescriptor(f"{name}.add", "add", c_in=c, c_out=c, out_w=w, out_h=h))
        r, s = self.relu2.describe(s, f"{name}.relu2")
        return rows + r, s


class DecompositionBlock(Sequential):
    """conv3x1 -> conv1x3 -> BN -> conv3x1 -> conv1x3 [-> ReLU]; receptive field 5x5.

    Convs feeding BN directly carry no bias; the other three do.
    """

    def __init__(self, c, final_relu=True):
        layers = [
            ("conv1", Conv2d(c, c, (3, 1), pad=(1, 0), bias=True)),
            ("conv2", Conv2d(c, c, (1, 3), pad=(0, 1), bias=False)),
            ("bn", BatchNorm2d(c)),
            ("conv3", Conv2d(c, c, (3, 1), pad=(1, 0), bias=True)),
            ("conv4", Conv2d(c, c, (1, 3), pad=(0, 1), bias=True)),
        ]
        if final_relu:
            layers.append(("relu", ReLU(inplace=True)))
        super().__init__(*layers)
        self.c = c

    @staticmethod
    def receptive_field() -> tuple[int, int]:
        # two cascaded 3-taps per axis
        return 5, 5


def make_upsampler(mode: str, c: int, factor: int) -> Module:
    if mode == "bilinear":
        return BilinearUpsample(factor)
    if mode == "small_deconv":
        return ConvTranspose2d(c, c, 3, stride=factor, pad=1, output_padding=factor - 1)
    if mode == "large_deconv":
        return ConvTranspose2d(c, c, 2 * factor, stride=factor, pad=factor // 2, output_padding=0)
    raise ConfigError(f"unknown upsample mode {mode!r}")


class UFPB(Module):
    """1x1-compress the stage-2/3/4 taps, up-sample stage 3 (x2) and 4 (x4), sum."""

    def __init__(self, c2, c3, c4, c_out, mode="small_deconv"):
        super().__init__()
        self.c_out = c_out
        self.compress2 = Conv2d(c2, c_out, 1)
        self.compress3 = Conv2d(c3, c_out, 1)
        self.compress4 = Conv2d(c4, c_out, 1)
        self.up3 = make_upsampler(mode, c_out, 2)
        self.up4 = make_upsampler(mode, c_out, 4)

    def children(self):
        return [("compress2", self.compress2), ("compress3", self.compress3), ("compress4", self.compress4),
                ("up3", self.up3), ("up4", self.up4)]

    def forward(self, taps):
        t2, t3, t4 = taps
        h2, w2 = t2.shape[2:]
        if t3.shape[2:] != (h2 // 2, w2 // 2) or t4.shape[2:] != (h2 // 4, w2 // 4) or h2 % 4 or w2 % 4:
            raise ShapeError(f"UFPB taps must be in 1:2:4 spatial ratio, got "
                             f"{t2.shape[2:]}, {t3.shape[2:]}, {t4.shape[2:]}")
        a = self.compress2.forward(t2)
        b = self.up3.forward(self.compress3.forward(t3))
        c = self.up4.forward(self.compress4.forward(t4))
        return a + b + c

    def backward(self, g):
        g2 = self.compress2.backward(g)
        g3 = self.compress3.backward(self.up3.backward(g))
        g4 = self.compress4.backward(self.up4.backward(g))
        return g2, g3, g4

    def describe(self, shapes, name):
        s2, s3, s4 = shapes
        rows = []
        r, a = self.compress2.describe(s2, f"{name}.compress2")
        rows += r
        r, b = self.compress3.describe(s3, f"{name}.compress3")
        rows += r
        r, b = self.up3.describe(b, f"{name}.up3")
        rows += r
        r, c = self.compress4.describe(s4, f"{name}.compress4")
        rows += r
        r, c = self.up4.describe(c, f"{name}.up4")
        rows += r
        if not (a == b == c):
            raise ShapeError(f"{name}: branch shapes {a}, {b}, {c} do not match")
        for i in (1, 2):
            rows.append(LayerDescriptor(f"{name}.add{i}", "add", c_in=a[0], c_out=a[0], out_w=a[2], out_h=a[1]))
        return rows, a


# -- builders (thin, named after the blocks) -------------------------------------------

def build_db(c_in, c_out) -> DownsamplingBlock:
    return DownsamplingBlock(c_in, c_out)


def build_rb(c) -> ResidualBlock:
    return ResidualBlock(c)


def build_dcb(c, final_relu=True) -> DecompositionBlock:
    return DecompositionBlock(c, final_relu)


def build_ufpb(c2, c3, c4, c_out, mode="small_deconv") -> UFPB:
    return UFPB(c2, c3, c4, c_out, mode)


class CarNet(Module):
    """Full network; ``forward`` returns the probability map (N, num_classes-1, H, W)."""

    def __init__(self, cfg: CarNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        n2, n3, n4 = cfg.block_counts
        self.stage1 = Sequential(("db", DownsamplingBlock(3, c1)))
        self.stage2 = Sequential(("db", DownsamplingBlock(c1, c2)), *[(f"rb{i}", ResidualBlock(c2)) for i in range(n2)])
        self.stage3 = Sequential(("db", DownsamplingBlock(c2, c3)), *[(f"rb{i}", ResidualBlock(c3)) for i in range(n3)])
        self.stage4 = Sequential(("db", DownsamplingBlock(c3, c4)), *[(f"rb{i}", ResidualBlock(c4)) for i in range(n4)])
        u = cfg.ufpb_channels
        self.ufpb = UFPB(c2, c3, c4, u, cfg.upsample_mode)
        self.dcb1 = DecompositionBlock(u, final_relu=True) if cfg.dcb1_enabled else None
        k = cfg.num_classes - 1
        self.classifier = Conv2d(u, k, 1)
        self.upsample = make_upsampler(cfg.upsample_mode, k, 4)
        # no ReLU at the end: its output is the logit fed to the sigmoid
        self.dcb2 = DecompositionBlock(k, final_relu=False) if cfg.dcb2_enabled else None
        self.head = Sigmoid()
        self.logits = None
        self._taps = None

    def children(self):
        out = [("stage1", self.stage1), ("stage2", self.stage2), ("stage3", self.stage3),
               ("stage4", self.stage4), ("ufpb", self.ufpb)]
        if self.dcb1 is not None:
            out.append(("dcb1", self.dcb1))
        out += [("classifier", self.classifier), ("upsample", self.upsample)]
        if self.dcb2 is not None:
            out.append(("dcb2", self.dcb2))
        out.append(("head", self.head))
        return out

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"CarNet expects (N, 3, H, W) input, got {x.shape}")
        if self.training and tuple(x.shape[2:]) != self.cfg.input_size:
            raise ShapeError(f"training input size {x.shape[2:]} != configured {self.cfg.input_size}")
        check_input_size(x.shape[2:])

    def forward_logits(self, x, check_finite=True):
        self._check_input(x)
        dtype = x.dtype if x.dtype == np.float64 else DTYPE
        x = np.ascontiguousarray(x, dtype=dtype)

        def run(name, m, v):
            y = m.forward(v)
            if check_finite and not np.isfinite(y).all():
                raise NumericError(name)
            return y

        s1 = run("stage1", self.stage1, x)
        t2 = run("stage2", self.stage2, s1)
        t3 = run("stage3", self.stage3, t2)
        t4 = run("stage4", self.stage4, t3)
        h = run("ufpb", self.ufpb, (t2, t3, t4))
        if self.dcb1 is not None:
            h = run("dcb1", self.dcb1, h)
        h = run("classifier", self.classifier, h)
        h = run("upsample", self.upsample, h)
        if self.dcb2 is not None:
            h = run("dcb2", self.dcb2, h)
        return h

    def forward(self, x, check_finite=True):
        self.logits = self.forward_logits(x, check_finite)
        return self.head.forward(self.logits)

    def backward_logits(self, g, need_input_grad=False):
        """Back-propagate a gradient with respect to the logits (pre-sigmoid).

        Returns the gradient with respect to the input image only when
        ``need_input_grad`` is set.
        """
        if self.dcb2 is not None:
            g = self.dcb2.backward(g)
        g = self.upsample.backward(g)
        g = self.classifier.backward(g)
        if self.dcb1 is not None:
            g = self.dcb1.backward(g)
        g2, g3, g4 = self.ufpb.backward(g)
        g4 = self.stage4.backward(g4)
        g3 = self.stage3.backward(g3 + g4)
        g2 = self.stage2.backward(g2 + g3)
        (_, db1), = self.stage1.layers
        return db1.backward(g2, need_input_grad)

    def backward(self, g, need_input_grad=False):
        """Back-propagate a gradient with respect to the output probabilities."""
        return self.backward_logits(self.head.backward(g), need_input_grad)

    def describe(self, shape=None, name="carnet"):
        if shape is None:
            shape = (3,) + tuple(self.cfg.input_size)
        check_input_size(shape[1:])
        rows = []
        r, s = self.stage1.describe(shape, "stage1")
        rows += r
        r, t2 = self.stage2.describe(s, "stage2")
        rows += r
        r, t3 = self.stage3.describe(t2, "stage3")
        rows += r
        r, t4 = self.stage4.describe(t3, "stage4")
        rows += r
        r, s = self.ufpb.describe((t2, t3, t4), "ufpb")
        rows += r
        tail = [(n, m) for n, m in self.children() if n in ("dcb1", "classifier", "upsample", "dcb2", "head")]
        for n, m in tail:
            r, s = m.describe(s, n)
            rows += r
        return rows, s

    def taps(self):
        """Names of the graph taps: stage-2/3/4 outputs and the logits."""
        return ("stage2", "stage3", "stage4", "logits")


def build_carnet(cfg: CarNetConfig | None = None) -> CarNet:
    return CarNet(cfg or CarNetConfig())


def init_params(model: Module, rng: Rng):
    """Kaiming-normal (fan-in, ReLU gain) conv/deconv weights, zero biases, BN gamma=1 beta=0.

    Parameters are visited in registry order, so the draw sequence is fixed.
    """
    for _, m in model.modules():
        if isinstance(m, Conv2d):
            fan_in = m.c_in * m.kh * m.kw
            std = np.sqrt(2.0 / fan_in)
            m.weight.data[...] = (std * rng.normal(m.weight.size)).reshape(m.weight.shape)
            if m.bias is not None:
                m.bias.data.fill(0.0)
        elif isinstance(m, ConvTranspose2d):
            # fan-in of the transposed conv: input channels times taps per output pixel
            taps = max(1, (m.k // m.stride) ** 2)
            std = np.sqrt(2.0 / (m.c_in * taps))
            m.weight.data[...] = (std * rng.normal(m.weight.size)).reshape(m.weight.shape)
            if m.bias is not None:
                m.bias.data.fill(0.0)
        elif isinstance(m, BatchNorm2d):
            m.gamma.data.fill(1.0)
            m.beta.data.fill(0.0)
            m.reset_running_stats()
    model.zero_grad()
