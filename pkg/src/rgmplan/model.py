"""Recurrent generative model: generator G and discriminators D1 (safety), D2 (connectivity).

Generator, one horizontal pass::

    m, q, z --(own CBR stage each, stride 2)--> concat
      --> CBR stride 2 --> CBR --> CBR            encoder, output (C, S/4, S/4)
      --> ConvGRU-1 --> residual blocks --> ConvGRU-2
      --> 2x (upsample stage) --> conv 3x3 --> sigmoid   decoder, output (3, S, S)

For passes after the first, the previous output (3 channels) replaces the
noise image and is projected to ``z_channels`` by a 1x1 convolution.  GRU
hidden states carry over between passes; all other weights are shared.
Generator BatchNorm layers keep separate running statistics per pass: pass 1
sees noise where later passes see images, so one running average would fit
neither in eval mode.

Discriminator::

    h    --> CBLR s2 --> self-attention --+
                                          concat --> CBLR s2 --> CBLR s2 --> CBLR s2
    cond --> CBLR s2 --> self-attention --+          --> self-attention (bottleneck 2C, S/16)
      --> conv (valid) --> sigmoid
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class RGMConfig:
    image_size: int = 64
    T: int = 4
    base_channels: int = 256
    n_residual_blocks: int = 4
    z_channels: int = 1
    d_base_channels: int | None = None
    upsample: str = "transpose"  # or "nearest"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.image_size % 16:
            raise ValueError("image_size must be divisible by 16 (encoder /4, discriminator /16)")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.base_channels < 8:
            raise ValueError("base_channels must be at least 8")
        if self.upsample not in ("transpose", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    @property
    def d_channels(self) -> int:
        return self.d_base_channels or self.base_channels

    @classmethod
    def desk(cls, image_size: int = 32, **kw) -> "RGMConfig":
        kw.setdefault("base_channels", 32)
        return cls(image_size=image_size, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeneratorState:
    gru1_hidden: Tensor | None = None
    gru2_hidden: Tensor | None = None
    last_output: Tensor | None = None


def _buffer_key(layer: str, kind: str, pass_index: int) -> str:
    """Pass 1 keeps the plain name; later passes get an ``@i`` suffix."""
    key = f"{layer}.{kind}"
    return key if pass_index == 0 else f"{key}@{pass_index + 1}"


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, math.sqrt(gain / fan_in), size=shape)


def _xavier(rng, shape, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)


class RGM:
    """Parameter store plus forward functions for G, D1 and D2."""

    def __init__(self, cfg: RGMConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.training = True
        self.pass_index = 0
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # ------------------------------------------------------------ registry

    def _param(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Parameter(value, name=name, dtype=self.dtype)

    def _conv(self, name, c_in, c_out, k, init="he", bias=True, transpose=False, gain=2.0):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
        if init == "he":
            w = _he(self._rng, shape, fan_in, gain)
        elif init == "xavier":
            w = _xavier(self._rng, shape, fan_in, fan_out)
        else:
            w = np.zeros(shape)
        self._param(f"{name}.w", w)
        if bias:
            self._param(f"{name}.b", np.zeros(c_out))

    def _bn(self, name, c):
        self._param(f"{name}.gamma", np.ones(c))
        self._param(f"{name}.beta", np.zeros(c))
        passes = self.cfg.T if name.startswith("g.") else 1
        for i in range(passes):
            self.buffers[_buffer_key(name, "running_mean", i)] = np.zeros(c, dtype=self.dtype)
            self.buffers[_buffer_key(name, "running_var", i)] = np.ones(c, dtype=self.dtype)

    def _build(self):
        cfg = self.cfg
        c = cfg.base_channels
        ci = max(1, c // 8)
        leaky = 2.0 / (1 + cfg.leaky_slope**2)
        for src, ch in (("m", 3), ("q", 3), ("z", cfg.z_channels)):
            self._conv(f"g.enc.{src}", ch, ci, 3, bias=False)
            self._bn(f"g.enc.{src}.bn", ci)
        self._conv("g.zproj", 3, cfg.z_channels, 1, init="xavier")
        for name, a, b in (("g.enc.s2", 3 * ci, c // 2), ("g.enc.s3", c // 2, c), ("g.enc.s4", c, c)):
            self._conv(name, a, b, 3, bias=False)
            self._bn(f"{name}.bn", b)
        for gru in ("g.gru1", "g.gru2"):
            self._conv(f"{gru}.update", 2 * c, c, 3, init="xavier")
            self._conv(f"{gru}.reset", 2 * c, c, 3, init="xavier")
            self._conv(f"{gru}.cand", 2 * c, c, 3, bias=False)
            self._bn(f"{gru}.cand.bn", c)
        for k in range(cfg.n_residual_blocks):
            for j in (1, 2):
                self._conv(f"g.res{k}.conv{j}", c, c, 3, bias=False)
                self._bn(f"g.res{k}.conv{j}.bn", c)
        for name, a, b in (("g.dec1", c, c // 2), ("g.dec2", c // 2, c // 4)):
            if cfg.upsample == "transpose":
                self._conv(name, a, b, 4, bias=False, transpose=True)
            else:
                self._conv(name, a, b, 3, bias=False)
            self._bn(f"{name}.bn", b)
        self._conv("g.out", c // 4, 3, 3, init="xavier")

        cd = cfg.d_channels
        bottleneck = cfg.image_size // 16
        for d in ("d1", "d2"):
            for branch in ("h", "cond"):
                self._conv(f"{d}.{branch}", 3, cd // 2, 4, bias=False, gain=leaky)
                self._bn(f"{d}.{branch}.bn", cd // 2)
                self._attention(f"{d}.{branch}.attn", cd // 2)
            for name, a, b in ((f"{d}.s2", cd, cd), (f"{d}.s3", cd, 2 * cd), (f"{d}.s4", 2 * cd, 2 * cd)):
                self._conv(name, a, b, 4, bias=False, gain=leaky)
                self._bn(f"{name}.bn", b)
            self._attention(f"{d}.attn", 2 * cd)
            self._conv(f"{d}.head", 2 * cd, 1, bottleneck, init="xavier")

    def _attention(self, name, c):
        ck = max(1, c // 8)
        self._conv(f"{name}.query", c, ck, 1, init="xavier")
        self._conv(f"{name}.key", c, ck, 1, init="xavier")
        self._conv(f"{name}.value", c, c, 1, init="xavier")
        self._param(f"{name}.gamma", np.zeros(1))

    # ------------------------------------------------------------ helpers

    def group(self, prefix: str) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix + ".")]

    @property
    def generator_params(self) -> list[Parameter]:
        return self.group("g")

    @property
    def discriminator_params(self) -> list[Parameter]:
        return self.group("d1") + self.group("d2")

    @property
    def discriminator_weights(self) -> list[Parameter]:
        """Convolution kernels and biases of D1 and D2 (the weight-clipping set)."""
        return [p for p in self.discriminator_params if p.name.endswith((".w", ".b"))]

    def astype(self, dtype) -> "RGM":
        """Convert parameters and buffers in place (64-bit for gradient checks)."""
        self.dtype = np.dtype(dtype).type
        for p in self.params.values():
            p.astype(self.dtype)
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(self.dtype)
        return self

    def zero_grad(self, params=None):
        for p in params if params is not None else self.params.values():
            p.zero_grad()

    def _w(self, name):
        return self.params[name]

    def _convp(self, name, x, stride=1, pad=0):
        b = self.params.get(f"{name}.b")
        return ad.conv2d(x, self._w(f"{name}.w"), b, stride, pad)

    def _norm(self, name, x):
        i = min(self.pass_index, self.cfg.T - 1) if name.startswith("g.") else 0
        return ad.batchnorm2d(
            x,
            self._w(f"{name}.gamma"),
            self._w(f"{name}.beta"),
            self.buffers[_buffer_key(name, "running_mean", i)],
            self.buffers[_buffer_key(name, "running_var", i)],
            training=self.training,
        )

    def cbr(self, name, x, stride=1):
        """convolution (3x3) -> BatchNorm -> ReLU"""
        return ad.relu(self._norm(f"{name}.bn", self._convp(name, x, stride, 1)))

    def cblr(self, name, x):
        """convolution (4x4, stride 2) -> BatchNorm -> LeakyReLU"""
        y = self._norm(f"{name}.bn", self._convp(name, x, 2, 1))
        return ad.leaky_relu(y, self.cfg.leaky_slope)

    # ------------------------------------------------------------ generator

    def encoder(self, m: Tensor, q: Tensor, z: Tensor) -> Tensor:
        if not (m.shape[-2:] == q.shape[-2:] == z.shape[-2:]):
            raise ValueError(f"encoder inputs disagree in size: {m.shape}, {q.shape}, {z.shape}")
        if z.shape[1] == 3 and self.cfg.z_channels != 3:
            z = self._convp("g.zproj", z)
        x = ad.concat([self.cbr("g.enc.m", m, 2), self.cbr("g.enc.q", q, 2), self.cbr("g.enc.z", z, 2)], axis=1)
        x = self.cbr("g.enc.s2", x, 2)
        x = self.cbr("g.enc.s3", x)
        return self.cbr("g.enc.s4", x)

    def gru_step(self, name: str, h_prev: Tensor | None, x: Tensor) -> Tensor:
        """Convolutional GRU; the candidate uses CBR in place of tanh."""
        if h_prev is None:
            h_prev = Tensor(np.zeros(x.shape, dtype=x.dtype), dtype=x.dtype.type)
        if h_prev.shape != x.shape:
            raise ValueError(f"GRU hidden {h_prev.shape} does not match input {x.shape}")
        hx = ad.concat([h_prev, x], axis=1)
        u = ad.sigmoid(self._convp(f"{name}.update", hx, 1, 1))
        r = ad.sigmoid(self._convp(f"{name}.reset", hx, 1, 1))
        cand = self.cbr(f"{name}.cand", ad.concat([r * h_prev, x], axis=1))
        return (1.0 - u) * h_prev + u * cand

    def residual_stack(self, x: Tensor) -> Tensor:
        for k in range(self.cfg.n_residual_blocks):
            x = x + self.cbr(f"g.res{k}.conv2", self.cbr(f"g.res{k}.conv1", x))
        return x

    def _up(self, name, x):
        if self.cfg.upsample == "transpose":
            y = ad.conv_transpose2d(x, self._w(f"{name}.w"), None, 2, 1)
        else:
            y = ad.conv2d(ad.upsample_nearest2d(x, 2), self._w(f"{name}.w"), None, 1, 1)
        return ad.relu(self._norm(f"{name}.bn", y))

    def decoder(self, x: Tensor) -> Tensor:
        x = self._up("g.dec2", self._up("g.dec1", x))
        return ad.sigmoid(self._convp("g.out", x, 1, 1))

    def horizontal(self, m: Tensor, q: Tensor, z: Tensor, state: GeneratorState | None = None):
        """One encoder -> GRU -> residual -> GRU -> decoder pass; returns ``(h, state)``."""
        state = state or GeneratorState()
        x = self.encoder(m, q, z)
        h1 = self.gru_step("g.gru1", state.gru1_hidden, x)
        h2 = self.gru_step("g.gru2", state.gru2_hidden, self.residual_stack(h1))
        out = self.decoder(h2)
        return out, GeneratorState(h1, h2, out)

    def generate(self, m: Tensor, q: Tensor, z0: Tensor, T: int | None = None, z_log: list | None = None):
        """Run the recurrence; returns ``[h_1, ..., h_T]``.

        Pass 1 consumes the noise ``z0``; pass ``i >= 2`` consumes ``h_{i-1}``.
        ``z_log`` (if given) collects the z-input of every pass.
        """
        T = self.cfg.T if T is None else T
        if T < 1:
            raise ValueError("T must be at least 1")
        outs, state, z = [], GeneratorState(), z0
        try:
            for i in range(T):
                self.pass_index = i
                if z_log is not None:
                    z_log.append(z)
                h, state = self.horizontal(m, q, z, state)
                outs.append(h)
                z = h
        finally:
            self.pass_index = 0
        return outs

    def noise(self, rng: np.random.Generator, n: int) -> Tensor:
        s = self.cfg.image_size
        return Tensor(rng.standard_normal((n, self.cfg.z_channels, s, s)), dtype=self.dtype)

    # ------------------------------------------------------------ discriminators

    def self_attention(self, name: str, x: Tensor, return_attention: bool = False):
        n, c, h, w = x.shape
        q = self._convp(f"{name}.query", x).reshape(n, -1, h * w)
        k = self._convp(f"{name}.key", x).reshape(n, -1, h * w)
        v = self._convp(f"{name}.value", x).reshape(n, c, h * w)
        attn = ad.softmax(ad.matmul(ad.transpose(q, (0, 2, 1)), k), axis=-1)
        out = ad.matmul(v, ad.transpose(attn, (0, 2, 1))).reshape(n, c, h, w)
        y = x + self._w(f"{name}.gamma").reshape(1, 1, 1, 1) * out
        return (y, attn) if return_attention else y

    def discriminate(self, which: str, h: Tensor, cond: Tensor, return_bottleneck: bool = False):
        """Score in (0, 1) per batch element; ``which`` is ``'d1'`` or ``'d2'``."""
        if which not in ("d1", "d2"):
            raise ValueError(which)
        if h.shape != cond.shape:
            raise ValueError(f"heuristic {h.shape} and condition {cond.shape} differ")
        a = self.self_attention(f"{which}.h.attn", self.cblr(f"{which}.h", h))
        b = self.self_attention(f"{which}.cond.attn", self.cblr(f"{which}.cond", cond))
        x = ad.concat([a, b], axis=1)
        for s in ("s2", "s3", "s4"):
            x = self.cblr(f"{which}.{s}", x)
        bott = self.self_attention(f"{which}.attn", x)
        score = ad.sigmoid(self._convp(f"{which}.head", bott)).reshape(h.shape[0])
        return (score, bott) if return_bottleneck else score

    def d1(self, h: Tensor, m: Tensor) -> Tensor:
        return self.discriminate("d1", h, m)

    def d2(self, h: Tensor, q: Tensor) -> Tensor:
        return self.discriminate("d2", h, q)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: p.shape for n, p in self.params.items()}
