"""U-shaped hierarchical reconstructor with dual-path convolutions.

Three downsampling stages (each x4 in time) pair a small-kernel strided
convolution with a large-kernel dilated one, concatenate the two paths and
project. Global attention layers with rotary time positions sit after the
second stage and twice at the bottleneck; tokens are every (channel, time)
feature vector, so channels carry no positional identity and the same
weights serve any channel count or segment length. The decoder mirrors the
encoder with nearest-neighbour upsampling and skip connections, emitting
intermediate reconstructions after the first two upsampling stages and two
full-resolution reconstructions (one per path) after the last.

Channel handling: the EEG channel axis is folded into the batch axis for all
convolutions and unfolded only inside the attention sites, which makes the
whole network channel-permutation equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class BackboneConfig:
    hidden_dim: int = 128
    small_kernel: int = 4
    large_kernel: int = 65
    dilations: Tuple[int, int, int] = (1, 2, 4)
    down_factor: int = 4
    heads: int = 8
    rope_base: float = 10000.0
    ffn_mult: int = 4
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be divisible by 4")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // 2) % self.heads:
            raise ValueError("stage width hidden_dim/2 must divide into heads")

    @property
    def stage_channels(self) -> Tuple[int, int, int]:
        d = self.hidden_dim
        return (d // 4, d // 2, d)

    @property
    def decoder_channels(self) -> Tuple[int, int, int]:
        d = self.hidden_dim
        return (d // 2, d, d)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def toy(cls, dtype: str = "float64") -> "BackboneConfig":
        return cls(hidden_dim=32, heads=4, dtype=dtype)

    def to_dict(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "small_kernel": self.small_kernel,
                "large_kernel": self.large_kernel, "dilations": list(self.dilations),
                "down_factor": self.down_factor, "heads": self.heads,
                "rope_base": self.rope_base, "ffn_mult": self.ffn_mult,
                "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["dilations"] = tuple(d.get("dilations", (1, 2, 4)))
        return cls(**d)


@dataclass
class BackboneOutput:
    final_short: T.DiffTensor    # (B, C, L)
    final_long: T.DiffTensor     # (B, C, L)
    interm1: T.DiffTensor        # (B, C, ~L/16)
    interm2: T.DiffTensor        # (B, C, ~L/4)
    latent: T.DiffTensor         # (B, C, D, ~L/64)


class ParamStore:
    """Ordered name -> parameter map with fan-in-scaled uniform init."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: Dict[str, T.DiffTensor] = {}

    def _register(self, name: str, values: np.ndarray) -> T.DiffTensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        p = T.parameter(values.astype(self.dtype), name=name)
        self.params[name] = p
        return p

    def uniform(self, name: str, shape, fan_in: int) -> T.DiffTensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self._register(name, self.rng.uniform(-bound, bound, size=shape))

    def ones(self, name: str, shape) -> T.DiffTensor:
        return self._register(name, np.ones(shape))

    def zeros(self, name: str, shape) -> T.DiffTensor:
        return self._register(name, np.zeros(shape))


def channel_layernorm(x: T.DiffTensor, gamma: T.DiffTensor,
                      beta: T.DiffTensor) -> T.DiffTensor:
    """Layer normalization over the feature axis of (B, C_feat, L)."""
    xt = T.transpose(x, (0, 2, 1))
    xt = T.layernorm(xt, gamma, beta)
    return T.transpose(xt, (0, 2, 1))


class DualPathDown:
    """One encoder stage: strided small-kernel path + dilated large-kernel path."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 cfg: BackboneConfig, dilation: int):
        ks, kl = cfg.small_kernel, cfg.large_kernel
        self.dilation = dilation
        self.cfg = cfg
        self.w_small = store.uniform(f"{name}.small.w", (c_out, c_in, ks), c_in * ks)
        self.b_small = store.uniform(f"{name}.small.b", (c_out,), c_in * ks)
        self.w_large = store.uniform(f"{name}.large.w", (c_out, c_in, kl), c_in * kl)
        self.b_large = store.uniform(f"{name}.large.b", (c_out,), c_in * kl)
        self.w_proj = store.uniform(f"{name}.proj.w", (c_out, 2 * c_out, 1), 2 * c_out)
        self.b_proj = store.uniform(f"{name}.proj.b", (c_out,), 2 * c_out)
        self.ln_g = store.ones(f"{name}.ln.g", (c_out,))
        self.ln_b = store.zeros(f"{name}.ln.b", (c_out,))

    def __call__(self, x: T.DiffTensor) -> T.DiffTensor:
        s = self.cfg.down_factor
        if x.shape[-1] < s:
            raise ValueError(f"stage input length {x.shape[-1]} below {s}")
        # (1, 2) zero padding makes the k=4 strided path emit ceil(L/4);
        # the dilated path's symmetric pad 32*d does the same for k=65
        pa = T.conv1d(x, self.w_small, self.b_small, stride=s, padding=(1, 2))
        pb = T.conv1d(x, self.w_large, self.b_large, stride=s,
                      dilation=self.dilation, padding=32 * self.dilation)
        h = T.concat([pa, pb], axis=1)
        h = T.conv1d(h, self.w_proj, self.b_proj)
        h = T.gelu(h)
        return channel_layernorm(h, self.ln_g, self.ln_b)


class DualPathUp:
    """One decoder stage: x4 nearest upsample, skip concat, dual-path convs."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 cfg: BackboneConfig, project: bool = True):
        ks, kl = cfg.small_kernel, cfg.large_kernel
        self.cfg = cfg
        self.project = project
        self.w_small = store.uniform(f"{name}.small.w", (c_out, c_in, ks), c_in * ks)
        self.b_small = store.uniform(f"{name}.small.b", (c_out,), c_in * ks)
        self.w_large = store.uniform(f"{name}.large.w", (c_out, c_in, kl), c_in * kl)
        self.b_large = store.uniform(f"{name}.large.b", (c_out,), c_in * kl)
        if project:
            self.w_proj = store.uniform(f"{name}.proj.w", (c_out, 2 * c_out, 1),
                                        2 * c_out)
            self.b_proj = store.uniform(f"{name}.proj.b", (c_out,), 2 * c_out)
            self.ln_g = store.ones(f"{name}.ln.g", (c_out,))
            self.ln_b = store.zeros(f"{name}.ln.b", (c_out,))

    def paths(self, x: T.DiffTensor, skip: T.DiffTensor):
        up = T.repeat_interleave(x, self.cfg.down_factor)
        if up.shape[-1] < skip.shape[-1]:
            raise ValueError(
                f"upsampled length {up.shape[-1]} below skip {skip.shape[-1]}")
        up = T.narrow(up, -1, 0, skip.shape[-1])
        h = T.concat([up, skip], axis=1)
        pa = T.conv1d(h, self.w_small, self.b_small, padding=(1, 2))
        pb = T.conv1d(h, self.w_large, self.b_large,
                      padding=(self.cfg.large_kernel - 1) // 2)
        return pa, pb

    def __call__(self, x: T.DiffTensor, skip: T.DiffTensor) -> T.DiffTensor:
        if not self.project:
            raise RuntimeError("projection-free stage: use .paths()")
        pa, pb = self.paths(x, skip)
        h = T.concat([pa, pb], axis=1)
        h = T.conv1d(h, self.w_proj, self.b_proj)
        h = T.gelu(h)
        return channel_layernorm(h, self.ln_g, self.ln_b)


class GlobalTransformer:
    """Pre-norm attention + feed-forward over all (channel, time) tokens.

    Rotary positions encode the time index only; channels are
    interchangeable by construction.
    """

    def __init__(self, store: ParamStore, name: str, width: int,
                 cfg: BackboneConfig):
        self.cfg = cfg
        self.width = width
        hidden = cfg.ffn_mult * width
        self.ln1_g = store.ones(f"{name}.ln1.g", (width,))
        self.ln1_b = store.zeros(f"{name}.ln1.b", (width,))
        self.wq = store.uniform(f"{name}.q.w", (width, width), width)
        self.bq = store.uniform(f"{name}.q.b", (width,), width)
        self.wk = store.uniform(f"{name}.k.w", (width, width), width)
        self.bk = store.uniform(f"{name}.k.b", (width,), width)
        self.wv = store.uniform(f"{name}.v.w", (width, width), width)
        self.bv = store.uniform(f"{name}.v.b", (width,), width)
        self.wo = store.uniform(f"{name}.o.w", (width, width), width)
        self.bo = store.uniform(f"{name}.o.b", (width,), width)
        self.ln2_g = store.ones(f"{name}.ln2.g", (width,))
        self.ln2_b = store.zeros(f"{name}.ln2.b", (width,))
        self.w1 = store.uniform(f"{name}.ffn1.w", (width, hidden), width)
        self.b1 = store.uniform(f"{name}.ffn1.b", (hidden,), width)
        self.w2 = store.uniform(f"{name}.ffn2.w", (hidden, width), hidden)
        self.b2 = store.uniform(f"{name}.ffn2.b", (width,), hidden)

    def __call__(self, x: T.DiffTensor, channels: int) -> T.DiffTensor:
        """x: (B*C, W, T) conv-layout features; attention runs per batch item
        over all C*T tokens."""
        bc, w, t = x.shape
        b = bc // channels
        tokens = T.reshape(T.transpose(x, (0, 2, 1)), (b, channels * t, w))
        positions = np.tile(np.arange(t, dtype=np.float64), channels)

        h = T.layernorm(tokens, self.ln1_g, self.ln1_b)
        q = T.add(T.matmul(h, self.wq), self.bq)
        k = T.add(T.matmul(h, self.wk), self.bk)
        v = T.add(T.matmul(h, self.wv), self.bv)
        att = T.attention(q, k, v, self.cfg.heads, self.cfg.rope_base, positions)
        att = T.add(T.matmul(att, self.wo), self.bo)
        tokens = T.add(tokens, att)

        h = T.layernorm(tokens, self.ln2_g, self.ln2_b)
        h = T.add(T.matmul(h, self.w1), self.b1)
        h = T.gelu(h)
        h = T.add(T.matmul(h, self.w2), self.b2)
        tokens = T.add(tokens, h)

        out = T.reshape(tokens, (b, channels, t, w))
        return T.reshape(T.transpose(out, (0, 1, 3, 2)), (bc, w, t))


class PointHead:
    """Per-time-step linear map from feature width to one sample."""

    def __init__(self, store: ParamStore, name: str, c_in: int):
        self.w = store.uniform(f"{name}.w", (1, c_in, 1), c_in)
        self.b = store.uniform(f"{name}.b", (1,), c_in)

    def __call__(self, feats: T.DiffTensor) -> T.DiffTensor:
        return T.conv1d(feats, self.w, self.b)


class Reconstructor:
    """The full encoder / attention / decoder pipeline with four heads."""

    MIN_LENGTH = 64

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), seed: int = 0):
        self.cfg = cfg
        store = ParamStore(np.random.default_rng(seed), cfg.np_dtype)
        s1, s2, s3 = cfg.stage_channels
        u1, u2, u3 = cfg.decoder_channels
        d1, d2, d3 = cfg.dilations
        self.down1 = DualPathDown(store, "down1", 1, s1, cfg, d1)
        self.down2 = DualPathDown(store, "down2", s1, s2, cfg, d2)
        self.site1 = GlobalTransformer(store, "site1", s2, cfg)
        self.down3 = DualPathDown(store, "down3", s2, s3, cfg, d3)
        self.bottom1 = GlobalTransformer(store, "bottom1", s3, cfg)
        self.bottom2 = GlobalTransformer(store, "bottom2", s3, cfg)
        self.up1 = DualPathUp(store, "up1", s3 + s2, u1, cfg)
        self.up2 = DualPathUp(store, "up2", u1 + s1, u2, cfg)
        self.up3 = DualPathUp(store, "up3", u2 + 1, u3, cfg, project=False)
        self.head_interm1 = PointHead(store, "head_interm1", u1)
        self.head_interm2 = PointHead(store, "head_interm2", u2)
        self.head_short = PointHead(store, "head_short", u3)
        self.head_long = PointHead(store, "head_long", u3)
        self.params = store.params

    def parameters(self) -> List[T.DiffTensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _batched(self, x) -> Tuple[T.DiffTensor, bool]:
        if not isinstance(x, T.DiffTensor):
            x = T.DiffTensor(np.asarray(x, dtype=self.cfg.np_dtype))
        if x.ndim == 2:
            return T.reshape(x, (1,) + x.shape), True
        if x.ndim == 3:
            return x, False
        raise ValueError(f"expected (C, L) or (B, C, L), got {x.shape}")

    def _encode(self, x: T.DiffTensor):
        b, c, length = x.shape
        if length < self.MIN_LENGTH:
            raise ValueError(f"segment length {length} below {self.MIN_LENGTH}")
        folded = T.reshape(x, (b * c, 1, length))
        e1 = self.down1(folded)
        e2 = self.down2(e1)
        e2 = self.site1(e2, c)
        e3 = self.down3(e2)
        e3 = self.bottom1(e3, c)
        latent = self.bottom2(e3, c)
        return folded, e1, e2, latent

    def encode(self, x) -> T.DiffTensor:
        """Bottleneck features as (B, C, D, T_bottom)."""
        xb, squeeze = self._batched(x)
        b, c, _ = xb.shape
        _, _, _, latent = self._encode(xb)
        d, t3 = latent.shape[1], latent.shape[2]
        out = T.reshape(latent, (b, c, d, t3))
        return T.reshape(out, (c, d, t3)) if squeeze else out

    def forward(self, x) -> BackboneOutput:
        xb, squeeze = self._batched(x)
        b, c, length = xb.shape
        folded, e1, e2, latent = self._encode(xb)

        u1 = self.up1(latent, e2)
        u2 = self.up2(u1, e1)
        pa, pb = self.up3.paths(u2, folded)

        def unfold(h, n):
            return T.reshape(h, (b, c, n))

        out = BackboneOutput(
            final_short=unfold(self.head_short(pa), length),
            final_long=unfold(self.head_long(pb), length),
            interm1=unfold(self.head_interm1(u1), u1.shape[-1]),
            interm2=unfold(self.head_interm2(u2), u2.shape[-1]),
            latent=T.reshape(latent, (b, c, latent.shape[1], latent.shape[2])),
        )
        if squeeze:
            out = BackboneOutput(
                final_short=T.reshape(out.final_short, (c, length)),
                final_long=T.reshape(out.final_long, (c, length)),
                interm1=T.reshape(out.interm1, (c, out.interm1.shape[-1])),
                interm2=T.reshape(out.interm2, (c, out.interm2.shape[-1])),
                latent=T.reshape(out.latent, out.latent.shape[1:]),
            )
        return out

    def stage_lengths(self, length: int) -> Tuple[int, int, int]:
        f = self.cfg.down_factor
        l1 = ceil_div(length, f)
        l2 = ceil_div(l1, f)
        l3 = ceil_div(l2, f)
        return l1, l2, l3
