"""PSD-gated mixture-of-experts fine-tuning head.

Three pretrained reconstructor encoders run in parallel; each channel's
Welch power spectrum drives a per-expert sigmoid gate that modulates that
expert's embedding before the gated blocks are concatenated, channel-mean
pooled and fed to a small MLP predictor.

Raw Welch power spans orders of magnitude, so gate inputs are log-power
z-scored per channel. An alternative learned gate (two strided convolutions
over the raw signal plus a per-expert linear head) backs the no-PSD
ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .model import BackboneConfig, Reconstructor
from .signal import welch_psd


@dataclass(frozen=True)
class MoEConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_experts: int = 3
    experts_frozen: bool = False
    gate_mode: str = "psd"              # "psd" | "learned"
    psd_bins: int = 201
    psd_seg_length: int = 400
    dropout: float = 0.2
    task: str = "classification"        # "classification" | "regression"
    num_classes: int = 2

    def __post_init__(self):
        if self.gate_mode not in ("psd", "learned"):
            raise ValueError(f"unknown gate mode {self.gate_mode!r}")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(),
                "num_experts": self.num_experts,
                "experts_frozen": self.experts_frozen,
                "gate_mode": self.gate_mode, "psd_bins": self.psd_bins,
                "psd_seg_length": self.psd_seg_length,
                "dropout": self.dropout, "task": self.task,
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "MoEConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        return cls(**d)


def psd_features(x: np.ndarray, cfg: MoEConfig, fs: float = 200.0) -> np.ndarray:
    """Standardized log-power gate input, (B, C, K).

    Per channel: log of the Welch density, z-scored over the frequency
    axis. Constant (all-silent) channels map to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b, c, _ = x.shape
    flat = welch_psd(x.reshape(b * c, -1), seg_length=cfg.psd_seg_length, fs=fs)
    logp = np.log(flat + 1e-12)
    mu = logp.mean(axis=-1, keepdims=True)
    sd = logp.std(axis=-1, keepdims=True)
    z = (logp - mu) / np.where(sd < 1e-8, 1.0, sd)
    return z.reshape(b, c, -1)


class MoEModel:
    """Experts + gates + predictor over (B, C, L) segments."""

    def __init__(self, cfg: MoEConfig = MoEConfig(), seed: int = 0,
                 experts: Optional[Sequence[Reconstructor]] = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dtype = cfg.backbone.np_dtype
        d = cfg.backbone.hidden_dim
        k = cfg.psd_bins
        if experts is None:
            experts = [Reconstructor(cfg.backbone,
                                     seed=int(rng.integers(2 ** 31)))
                       for _ in range(cfg.num_experts)]
        if len(experts) != cfg.num_experts:
            raise ValueError(f"need {cfg.num_experts} experts, got {len(experts)}")
        self.experts = list(experts)
        if cfg.experts_frozen:
            self.freeze_experts()

        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return T.parameter(rng.uniform(-bound, bound, shape).astype(dtype))

        self.head: Dict[str, T.DiffTensor] = {}
        if cfg.gate_mode == "psd":
            for i in range(cfg.num_experts):
                self.head[f"gate{i}.w"] = uni((k, d), k)
                self.head[f"gate{i}.b"] = uni((d,), k)
        else:
            half = d // 2
            self.head["gateconv1.w"] = uni((half, 1, 9), 9)
            self.head["gateconv1.b"] = uni((half,), 9)
            self.head["gateconv2.w"] = uni((d, half, 9), half * 9)
            self.head["gateconv2.b"] = uni((d,), half * 9)
            for i in range(cfg.num_experts):
                self.head[f"gate{i}.w"] = uni((d, d), d)
                self.head[f"gate{i}.b"] = uni((d,), d)
        fused = cfg.num_experts * d
        self.head["pred.ln.g"] = T.parameter(np.ones(fused, dtype=dtype))
        self.head["pred.ln.b"] = T.parameter(np.zeros(fused, dtype=dtype))
        self.head["pred.w1"] = uni((fused, fused), fused)
        self.head["pred.b1"] = uni((fused,), fused)
        self.head["pred.w2"] = uni((fused, cfg.out_dim), fused)
        self.head["pred.b2"] = uni((cfg.out_dim,), fused)
        self._rng = np.random.default_rng(seed + 1)

    # -- parameter plumbing -------------------------------------------------

    def freeze_experts(self) -> None:
        for e in self.experts:
            for p in e.parameters():
                p.requires_grad = False

    def expert_parameters(self) -> List[T.DiffTensor]:
        out: List[T.DiffTensor] = []
        for e in self.experts:
            out.extend(e.parameters())
        return out

    def head_parameters(self) -> List[T.DiffTensor]:
        return list(self.head.values())

    def trainable_parameters(self) -> List[T.DiffTensor]:
        params = self.head_parameters()
        if not self.cfg.experts_frozen:
            params += self.expert_parameters()
        return params

    def zero_grad(self) -> None:
        for p in self.head_parameters() + self.expert_parameters():
            p.zero_grad()

    def named_parameters(self) -> Dict[str, T.DiffTensor]:
        out = {}
        for i, e in enumerate(self.experts):
            for name, p in e.params.items():
                out[f"expert{i}.{name}"] = p
        for name, p in self.head.items():
            out[name] = p
        return out

    # -- forward pieces -----------------------------------------------------

    def expert_encode(self, x, expert: int) -> T.DiffTensor:
        """Per-channel embedding (B, C, D): time-mean of the bottleneck."""
        latent = self.experts[expert].encode(x)      # (B, C, D, T)
        return T.reduce_mean(latent, axes=-1)

    def spectral_gate(self, psd: np.ndarray, expert: int) -> T.DiffTensor:
        """sigmoid(W_i . psd + b_i) per channel; psd is (B, C, K)."""
        if psd.shape[-1] != self.cfg.psd_bins:
            raise ValueError(
                f"psd has {psd.shape[-1]} bins, gate expects {self.cfg.psd_bins}")
        p = T.constant(psd.astype(self.cfg.backbone.np_dtype))
        z = T.add(T.matmul(p, self.head[f"gate{expert}.w"]),
                  self.head[f"gate{expert}.b"])
        return T.sigmoid(z)

    def learned_gate(self, x, expert: int) -> T.DiffTensor:
        """Gate from a shared conv trunk over the raw signal (no-PSD ablation)."""
        xb = T.as_tensor(x)
        b, c, length = xb.shape
        h = T.reshape(xb, (b * c, 1, length))
        h = T.gelu(T.conv1d(h, self.head["gateconv1.w"],
                            self.head["gateconv1.b"], stride=4, padding=4))
        h = T.gelu(T.conv1d(h, self.head["gateconv2.w"],
                            self.head["gateconv2.b"], stride=4, padding=4))
        h = T.reduce_mean(h, axes=-1)                # (B*C, D)
        h = T.reshape(h, (b, c, h.shape[-1]))
        z = T.add(T.matmul(h, self.head[f"gate{expert}.w"]),
                  self.head[f"gate{expert}.b"])
        return T.sigmoid(z)

    def gated_fuse(self, embeddings: Sequence[T.DiffTensor],
                   gates: Sequence[T.DiffTensor]) -> T.DiffTensor:
        """Concatenate gated expert blocks along the feature axis, (B, C, nD)."""
        if len(embeddings) != len(gates):
            raise ValueError("one gate per embedding required")
        return T.concat([T.mul(o, g) for o, g in zip(embeddings, gates)], axis=-1)

    def pool_and_predict(self, fused: T.DiffTensor,
                         training: bool = False) -> T.DiffTensor:
        """Channel-mean pool, layernorm, two-layer MLP with GELU and dropout."""
        h = T.reduce_mean(fused, axes=1)             # (B, nD)
        h = T.layernorm(h, self.head["pred.ln.g"], self.head["pred.ln.b"])
        h = T.add(T.matmul(h, self.head["pred.w1"]), self.head["pred.b1"])
        h = T.gelu(h)
        h = T.dropout(h, self.cfg.dropout, self._rng, training=training)
        out = T.add(T.matmul(h, self.head["pred.w2"]), self.head["pred.b2"])
        if self.cfg.task == "regression":
            out = T.reshape(out, (out.shape[0],))
        return out

    def forward(self, x, training: bool = False, fs: float = 200.0,
                collect_gates: bool = False):
        """Logits (B, num_classes) or predictions (B,); optionally also the
        per-(sample, expert, channel) mean gate activations."""
        xb = np.asarray(x, dtype=np.float64)
        if xb.ndim == 2:
            xb = xb[None]
        psd = (psd_features(xb, self.cfg, fs)
               if self.cfg.gate_mode == "psd" else None)
        xt = T.constant(xb.astype(self.cfg.backbone.np_dtype))
        embeddings, gates = [], []
        for i in range(self.cfg.num_experts):
            embeddings.append(self.expert_encode(xt, i))
            if self.cfg.gate_mode == "psd":
                gates.append(self.spectral_gate(psd, i))
            else:
                gates.append(self.learned_gate(xt, i))
        fused = self.gated_fuse(embeddings, gates)
        out = self.pool_and_predict(fused, training=training)
        if collect_gates:
            trace = np.stack([g.values.mean(axis=-1) for g in gates], axis=1)
            return out, trace                        # trace: (B, E, C)
        return out
