"""Pretraining, fine-tuning and evaluation loops.

Everything here is deterministic given a seed: batch order, per-sample
masks and dropout all derive from seed sequences, so two identical
single-worker runs produce bit-identical checkpoints and reports.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusManifest
from .masking import MaskPolicy, generate_mask, generate_rect_mask, corrupt
from .metrics import EvalReport, classification_metrics, regression_metrics
from .model import BackboneConfig, Reconstructor
from .moe import MoEConfig, MoEModel
from .objectives import (LossWeights, rmse_loss, total_loss,
                         weighted_cross_entropy)
from .optim import Adam, CosineSchedule, ReduceLROnPlateau, adamw
from .signal import StftConfig
from .tensor import backward, clip_grad_norm, tape


def code_version() -> str:
    """Git-style blob hash of the package version string."""
    content = f"eegmoe-{__version__}".encode()
    return hashlib.sha1(b"blob %d\x00" % len(content) + content).hexdigest()


def artifact_meta(run_config: dict) -> dict:
    return {"run_config": run_config, "code_version": code_version()}


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 5e-2
    grad_clip: float = 5.0
    seed: int = 0
    mask_mode: str = "gaussian"          # "gaussian" | "rect"
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    stft: StftConfig = field(default_factory=StftConfig)
    single_geometry: Optional[str] = None   # ablations: force one geometry

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "steps": self.steps,
                "batch_size": self.batch_size, "lr": self.lr,
                "weight_decay": self.weight_decay,
                "grad_clip": self.grad_clip, "seed": self.seed,
                "mask_mode": self.mask_mode,
                "mask_policy": {"ratio": self.mask_policy.ratio,
                                "geometry_probs": list(self.mask_policy.geometry_probs),
                                "sigma_fraction": self.mask_policy.sigma_fraction,
                                "band_bias": self.mask_policy.band_bias,
                                "eps_ratio": self.mask_policy.eps_ratio},
                "loss_weights": {"w_spec": self.loss_weights.w_spec,
                                 "alpha1": self.loss_weights.alpha1,
                                 "alpha2": self.loss_weights.alpha2},
                "stft": self.stft.to_dict(),
                "single_geometry": self.single_geometry}


def _draw_mask(cfg: PretrainConfig, n_f: int, n_t: int,
               rng: np.random.Generator):
    geometry = cfg.single_geometry
    if cfg.mask_mode == "rect":
        geo = None if geometry is None else "rect-" + {
            "frequency": "frequency", "time": "time",
            "joint-tf": "joint"}[geometry]
        return generate_rect_mask(cfg.mask_policy, n_f, n_t, cfg.stft,
                                  rng, geometry=geo)
    return generate_mask(cfg.mask_policy, n_f, n_t, cfg.stft, rng,
                         geometry=geometry)


def corrupt_batch(x: np.ndarray, cfg: PretrainConfig, step: int
                  ) -> Tuple[np.ndarray, list]:
    """Fresh per-sample masks; RNG streams split by (seed, step, slot)."""
    n_f = cfg.stft.n_bins
    n_t = cfg.stft.n_frames(x.shape[-1])
    out = np.empty_like(x)
    masks = []
    for i in range(x.shape[0]):
        rng = np.random.default_rng([cfg.seed, step, i])
        mask = _draw_mask(cfg, n_f, n_t, rng)
        out[i] = corrupt(x[i], mask, cfg.stft)
        masks.append(mask)
    return out, masks


def reconstruction_loss(model: Reconstructor, corrupted: np.ndarray,
                        clean: np.ndarray, cfg: PretrainConfig) -> float:
    """Evaluation-mode total loss (no tape)."""
    out = model.forward(corrupted)
    return float(total_loss(out, clean, cfg.loss_weights, cfg.stft).values)


def pretrain(manifest: CorpusManifest, out_dir,
             cfg: PretrainConfig = PretrainConfig(),
             log_every: int = 1) -> dict:
    """Train one reconstructor on one corpus partition.

    Writes checkpoint.ckpt, loss_curve.csv and config.json under out_dir
    and returns a result summary.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x_all, _, _ = manifest.load_arrays()
    n = x_all.shape[0]
    if n == 0:
        raise ValueError("empty corpus")

    model = Reconstructor(cfg.backbone, seed=cfg.seed)
    opt = adamw(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = CosineSchedule(opt, cfg.steps)
    curve: List[Tuple[int, float, float]] = []
    first_loss = None

    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.integers(0, n, size=cfg.batch_size)
        clean = x_all[idx]
        corrupted, _ = corrupt_batch(clean, cfg, step)
        model.zero_grad()
        with tape():
            out = model.forward(corrupted)
            loss = total_loss(out, clean, cfg.loss_weights, cfg.stft)
            backward(loss)
        loss_val = float(loss.values)
        if not math.isfinite(loss_val):
            raise DivergenceError(
                f"non-finite loss {loss_val} at step {step} "
                f"(lr={opt.lr:.2e}, batch={idx.tolist()})")
        clip_grad_norm(model.parameters(), cfg.grad_clip)
        opt.step()
        lr_now = sched.step()
        if first_loss is None:
            first_loss = loss_val
        if step % log_every == 0 or step == cfg.steps - 1:
            curve.append((step, loss_val, lr_now))

    run_config = cfg.to_dict()
    ckpt_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt_path,
                    {k: p.values for k, p in model.params.items()},
                    cfg.backbone.to_dict(), meta=artifact_meta(run_config))
    csv_path = out_dir / "loss_curve.csv"
    with open(csv_path, "w") as fh:
        fh.write("step,loss,lr\n")
        for s, lv, lr in curve:
            fh.write(f"{s},{lv:.10g},{lr:.10g}\n")
    (out_dir / "config.json").write_text(
        json.dumps(artifact_meta(run_config), indent=1, sort_keys=True))
    return {"checkpoint": str(ckpt_path), "loss_curve": str(csv_path),
            "first_loss": first_loss, "final_loss": curve[-1][1],
            "model": model, "curve": curve}


def load_reconstructor(path, cfg: BackboneConfig, strict: bool = True
                       ) -> Reconstructor:
    params, _ = load_checkpoint(path, cfg.to_dict() if strict else None)
    model = Reconstructor(cfg, seed=0)
    for name, p in model.params.items():
        if name not in params:
            raise KeyError(f"checkpoint missing parameter {name}")
        if tuple(params[name].shape) != p.shape:
            raise ValueError(f"{name}: shape {params[name].shape} vs {p.shape}")
        p.values = params[name].astype(cfg.np_dtype)
    return model


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    moe: MoEConfig = field(default_factory=MoEConfig)
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    class_weights: Optional[Tuple[float, ...]] = None

    def to_dict(self) -> dict:
        return {"moe": self.moe.to_dict(), "epochs": self.epochs,
                "batch_size": self.batch_size, "lr": self.lr,
                "seed": self.seed, "plateau_factor": self.plateau_factor,
                "plateau_patience": self.plateau_patience,
                "split": list(self.split),
                "class_weights": (list(self.class_weights)
                                  if self.class_weights else None)}


def subject_split(manifest: CorpusManifest, fractions: Sequence[float]
                  ) -> List[List[int]]:
    """Subject-disjoint contiguous index split over loaded arrays."""
    n_sub = len(manifest.subjects)
    counts = [max(1, int(round(f * n_sub))) for f in fractions]
    while sum(counts) > n_sub:
        counts[int(np.argmax(counts))] -= 1
    bounds = np.cumsum([0] + counts)
    seg_subject = []
    for i, sub in enumerate(manifest.subjects):
        seg_subject.extend([i] * sub["n_segments"])
    seg_subject = np.asarray(seg_subject)
    groups = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        groups.append(np.flatnonzero((seg_subject >= a)
                                     & (seg_subject < b)).tolist())
    return groups


def _task_loss(model: MoEModel, out, yb, class_weights=None):
    if model.cfg.task == "classification":
        return weighted_cross_entropy(out, yb.astype(int), class_weights)
    return rmse_loss(out, yb.astype(np.float64))


def finetune_step(model: MoEModel, xb: np.ndarray, yb: np.ndarray,
                  opt: Adam, fs: float = 200.0,
                  class_weights=None) -> float:
    """One gradient step; aborts on a non-finite loss."""
    model.zero_grad()
    with tape():
        out = model.forward(xb, training=True, fs=fs)
        loss = _task_loss(model, out, yb, class_weights)
        backward(loss)
    loss_val = float(loss.values)
    if not math.isfinite(loss_val):
        raise DivergenceError(f"non-finite fine-tuning loss {loss_val}")
    opt.step()
    return loss_val


def eval_loss(model: MoEModel, x: np.ndarray, y: np.ndarray,
              fs: float = 200.0, class_weights=None,
              batch_size: int = 64) -> float:
    total, count = 0.0, 0
    for lo in range(0, x.shape[0], batch_size):
        xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
        out = model.forward(xb, training=False, fs=fs)
        total += float(_task_loss(model, out, yb, class_weights).values) * len(yb)
        count += len(yb)
    return total / max(count, 1)


def predict(model: MoEModel, x: np.ndarray, fs: float = 200.0,
            batch_size: int = 64, collect_gates: bool = False):
    """Scores (and optional gate traces) over a dataset, batched."""
    outs, traces = [], []
    for lo in range(0, x.shape[0], batch_size):
        res = model.forward(x[lo:lo + batch_size], training=False, fs=fs,
                            collect_gates=collect_gates)
        if collect_gates:
            out, tr = res
            traces.append(tr)
        else:
            out = res
        outs.append(out.values)
    scores = np.concatenate(outs)
    if collect_gates:
        return scores, np.concatenate(traces)
    return scores


def evaluate_model(model: MoEModel, x: np.ndarray, y: np.ndarray,
                   fs: float = 200.0) -> Tuple[dict, np.ndarray, np.ndarray]:
    scores, gates = predict(model, x, fs=fs, collect_gates=True)
    if model.cfg.task == "classification":
        probs = _softmax_np(scores)
        preds = probs.argmax(axis=1)
        vals = classification_metrics(y.astype(int), preds, probs)
    else:
        vals = regression_metrics(y, scores)
    return vals, scores, gates


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def build_moe(cfg: MoEConfig, seed: int,
              expert_paths: Optional[Sequence] = None) -> MoEModel:
    """MoE with experts loaded from checkpoints, or random ones if None."""
    experts = None
    if expert_paths is not None:
        if len(expert_paths) != cfg.num_experts:
            raise ValueError(f"need {cfg.num_experts} expert checkpoints")
        experts = [load_reconstructor(p, cfg.backbone) for p in expert_paths]
    return MoEModel(cfg, seed=seed, experts=experts)


def finetune(manifest: CorpusManifest, out_dir,
             cfg: FinetuneConfig = FinetuneConfig(),
             expert_paths: Optional[Sequence] = None,
             seeds: Optional[Sequence[int]] = None) -> dict:
    """Fine-tune over one or more seeds on a subject-disjoint split.

    Without expert checkpoints the experts are randomly initialized
    (the from-scratch baseline). Writes a checkpoint per seed, a combined
    EvalReport and per-seed gate-trace CSVs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    x_all, y_all, _ = manifest.load_arrays()
    tr_idx, va_idx, te_idx = subject_split(manifest, cfg.split)
    if not (tr_idx and va_idx and te_idx):
        raise ValueError("split produced an empty partition")
    fs = manifest.fs
    report = EvalReport(task=cfg.moe.task)
    run_config = dict(cfg.to_dict(), seeds=seeds,
                      scratch=expert_paths is None)
    results = {"checkpoints": [], "gate_traces": []}
    cw = np.asarray(cfg.class_weights) if cfg.class_weights else None

    for seed in seeds:
        model = build_moe(cfg.moe, seed, expert_paths)
        opt = Adam(model.trainable_parameters(), lr=cfg.lr, weight_decay=0.0)
        sched = ReduceLROnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience)
        order_rng = np.random.default_rng([seed, 7])
        for epoch in range(cfg.epochs):
            perm = order_rng.permutation(tr_idx)
            for lo in range(0, len(perm), cfg.batch_size):
                sel = perm[lo:lo + cfg.batch_size]
                finetune_step(model, x_all[sel], y_all[sel], opt, fs=fs,
                              class_weights=cw)
            val = eval_loss(model, x_all[va_idx], y_all[va_idx], fs=fs,
                            class_weights=cw, batch_size=cfg.batch_size)
            sched.step(val)
        vals, scores, gates = evaluate_model(model, x_all[te_idx],
                                             y_all[te_idx], fs=fs)
        report.add(seed, vals)
        ck = out_dir / f"moe_seed{seed}.ckpt"
        save_checkpoint(ck, {k: p.values
                             for k, p in model.named_parameters().items()},
                        cfg.moe.to_dict(), meta=artifact_meta(run_config))
        results["checkpoints"].append(str(ck))
        trace_path = out_dir / f"gate_trace_seed{seed}.csv"
        write_gate_trace(trace_path, gates, y_all[te_idx])
        results["gate_traces"].append(str(trace_path))

    payload = dict(report.to_dict(), **artifact_meta(run_config))
    (out_dir / "metrics.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True))
    results.update({"report": report, "metrics": str(out_dir / "metrics.json"),
                    "test_indices": te_idx})
    return results


def write_gate_trace(path, gates: np.ndarray, labels: np.ndarray) -> Path:
    """CSV of per-(sample, expert, channel) mean gate activations."""
    path = Path(path)
    n, n_exp, n_ch = gates.shape
    with open(path, "w") as fh:
        fh.write("sample_id,label,expert,channel,mean_gate\n")
        for i in range(n):
            for e in range(n_exp):
                for c in range(n_ch):
                    fh.write(f"{i},{labels[i]:.10g},{e},{c},"
                             f"{gates[i, e, c]:.10g}\n")
    return path


def load_moe(path, cfg: Optional[MoEConfig] = None) -> MoEModel:
    """Rebuild a fine-tuned model from its checkpoint."""
    params, header = load_checkpoint(path,
                                     cfg.to_dict() if cfg else None)
    cfg = cfg or MoEConfig.from_dict(header["config"])
    model = MoEModel(cfg, seed=0)
    named = model.named_parameters()
    for name, p in named.items():
        if name not in params:
            raise KeyError(f"checkpoint missing parameter {name}")
        p.values = params[name].astype(cfg.backbone.np_dtype)
    return model
