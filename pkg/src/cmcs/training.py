"""Two-stage multi-stream pretraining.

Stage 1 trains each stream's online network on its own single-stream
objective. Stage 2 adds the cross-stream pseudo-label loss on top.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import AugmentationParams, augment_batch
from .errors import ParameterError, TrainingDiverged
from .losses import (
    LossWeights,
    SimilarityBundle,
    byol_loss,
    cmal_loss,
    cscl_loss,
    ensemble_pseudo_label,
    l2_normalize,
    stream_similarities,
)
from .networks import (
    EncoderConfig,
    HeadConfig,
    ema_update,
    init_model_pair,
    load_checkpoint,
    save_checkpoint,
    to_input,
)
from .skeleton import STREAMS

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    total_epochs: int = 30
    stage1_epochs: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.996
    weights: LossWeights = field(default_factory=LossWeights)
    top_k: int = 2
    streams: tuple[str, ...] = STREAMS
    seed: int = 0
    objective: str = "cmal"
    use_predictor: bool = True
    strict_vote: bool = False
    checkpoint_every: int = 1
    monitor_samples: int = 256
    aug: AugmentationParams = field(default_factory=AugmentationParams)

    def __post_init__(self):
        self.streams = tuple(self.streams)
        if not 0 < self.stage1_epochs <= self.total_epochs:
            raise ParameterError("need 0 < stage1_epochs <= total_epochs")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")
        if not self.streams or any(s not in STREAMS for s in self.streams):
            raise ParameterError(f"streams must be a nonempty subset of {STREAMS}")
        if self.objective not in ("cmal", "byol"):
            raise ParameterError(f"unknown objective {self.objective!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.aug, dict):
            self.aug = AugmentationParams(**self.aug)

    def to_dict(self):
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def step_rng(seed, epoch, step):
    return np.random.default_rng([seed, epoch, step])


def make_optimizer(pairs, cfg):
    params = [p for name in sorted(pairs) for p in pairs[name].online_parameters()]
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _forward_views(pair, x, xp):
    _, _, p = pair.online_forward(x)
    _, _, pp = pair.online_forward(xp)
    with torch.no_grad():
        z_t = pair.target_forward(x)
        zp_t = pair.target_forward(xp)
    return p, pp, z_t, zp_t


def _stream_outputs(pairs, batch, cfg, rng):
    outputs = {}
    for name in cfg.streams:
        x = to_input(augment_batch(batch[name], cfg.aug, rng))
        xp = to_input(augment_batch(batch[name], cfg.aug, rng))
        outputs[name] = _forward_views(pairs[name], x, xp)
    return outputs


def _objective(outs, cfg):
    if cfg.objective == "byol":
        return byol_loss(*outs)
    return cmal_loss(*outs, cfg.weights)


def _apply(pairs, optimizer, total):
    if not torch.isfinite(total):
        raise TrainingDiverged(f"non-finite loss {total.item()}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    for pair in pairs.values():
        ema_update(pair)


def train_step_stage1(pairs, optimizer, batch, cfg, rng):
    for pair in pairs.values():
        pair.train()
    outputs = _stream_outputs(pairs, batch, cfg, rng)
    losses = {name: _objective(outs, cfg) for name, outs in outputs.items()}
    total = sum(losses.values())
    _apply(pairs, optimizer, total)
    return {"loss": {k: v.item() for k, v in losses.items()}, "total": total.item()}


def similarity_bundle(outputs):
    return SimilarityBundle({name: stream_similarities(*outs) for name, outs in outputs.items()})


def cross_stream_loss(outputs, cfg):
    """CSCL loss and pseudo-label density for one batch of stream outputs."""
    bundle = similarity_bundle(outputs)
    label, per_stream = ensemble_pseudo_label(bundle, cfg.top_k, cfg.strict_vote)
    if label is not None:
        return cscl_loss(label, bundle), label.density
    warnings.warn("fewer than three streams: using per-stream pseudo-labels without voting", stacklevel=3)
    losses = [cscl_loss(per_stream[name], SimilarityBundle({name: bundle.matrices[name]})) for name in bundle.matrices]
    density = float(np.mean([lab.density for lab in per_stream.values()]))
    return sum(losses) / len(losses), density


def train_step_stage2(pairs, optimizer, batch, cfg, rng):
    for pair in pairs.values():
        pair.train()
    outputs = _stream_outputs(pairs, batch, cfg, rng)
    losses = {name: _objective(outs, cfg) for name, outs in outputs.items()}
    cscl, density = cross_stream_loss(outputs, cfg)
    w = cfg.weights
    total = sum(w.lambda_ * v for v in losses.values()) + w.gamma * cscl
    _apply(pairs, optimizer, total)
    return {
        "loss": {k: v.item() for k, v in losses.items()},
        "cscl": cscl.item(),
        "pseudo_density": density,
        "total": total.item(),
    }


@torch.no_grad()
def collapse_std(pair, data, max_samples=256):
    """Mean per-dimension std of L2-normalized online projections.

    Normalization layers use the monitored batch's statistics; a copy of the
    online branch is used so running statistics stay untouched.
    """
    encoder = copy.deepcopy(pair.online_encoder).train()
    projector = copy.deepcopy(pair.online_projector).train()
    z = projector(encoder(to_input(data[:max_samples])))
    return float(l2_normalize(z).std(dim=0).mean())


def collapse_threshold(out_dim):
    return 0.1 / math.sqrt(out_dim)


def default_model_configs(dataset, feature_dim=128, hidden_dim=512, out_dim=128, kind="graph_conv", channel_scale=0.25):
    enc = EncoderConfig(kind=kind, feature_dim=feature_dim, channel_scale=channel_scale,
                        num_joints=dataset.topology.num_joints, topology=dataset.topology)
    return enc, HeadConfig(hidden_dim, out_dim)


def init_pairs(cfg, enc_cfg, head_cfg):
    return {
        name: init_model_pair(enc_cfg, head_cfg, cfg.tau, seed=cfg.seed * 1000 + i, use_predictor=cfg.use_predictor)
        for i, name in enumerate(cfg.streams)
    }


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    if n <= batch_size:
        return [order]
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)

    def write(self, record):
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def pretrain(dataset, cfg, run_dir, enc_cfg=None, head_cfg=None, resume_from=None, config_snapshot=None,
             stop_after=None):
    """Run both stages over ``dataset`` (a StreamDataset); returns the final checkpoint path.

    ``stop_after`` ends the run early after that many completed epochs,
    writing the epoch checkpoint but no final one (used to exercise resume).
    """
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(run_dir / "metrics.jsonl")
    snapshot = {"train": cfg.to_dict(), **(config_snapshot or {})}

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        pairs = state["pairs"]
        start_epoch = state["epoch"]
        optimizer = make_optimizer(pairs, cfg)
        if state["optimizer"] is not None:
            optimizer.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["rng"]["torch"])
        log.info("resuming from %s at epoch %d", resume_from, start_epoch)
    else:
        (run_dir / "metrics.jsonl").unlink(missing_ok=True)
        if enc_cfg is None or head_cfg is None:
            enc_cfg, head_cfg = default_model_configs(dataset)
        pairs = init_pairs(cfg, enc_cfg, head_cfg)
        optimizer = make_optimizer(pairs, cfg)
        start_epoch = 0

    out_dim = next(iter(pairs.values())).head_cfg.out_dim
    monitor = {name: dataset.streams[name][:cfg.monitor_samples] for name in cfg.streams}
    for epoch in range(start_epoch, cfg.total_epochs):
        stage = 1 if epoch < cfg.stage1_epochs else 2
        step_fn = train_step_stage1 if stage == 1 else train_step_stage2
        epoch_losses, densities = [], []
        for step, idx in enumerate(_batches(len(dataset), cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))):
            batch = {name: dataset.streams[name][idx] for name in cfg.streams}
            try:
                m = step_fn(pairs, optimizer, batch, cfg, step_rng(cfg.seed, epoch, step + 1))
            except TrainingDiverged as exc:
                path = save_checkpoint(ckpt_dir / "diverged.pt", pairs, optimizer.state_dict(), epoch, snapshot)
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}", checkpoint=path) from exc
            metrics.write({"type": "step", "epoch": epoch, "step": step, "stage": stage, **m})
            epoch_losses.append(m["total"])
            if "pseudo_density" in m:
                densities.append(m["pseudo_density"])
        std = {name: collapse_std(pairs[name], monitor[name]) for name in cfg.streams}
        record = {
            "type": "epoch",
            "epoch": epoch,
            "stage": stage,
            "loss": float(np.mean(epoch_losses)),
            "collapse_std": std,
            "collapse_threshold": collapse_threshold(out_dim),
        }
        if densities:
            record["pseudo_density"] = float(np.mean(densities))
        metrics.write(record)
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.total_epochs or done == stop_after:
            save_checkpoint(ckpt_dir / f"epoch_{done:04d}.pt", pairs, optimizer.state_dict(), done, snapshot)
        if stop_after is not None and done >= stop_after and done < cfg.total_epochs:
            return ckpt_dir / f"epoch_{done:04d}.pt"

    final = save_checkpoint(run_dir / "final.pt", pairs, optimizer.state_dict(), cfg.total_epochs, snapshot)
    digest = {name: sum(p.detach().double().sum().item() for p in pairs[name].online_parameters()) for name in pairs}
    metrics.write({"type": "final", "epochs": cfg.total_epochs, "param_sum": digest, "checkpoint": final.name})
    return final
