"""Encoders, MLP heads, the online/target model pair and checkpoints."""

from __future__ import annotations

import copy
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ArchitectureMismatch, FormatError, ShapeError
from .skeleton import BoneTopology, default_topology

CHECKPOINT_FORMAT = "CMCS-CKPT-1"
DEFAULT_TAU = 0.996


@dataclass
class EncoderConfig:
    kind: str = "graph_conv"
    feature_dim: int = 128
    channel_scale: float = 0.25
    num_joints: int = 25
    topology: BoneTopology = field(default_factory=default_topology)
    in_channels: int = 3
    temporal_kernel: int = 9

    def __post_init__(self):
        if self.kind not in ("graph_conv", "recurrent"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if not 0 < self.channel_scale <= 1:
            raise ValueError("channel_scale must lie in (0, 1]")
        if self.topology.num_joints != self.num_joints:
            raise ValueError("topology joint count differs from num_joints")

    def to_dict(self):
        d = asdict(self)
        d["topology"] = [list(p) for p in self.topology.pairs]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["topology"] = BoneTopology(tuple(tuple(p) for p in d["topology"]))
        return cls(**d)


@dataclass
class HeadConfig:
    hidden_dim: int = 512
    out_dim: int = 128

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.out_dim <= 0:
            raise ValueError("head dimensions must be positive")


def graph_partitions(topology):
    """Self, child->parent and parent->child adjacency, column-normalized.

    Shape (3, V, V); entry [k, v, w] weights the message from joint v to w.
    """
    V = topology.num_joints
    inward = np.zeros((V, V))
    for c, p in topology.pairs:
        if c != p:
            inward[c, p] = 1.0
    parts = np.stack([np.eye(V), inward, inward.T])
    col = parts.sum(axis=1, keepdims=True)
    parts = np.divide(parts, col, out=np.zeros_like(parts), where=col > 0)
    return torch.tensor(parts, dtype=torch.float32)


class GraphConv(nn.Module):
    """Aggregate neighbours per partition, then mix channels with a 1x1 conv."""

    def __init__(self, in_channels, out_channels, num_partitions):
        super().__init__()
        self.conv = nn.Conv2d(in_channels * num_partitions, out_channels, kernel_size=1)

    def forward(self, x, A):
        n, c, t, v = x.shape
        x = torch.matmul(x.unsqueeze(1), A[None, :, None])
        return self.conv(x.reshape(n, -1, t, v))


class STBlock(nn.Module):
    """Spatial graph conv followed by a temporal conv, with a residual path."""

    def __init__(self, in_channels, out_channels, num_partitions, kernel=9, stride=1, residual=True):
        super().__init__()
        self.gcn = GraphConv(in_channels, out_channels, num_partitions)
        self.tcn = nn.Sequential(
            nn.BatchNorm2d(out_channels),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, (kernel, 1), (stride, 1), ((kernel - 1) // 2, 0)),
            nn.BatchNorm2d(out_channels),
        )
        if not residual:
            self.residual = None
        elif in_channels == out_channels and stride == 1:
            self.residual = nn.Identity()
        else:
            self.residual = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, (stride, 1)),
                nn.BatchNorm2d(out_channels),
            )
        self.relu = nn.ReLU()

    def forward(self, x, A):
        out = self.tcn(self.gcn(x, A))
        if self.residual is not None:
            out = out + self.residual(x)
        return self.relu(out)


class GraphEncoder(nn.Module):
    """Three-block ST-GCN-style encoder; input (N, C, T, V, M) -> (N, feature_dim)."""

    def __init__(self, cfg):
        super().__init__()
        self.register_buffer("A", graph_partitions(cfg.topology))
        widths = [max(1, int(round(w * cfg.channel_scale))) for w in (64, 128, 256)]
        self.data_bn = nn.BatchNorm2d(cfg.in_channels)
        k = self.A.shape[0]
        self.blocks = nn.ModuleList([
            STBlock(cfg.in_channels, widths[0], k, cfg.temporal_kernel, 1, residual=False),
            STBlock(widths[0], widths[1], k, cfg.temporal_kernel, 2),
            STBlock(widths[1], widths[2], k, cfg.temporal_kernel, 2),
        ])
        self.fc = nn.Linear(widths[2], cfg.feature_dim)
        self.num_joints = cfg.num_joints
        self.in_channels = cfg.in_channels

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.in_channels or x.shape[3] != self.num_joints:
            raise ShapeError(f"expected (N, {self.in_channels}, T, {self.num_joints}, M), got {tuple(x.shape)}")
        N, C, T, V, M = x.shape
        x = x.permute(0, 4, 1, 2, 3).reshape(N * M, C, T, V)
        x = self.data_bn(x)
        for block in self.blocks:
            x = block(x, self.A)
        x = x.mean(dim=(2, 3)).view(N, M, -1).mean(dim=1)
        return self.fc(x)


class RecurrentEncoder(nn.Module):
    """Single-layer GRU over flattened frames, averaged over time."""

    def __init__(self, cfg):
        super().__init__()
        self.num_joints = cfg.num_joints
        self.in_channels = cfg.in_channels
        self.gru = nn.GRU(cfg.num_joints * cfg.in_channels, cfg.feature_dim, batch_first=True)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.in_channels or x.shape[3] != self.num_joints:
            raise ShapeError(f"expected (N, {self.in_channels}, T, {self.num_joints}, M), got {tuple(x.shape)}")
        N, C, T, V, M = x.shape
        x = x.permute(0, 4, 2, 3, 1).reshape(N * M, T, V * C)
        out, _ = self.gru(x)
        return out.mean(dim=1).view(N, M, -1).mean(dim=1)


def build_encoder(cfg):
    return GraphEncoder(cfg) if cfg.kind == "graph_conv" else RecurrentEncoder(cfg)


class MLPHead(nn.Sequential):
    """Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, in_dim, hidden_dim, out_dim):
        super().__init__(
            nn.Linear(in_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, out_dim),
        )
        self.in_dim = in_dim

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected (N, {self.in_dim}) input, got {tuple(x.shape)}")
        return super().forward(x)


class ModelPair(nn.Module):
    """Online network (encoder, projector, predictor) and its EMA target."""

    def __init__(self, enc_cfg, head_cfg, tau=DEFAULT_TAU, use_predictor=True):
        super().__init__()
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        self.enc_cfg = enc_cfg
        self.head_cfg = head_cfg
        self.tau = float(tau)
        self.online_encoder = build_encoder(enc_cfg)
        self.online_projector = MLPHead(enc_cfg.feature_dim, head_cfg.hidden_dim, head_cfg.out_dim)
        self.predictor = MLPHead(head_cfg.out_dim, head_cfg.hidden_dim, head_cfg.out_dim) if use_predictor else None
        self.target_encoder = copy.deepcopy(self.online_encoder)
        self.target_projector = copy.deepcopy(self.online_projector)
        for p in self.target_parameters():
            p.requires_grad_(False)

    @property
    def use_predictor(self):
        return self.predictor is not None

    def online_parameters(self):
        params = list(self.online_encoder.parameters()) + list(self.online_projector.parameters())
        if self.predictor is not None:
            params += list(self.predictor.parameters())
        return params

    def target_parameters(self):
        return list(self.target_encoder.parameters()) + list(self.target_projector.parameters())

    def encode(self, x):
        return self.online_encoder(x)

    def project(self, y):
        return self.online_projector(y)

    def predict(self, z):
        return z if self.predictor is None else self.predictor(z)

    def online_forward(self, x):
        y = self.online_encoder(x)
        z = self.online_projector(y)
        return y, z, self.predict(z)

    @torch.no_grad()
    def target_forward(self, x):
        return self.target_projector(self.target_encoder(x))


def _aligned(pair):
    online = dict(pair.online_encoder.named_parameters(prefix="encoder"))
    online.update(pair.online_projector.named_parameters(prefix="projector"))
    target = dict(pair.target_encoder.named_parameters(prefix="encoder"))
    target.update(pair.target_projector.named_parameters(prefix="projector"))
    if online.keys() != target.keys():
        raise ArchitectureMismatch("online and target parameter names differ")
    for name, p in online.items():
        if p.shape != target[name].shape:
            raise ArchitectureMismatch(f"shape mismatch at {name}: {tuple(p.shape)} vs {tuple(target[name].shape)}")
    return [(target[name], online[name]) for name in online]


@torch.no_grad()
def ema_update(pair, tau=None):
    """xi <- tau * xi + (1 - tau) * theta for every target parameter.

    Computed as a lerp so tau=1, tau=0 and xi == theta are exact.
    """
    tau = pair.tau if tau is None else float(tau)
    for t, o in _aligned(pair):
        t.lerp_(o, 1.0 - tau)
    return pair


def init_model_pair(enc_cfg, head_cfg, tau=DEFAULT_TAU, seed=0, use_predictor=True):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelPair(enc_cfg, head_cfg, tau, use_predictor)


def to_input(batch, dtype=torch.float32):
    """(N, T, V, C, M) numpy batch -> (N, C, T, V, M) tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.transpose(batch, (0, 3, 1, 2, 4))), dtype=dtype)


# -- checkpoints --------------------------------------------------------------

def pair_spec(pair):
    return {
        "encoder": pair.enc_cfg.to_dict(),
        "head": asdict(pair.head_cfg),
        "tau": pair.tau,
        "use_predictor": pair.use_predictor,
    }


def pair_from_spec(spec):
    return ModelPair(EncoderConfig.from_dict(spec["encoder"]), HeadConfig(**spec["head"]),
                     spec["tau"], spec["use_predictor"])


def save_checkpoint(path, pairs, optimizer_state=None, epoch=0, config=None, rng_state=None, extra=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": int(epoch),
        "config": config or {},
        "specs": {name: pair_spec(p) for name, p in pairs.items()},
        "weights": {name: p.state_dict() for name, p in pairs.items()},
        "optimizer": optimizer_state,
        "rng": rng_state if rng_state is not None else {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    path = Path(path)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Load a checkpoint; returns the payload dict with rebuilt ``pairs``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    try:
        pairs = {}
        for name, spec in payload["specs"].items():
            pair = pair_from_spec(spec)
            pair.load_state_dict(payload["weights"][name])
            pairs[name] = pair
    except (KeyError, RuntimeError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint ({exc})") from exc
    payload["pairs"] = pairs
    return payload
