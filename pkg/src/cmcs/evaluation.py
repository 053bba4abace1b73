"""Downstream protocols: KNN, linear probe, semi-supervised and finetune,
plus feature extraction, stream ensembling and clustering NMI."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import EmptySplit, ParameterError, ShapeError, StratificationError
from .networks import init_model_pair, to_input

DEFAULT_KNN_K = 20


@dataclass
class FeatureMatrix:
    features: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ShapeError("features and labels differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass
class ProtocolConfig:
    lr: float
    epochs: int
    milestone: int
    lr_decay: float = 0.1
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def scaled(self, epochs):
        """Same schedule shape compressed to ``epochs`` epochs."""
        milestone = int(round(self.milestone * epochs / self.epochs)) if self.epochs else 0
        return ProtocolConfig(self.lr, epochs, milestone, self.lr_decay, self.batch_size,
                              self.momentum, self.weight_decay, self.seed)


LINEAR_PROTOCOL = ProtocolConfig(lr=3.0, epochs=100, milestone=80, lr_decay=0.1, batch_size=128)
SEMI_PROTOCOL = ProtocolConfig(lr=0.1, epochs=150, milestone=80, lr_decay=0.1, batch_size=128, weight_decay=1e-4)
FINETUNE_PROTOCOL = SEMI_PROTOCOL


@torch.no_grad()
def encode_array(encoder, data, batch_size=256):
    was_training = encoder.training
    encoder.eval()
    out = [encoder(to_input(data[i:i + batch_size])) for i in range(0, len(data), batch_size)]
    encoder.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros((0, 0), dtype=np.float32)


def extract_features(pair, dataset, stream, split=""):
    """Eval-mode online-encoder features of one stream, without augmentation."""
    return FeatureMatrix(encode_array(pair.online_encoder, dataset.streams[stream]), dataset.labels, split)


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def knn_neighbors(train, test, k):
    """Indices and cosine similarities of the k nearest train rows (stable by index)."""
    if len(train) == 0 or len(test) == 0:
        raise EmptySplit("knn needs nonempty train and test splits")
    if not 1 <= k <= len(train):
        raise ParameterError(f"k={k} outside [1, {len(train)}]")
    sim = _unit_rows(test.features) @ _unit_rows(train.features).T
    idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(sim, idx, axis=1)


def knn_scores(train, test, k=DEFAULT_KNN_K, num_classes=None):
    """Per-class (vote fraction, summed similarity) for every test row."""
    idx, sims = knn_neighbors(train, test, k)
    num_classes = num_classes or int(max(train.labels.max(), test.labels.max()) + 1)
    labels = train.labels[idx]
    votes = np.zeros((len(test), num_classes))
    simsum = np.zeros((len(test), num_classes))
    rows = np.repeat(np.arange(len(test)), k)
    np.add.at(votes, (rows, labels.ravel()), 1.0)
    np.add.at(simsum, (rows, labels.ravel()), sims.ravel())
    return votes / k, simsum


def knn_predict(train, test, k=DEFAULT_KNN_K):
    """Majority vote among the k nearest neighbours; ties go to the larger summed similarity."""
    votes, simsum = knn_scores(train, test, k)
    pred = np.empty(len(test), dtype=np.int64)
    for i in range(len(test)):
        best = np.flatnonzero(votes[i] == votes[i].max())
        pred[i] = best[np.argmax(simsum[i, best])]
    return pred


def knn_eval(train, test, k=DEFAULT_KNN_K):
    return float(np.mean(knn_predict(train, test, k) == test.labels))


def ensemble_scores(per_stream, strategy="mean"):
    arrays = [np.asarray(s, dtype=np.float64) for s in per_stream]
    if not arrays:
        raise ShapeError("no scores to ensemble")
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ShapeError("per-stream scores differ in shape")
    stacked = np.stack(arrays)
    if strategy == "mean":
        return stacked.mean(axis=0)
    if strategy == "sum":
        return stacked.sum(axis=0)
    raise ParameterError(f"unknown ensemble strategy {strategy!r}")


def _schedule(optimizer, cfg):
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=[cfg.milestone], gamma=cfg.lr_decay)


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_linear_head(train, num_classes, cfg):
    """Fit a fully connected softmax classifier on fixed features."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        head = nn.Linear(train.features.shape[1], num_classes)
    x = torch.as_tensor(train.features, dtype=torch.float32)
    y = torch.as_tensor(train.labels)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = _schedule(opt, cfg)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for idx in _minibatches(len(y), cfg.batch_size, rng):
            loss = nn.functional.cross_entropy(head(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return head


@torch.no_grad()
def head_logits(head, features):
    return head(torch.as_tensor(features, dtype=torch.float32)).numpy()


def linear_probe(train, test, num_classes, cfg=LINEAR_PROTOCOL):
    """Accuracy and test logits of a linear classifier on precomputed features."""
    head = train_linear_head(train, num_classes, cfg)
    logits = head_logits(head, test.features)
    return float(np.mean(logits.argmax(1) == test.labels)), logits


def linear_eval(pair, train_ds, test_ds, stream="joint", cfg=LINEAR_PROTOCOL, return_logits=False):
    """Frozen-encoder linear evaluation; the encoder is never modified."""
    train = extract_features(pair, train_ds, stream, "train")
    test = extract_features(pair, test_ds, stream, "test")
    acc, logits = linear_probe(train, test, train_ds.num_classes, cfg)
    return (acc, logits) if return_logits else acc


def stratified_subset(labels, fraction, seed=0, num_classes=None):
    """Per-class random selection of round(fraction * class size) indices."""
    if not 0 < fraction <= 1:
        raise ParameterError("fraction must lie in (0, 1]")
    labels = np.asarray(labels)
    num_classes = num_classes or int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        n = int(np.floor(fraction * len(members) + 0.5))
        if n == 0:
            raise StratificationError(f"class {c} has no samples at fraction {fraction}")
        chosen.append(rng.permutation(members)[:n])
    return np.sort(np.concatenate(chosen))


class Classifier(nn.Module):
    def __init__(self, encoder, feature_dim, num_classes):
        super().__init__()
        self.encoder = encoder
        self.fc = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        return self.fc(self.encoder(x))


@torch.no_grad()
def _predict(model, data, batch_size=256):
    model.eval()
    out = [model(to_input(data[i:i + batch_size])) for i in range(0, len(data), batch_size)]
    return torch.cat(out).numpy()


def semi_eval(pair, train_ds, test_ds, fraction, stream="joint", cfg=SEMI_PROTOCOL, return_logits=False):
    """Train encoder + linear head end to end on a stratified labeled subset.

    ``pair=None`` starts from a random encoder (seeded by ``cfg.seed``). The
    given pair is deep-copied and left untouched.
    """
    idx = stratified_subset(train_ds.labels, fraction, cfg.seed, train_ds.num_classes)
    if pair is None:
        encoder = _random_encoder(train_ds, cfg.seed)
    else:
        encoder = copy.deepcopy(pair.online_encoder)
    feature_dim = encoder.fc.out_features if hasattr(encoder, "fc") else encoder.gru.hidden_size
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = Classifier(encoder, feature_dim, train_ds.num_classes)
    for p in model.parameters():
        p.requires_grad_(True)
    data = train_ds.streams[stream][idx]
    y = torch.as_tensor(train_ds.labels[idx])
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = _schedule(opt, cfg)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        model.train()
        for b in _minibatches(len(y), cfg.batch_size, rng):
            if len(b) < 2:
                continue
            loss = nn.functional.cross_entropy(model(to_input(data[b])), y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    logits = _predict(model, test_ds.streams[stream])
    acc = float(np.mean(logits.argmax(1) == test_ds.labels))
    return (acc, logits) if return_logits else acc


def finetune_eval(pair, train_ds, test_ds, stream="joint", cfg=FINETUNE_PROTOCOL, return_logits=False):
    return semi_eval(pair, train_ds, test_ds, 1.0, stream, cfg, return_logits)


def _random_encoder(dataset, seed, template=None):
    from .training import default_model_configs

    enc, head = default_model_configs(dataset) if template is None else (template.enc_cfg, template.head_cfg)
    return init_model_pair(enc, head, seed=seed).online_encoder


def entropy(labels):
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b):
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    joint = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(joint, (ia, ib), 1.0)
    joint /= joint.sum()
    pa = joint.sum(1, keepdims=True)
    pb = joint.sum(0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def nmi(labels_true, labels_pred):
    """Mutual information normalized by the arithmetic mean of the two entropies.

    Returns 0 when either labeling has a single cluster.
    """
    labels_true = np.asarray(labels_true)
    labels_pred = np.asarray(labels_pred)
    if labels_true.shape != labels_pred.shape:
        raise ShapeError("label arrays differ in length")
    h_true, h_pred = entropy(labels_true), entropy(labels_pred)
    if h_true == 0 or h_pred == 0:
        return 0.0
    return float(np.clip(mutual_information(labels_true, labels_pred) / (0.5 * (h_true + h_pred)), 0.0, 1.0))


def cluster_nmi(fm, num_clusters=None, seed=0, restarts=10):
    """NMI between k-means clusters of the features and the true labels."""
    from sklearn.cluster import KMeans

    k = num_clusters or len(np.unique(fm.labels))
    pred = KMeans(n_clusters=k, n_init=restarts, random_state=seed).fit_predict(fm.features)
    return nmi(fm.labels, pred)


def pca_2d(features):
    """Centered 2-D principal-component projection."""
    x = np.asarray(features, dtype=np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    # fix the sign of each axis: largest-magnitude loading positive
    vt = vt * np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])[:, None]
    proj = x @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj - proj.mean(axis=0, keepdims=True)


def write_result(path, **fields):
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")
    return fields


def protocol_dict(cfg):
    return asdict(cfg)
