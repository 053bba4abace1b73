"""Skeleton sequences, stream derivation, file formats and synthetic data.

Arrays follow the (T, V, C, M) layout: frames, joints, xyz channels, persons.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidSequence, ParameterError, TopologyMismatch

MAGIC = b"SKL1"
_HEADER = struct.Struct("<4sIIII")

STREAMS = ("joint", "motion", "bone")


@dataclass
class SkeletonSequence:
    data: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise InvalidSequence(f"expected (T, V, C, M) array, got shape {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def replace(self, data):
        return SkeletonSequence(data, self.label, self.source_id)

    def validate(self):
        T, V, C, M = self.data.shape
        if T < 2 or V < 2 or C != 3 or M < 1:
            raise InvalidSequence(f"invalid sequence shape (T={T}, V={V}, C={C}, M={M})")
        if not np.all(np.isfinite(self.data)):
            raise InvalidSequence("sequence contains non-finite values")
        return self


@dataclass(frozen=True)
class BoneTopology:
    """Skeleton tree given as (child, parent) pairs; the root is its own parent."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple(sorted((int(c), int(p)) for c, p in self.pairs))
        object.__setattr__(self, "pairs", pairs)
        V = len(pairs)
        if [c for c, _ in pairs] != list(range(V)):
            raise TopologyMismatch("every joint must appear exactly once as a child")
        if any(not 0 <= p < V for _, p in pairs):
            raise TopologyMismatch("parent index out of range")
        roots = [c for c, p in pairs if c == p]
        if len(roots) != 1:
            raise TopologyMismatch(f"expected exactly one root, found {len(roots)}")
        # every joint must reach the root without cycling
        parent = self.parents
        for v in range(V):
            seen = set()
            while parent[v] != v:
                if v in seen:
                    raise TopologyMismatch("topology contains a cycle")
                seen.add(v)
                v = parent[v]

    @property
    def num_joints(self):
        return len(self.pairs)

    @property
    def root(self):
        return next(c for c, p in self.pairs if c == p)

    @property
    def parents(self):
        return np.array([p for _, p in self.pairs], dtype=np.int64)

    def depth(self):
        parent = self.parents
        out = np.zeros(len(parent), dtype=np.int64)
        for v in range(len(parent)):
            u = v
            while parent[u] != u:
                out[v] += 1
                u = parent[u]
        return out

    def permuted(self, perm):
        """Topology for joints reordered so that new joint i is old joint perm[i]."""
        inv = np.argsort(perm)
        return BoneTopology(tuple((int(inv[c]), int(inv[p])) for c, p in self.pairs))

    def to_json(self):
        return json.dumps([list(p) for p in self.pairs])

    @classmethod
    def from_json(cls, text):
        try:
            pairs = json.loads(text)
            return cls(tuple((int(c), int(p)) for c, p in pairs))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"malformed topology: {exc}") from exc


def default_topology():
    """The 25-joint Kinect v2 body tree rooted at the spine-shoulder joint."""
    text = resources.files("cmcs").joinpath("data/ntu25_topology.json").read_text()
    return BoneTopology.from_json(text)


def chain_topology(num_joints):
    return BoneTopology(tuple((v, max(v - 1, 0)) for v in range(num_joints)))


def load_topology(path):
    return BoneTopology.from_json(Path(path).read_text())


def save_topology(topology, path):
    Path(path).write_text(topology.to_json())


@dataclass
class StreamTriple:
    joint: SkeletonSequence
    motion: SkeletonSequence
    bone: SkeletonSequence

    def __post_init__(self):
        if not (self.joint.shape == self.motion.shape == self.bone.shape):
            raise InvalidSequence("stream shapes differ")

    def __getitem__(self, stream):
        return getattr(self, stream)


class SplitProtocol(str, Enum):
    cross_subject = "cross_subject"
    cross_view = "cross_view"
    cross_setup = "cross_setup"
    random = "random"


@dataclass
class ManifestEntry:
    path: str
    label: int
    subject: int
    view: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    split_protocol: SplitProtocol = SplitProtocol.cross_subject
    root: Path | None = None
    train_groups: frozenset[int] | None = None

    def __post_init__(self):
        self.split_protocol = SplitProtocol(self.split_protocol)
        for e in self.entries:
            if not 0 <= e.label < self.num_classes:
                raise FormatError(f"label {e.label} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def resolve(self, entry):
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def split_indices(self, seed=0):
        """Train/test indices under the manifest's split protocol.

        Subject-based splits put `train_groups` (default: the lower half of the
        observed subject ids) in train; cross-view trains on views other than 1.
        """
        if self.split_protocol is SplitProtocol.random:
            rng = np.random.default_rng(seed)
            order = rng.permutation(len(self.entries))
            cut = int(round(0.8 * len(order)))
            return np.sort(order[:cut]), np.sort(order[cut:])
        if self.split_protocol is SplitProtocol.cross_view:
            keys = np.array([e.view for e in self.entries])
            train_mask = keys != 1
        else:
            keys = np.array([e.subject for e in self.entries])
            groups = self.train_groups
            if groups is None:
                ids = np.unique(keys)
                groups = frozenset(ids[: (len(ids) + 1) // 2].tolist())
            train_mask = np.isin(keys, sorted(groups))
        idx = np.arange(len(self.entries))
        return idx[train_mask], idx[~train_mask]


def write_manifest(manifest, path):
    path = Path(path)
    with path.open("w") as fh:
        for e in manifest.entries:
            fh.write(json.dumps({"path": e.path, "label": e.label, "subject": e.subject, "view": e.view}) + "\n")
    meta = {
        "num_classes": manifest.num_classes,
        "split_protocol": manifest.split_protocol.value,
        "train_groups": None if manifest.train_groups is None else sorted(manifest.train_groups),
    }
    path.with_suffix(".meta.json").write_text(json.dumps(meta))


def read_manifest(path, num_classes=None, split_protocol=None, check_files=True):
    """Read a JSON-lines manifest; companion ``.meta.json`` supplies defaults."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entries.append(ManifestEntry(str(obj["path"]), int(obj["label"]), int(obj["subject"]), int(obj["view"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad manifest line ({exc})") from exc
    if num_classes is None:
        num_classes = meta.get("num_classes") or (max(e.label for e in entries) + 1 if entries else 0)
    groups = meta.get("train_groups")
    manifest = DatasetManifest(
        entries,
        int(num_classes),
        split_protocol or meta.get("split_protocol", "cross_subject"),
        root=path.parent,
        train_groups=None if groups is None else frozenset(groups),
    )
    if check_files:
        for e in manifest.entries:
            if not manifest.resolve(e).exists():
                raise FormatError(f"manifest references missing file {e.path}")
    return manifest


def write_sequence_file(seq, path):
    data = np.ascontiguousarray(seq.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *data.shape))
        fh.write(data.tobytes())


def read_sequence_file(path, label=None):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header")
    magic, T, V, C, M = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if C != 3:
        raise FormatError(f"{path}: expected C=3, header says C={C}")
    if T == 0 or V == 0 or M == 0:
        raise FormatError(f"{path}: empty dimension in header")
    count = T * V * C * M
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(T, V, C, M).astype(np.float32)
    return SkeletonSequence(data, label, Path(path).stem)


def resample_indices(T, target_frames):
    """Uniformly spaced frame indices, rounding half up."""
    if target_frames == 1:
        return np.zeros(1, dtype=np.int64)
    i = np.arange(target_frames, dtype=np.int64)
    return (2 * i * (T - 1) + (target_frames - 1)) // (2 * (target_frames - 1))


def preprocess(seq, target_frames=50, center_joint=1, num_persons=None):
    """Resample to `target_frames` and center on a joint of person 0 at frame 0.

    Person slots that are entirely zero stay zero. With `num_persons`, the
    person axis is zero-padded (or truncated) to that many slots.
    """
    data = np.asarray(seq.data, dtype=np.float32)
    if data.shape[0] == 0:
        raise InvalidSequence("empty sequence")
    if target_frames < 2:
        raise ParameterError("target_frames must be >= 2")
    T, V, C, M = data.shape
    if not 0 <= center_joint < V:
        raise ParameterError(f"center_joint {center_joint} outside [0, {V})")
    data = data[resample_indices(T, target_frames)]
    present = np.any(data != 0, axis=(0, 1, 2))
    origin = data[0, center_joint, :, 0].copy()
    data = data.copy()
    data[..., present] -= origin[None, None, :, None]
    if num_persons is not None and num_persons != M:
        padded = np.zeros(data.shape[:3] + (num_persons,), dtype=np.float32)
        keep = min(M, num_persons)
        padded[..., :keep] = data[..., :keep]
        data = padded
    return seq.replace(data).validate()


def derive_motion(seq):
    data = seq.data
    if data.shape[0] < 2:
        raise InvalidSequence("motion needs at least two frames")
    out = np.zeros_like(data)
    out[:-1] = data[1:] - data[:-1]
    return seq.replace(out)


def derive_bone(seq, topology):
    data = seq.data
    if data.shape[1] != topology.num_joints:
        raise TopologyMismatch(f"sequence has {data.shape[1]} joints, topology has {topology.num_joints}")
    return seq.replace(data - data[:, topology.parents])


def derive_streams(seq, topology):
    return StreamTriple(seq, derive_motion(seq), derive_bone(seq, topology))


def stream_array(data, stream, topology):
    """Vectorized stream derivation for a stacked (N, T, V, C, M) batch."""
    if stream == "joint":
        return data
    if stream == "motion":
        out = np.zeros_like(data)
        out[:, :-1] = data[:, 1:] - data[:, :-1]
        return out
    if stream == "bone":
        if data.shape[2] != topology.num_joints:
            raise TopologyMismatch("joint count does not match topology")
        return data - data[:, :, topology.parents]
    raise ParameterError(f"unknown stream {stream!r}")


@dataclass
class StreamDataset:
    """Stacked sequences of one split, one (N, T, V, C, M) array per stream."""

    streams: dict[str, np.ndarray]
    labels: np.ndarray
    num_classes: int
    topology: BoneTopology = field(default_factory=default_topology)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return StreamDataset({k: v[idx] for k, v in self.streams.items()}, self.labels[idx], self.num_classes, self.topology)


def build_stream_dataset(sequences, topology, num_classes, streams=STREAMS):
    joints = np.stack([s.data for s in sequences]).astype(np.float32)
    labels = np.array([-1 if s.label is None else s.label for s in sequences], dtype=np.int64)
    arrays = {name: stream_array(joints, name, topology) for name in streams}
    return StreamDataset(arrays, labels, num_classes, topology)


# -- synthetic data ---------------------------------------------------------

_REST_25 = np.array([
    [0.00, 0.00, 0.0], [0.00, 0.25, 0.0], [0.00, 0.62, 0.0], [0.00, 0.75, 0.0],
    [0.18, 0.50, 0.0], [0.22, 0.25, 0.0], [0.24, 0.02, 0.0], [0.24, -0.05, 0.0],
    [-0.18, 0.50, 0.0], [-0.22, 0.25, 0.0], [-0.24, 0.02, 0.0], [-0.24, -0.05, 0.0],
    [0.10, -0.02, 0.0], [0.11, -0.45, 0.0], [0.12, -0.88, 0.0], [0.12, -0.92, 0.08],
    [-0.10, -0.02, 0.0], [-0.11, -0.45, 0.0], [-0.12, -0.88, 0.0], [-0.12, -0.92, 0.08],
    [0.00, 0.50, 0.0], [0.24, -0.12, 0.0], [0.28, -0.06, 0.0], [-0.24, -0.12, 0.0],
    [-0.28, -0.06, 0.0],
], dtype=np.float64)

# body parts of the 25-joint figure: torso/head, left arm, right arm, left leg, right leg
_PARTS_25 = [
    [0, 1, 2, 3, 20],
    [4, 5, 6, 7, 21, 22],
    [8, 9, 10, 11, 23, 24],
    [12, 13, 14, 15],
    [16, 17, 18, 19],
]


def _figure(V):
    if V == 25:
        return default_topology(), _REST_25, _PARTS_25
    topo = chain_topology(V)
    angles = np.linspace(0, 2 * np.pi, V, endpoint=False)
    rest = np.stack([0.3 * np.cos(angles), np.linspace(-0.8, 0.8, V), 0.3 * np.sin(angles)], axis=1)
    parts = [list(p) for p in np.array_split(np.arange(V), min(5, V))]
    return topo, rest, parts


def _rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def generate_synthetic_dataset(num_classes=4, per_class=50, T=50, V=25, seed=0,
                               num_subjects=10, num_views=3, noise=0.005,
                               view_spread=0.0, subject_spread=0.0, phase_spread=3.0,
                               amp_jitter=0.2, subject_shear=0.4, motion_scale=2.0):
    """Deterministic toy action dataset built from class-specific oscillators.

    Each class drives every body part with its own frequency, amplitude,
    direction and phase pattern. Samples add a random phase offset, amplitude
    jitter, a per-subject body shape (scale and shear), a camera yaw per view
    and Gaussian noise. The defaults make static body shape the dominant
    nuisance, so a randomly initialized encoder clusters by subject rather
    than by action, while raw sequences stay 1-NN separable.

    Returns ``(manifest, sequences)``; manifest paths are relative file names
    that :func:`write_dataset` uses.
    """
    if num_classes < 2 or per_class < 2:
        raise ParameterError("need num_classes >= 2 and per_class >= 2")
    if T < 2 or V < 2:
        raise ParameterError("need T >= 2 and V >= 2")
    topo, rest, parts = _figure(V)
    depth = topo.depth().astype(np.float64)
    depth = depth / max(depth.max(), 1.0)

    class_rng = np.random.default_rng([seed, 0])
    n_parts = len(parts)
    freqs = 1.0 + np.arange(num_classes) * (2.0 / num_classes) + class_rng.uniform(0, 0.2, num_classes)
    amps = class_rng.uniform(0.02, 0.08, (num_classes, n_parts))
    lead = class_rng.permutation(np.resize(np.arange(n_parts), num_classes))
    amps[np.arange(num_classes), lead] = 0.25
    amps *= motion_scale
    dirs = class_rng.normal(size=(num_classes, n_parts, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    phases = class_rng.uniform(0, 2 * np.pi, (num_classes, n_parts))

    subj_rng = np.random.default_rng([seed, 1])
    subj_scale = subj_rng.uniform(1 - subject_spread, 1 + subject_spread, num_subjects)
    subj_shape = np.repeat(np.eye(3)[None], num_subjects, axis=0)
    subj_shape[:, ~np.eye(3, dtype=bool)] = subj_rng.uniform(-subject_shear, subject_shear, (num_subjects, 6))
    view_yaw = np.linspace(-view_spread, view_spread, num_views) if num_views > 1 else np.zeros(1)

    t = np.arange(T) / T
    entries, sequences = [], []
    for c in range(num_classes):
        for j in range(per_class):
            i = c * per_class + j
            rng = np.random.default_rng([seed, 2, i])
            subject = j * num_subjects // per_class
            view = int(rng.integers(num_views)) + 1
            offset = rng.uniform(0, phase_spread)
            jitter = rng.uniform(1 - amp_jitter, 1 + amp_jitter)
            pose = np.repeat(rest[None], T, axis=0) * subj_scale[subject]
            for p, joints in enumerate(parts):
                wave = np.sin(2 * np.pi * freqs[c] * t + phases[c, p] + offset)
                disp = jitter * amps[c, p] * wave[:, None] * dirs[c, p][None, :]
                w = 0.3 + 0.7 * depth[joints]
                pose[:, joints] += disp[:, None, :] * w[None, :, None]
            pose = pose @ (_rotation_y(view_yaw[view - 1]) @ subj_shape[subject]).T
            pose += rng.normal(0, noise, pose.shape)
            data = pose[..., None].astype(np.float32)
            sid = f"s{i:05d}"
            sequences.append(SkeletonSequence(data, c, sid))
            entries.append(ManifestEntry(f"{sid}.skl", c, subject, view))
    manifest = DatasetManifest(entries, num_classes, SplitProtocol.cross_subject)
    return manifest, sequences


def write_dataset(manifest, sequences, out_dir, topology=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry, seq in zip(manifest.entries, sequences):
        write_sequence_file(seq, out_dir / entry.path)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    if topology is not None:
        save_topology(topology, out_dir / "topology.json")
    manifest.root = out_dir
    return out_dir / "manifest.jsonl"


def load_dataset(manifest):
    return [read_sequence_file(manifest.resolve(e), e.label) for e in manifest.entries]
