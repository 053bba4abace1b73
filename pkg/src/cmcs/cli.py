"""Command-line entry points: synth, pretrain, eval, export."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig
from .errors import CMCSError, ConfigError, FormatError, TrainingDiverged
from .networks import HeadConfig, EncoderConfig, load_checkpoint
from .skeleton import (
    STREAMS,
    build_stream_dataset,
    default_topology,
    generate_synthetic_dataset,
    load_dataset,
    load_topology,
    preprocess,
    read_manifest,
    write_dataset,
)
from .training import pretrain

log = logging.getLogger("cmcs")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4
PROTOCOLS = ("knn", "linear", "semi", "finetune")


def run_root():
    return Path(os.environ.get("CMCS_RUN_DIR", "runs"))


def synth_benchmark(classes=4, per_class=130, subjects=13, train_subjects=10, seed=0, frames=50, joints=25):
    """Synthetic dataset whose first ``train_subjects`` subjects form the train split."""
    manifest, seqs = generate_synthetic_dataset(classes, per_class, frames, joints, seed=seed, num_subjects=subjects)
    manifest.train_groups = frozenset(range(train_subjects))
    return manifest, seqs


def load_data(cfg):
    """(manifest, stream dataset over all entries, train idx, test idx) for a run config."""
    d = cfg["data"]
    if d["manifest"]:
        manifest = read_manifest(d["manifest"], split_protocol=d["split_protocol"] or None)
        seqs = load_dataset(manifest)
    else:
        manifest, seqs = synth_benchmark(d["synth_classes"], d["synth_per_class"], d["synth_subjects"],
                                         d["synth_train_subjects"], d["synth_seed"], d["target_frames"])
        if d["split_protocol"]:
            manifest.split_protocol = d["split_protocol"]
    topology = load_topology(d["topology"]) if d["topology"] else default_topology()
    seqs = [preprocess(s, d["target_frames"], d["center_joint"]) for s in seqs]
    full = build_stream_dataset(seqs, topology, manifest.num_classes)
    train_idx, test_idx = manifest.split_indices(seed=cfg["train"]["seed"])
    return manifest, full, train_idx, test_idx


def model_configs(cfg, topology):
    m = cfg["model"]
    enc = EncoderConfig(kind=m["encoder"], feature_dim=m["feature_dim"], channel_scale=m["channel_scale"],
                        num_joints=topology.num_joints, topology=topology, temporal_kernel=m["temporal_kernel"])
    return enc, HeadConfig(m["hidden_dim"], m["out_dim"])


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_synth(args):
    manifest, seqs = synth_benchmark(args.classes, args.per_class, args.subjects, args.train_subjects,
                                     args.seed, args.frames, args.joints)
    topology = default_topology() if args.joints == 25 else None
    path = write_dataset(manifest, seqs, args.out, topology)
    print(f"manifest={path}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = RunConfig.load(args.config, args.overrides)
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / f"pretrain-{cfg.config_hash[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    (run_dir / "config.json").write_text(json.dumps({"config": cfg.to_dict(), "config_hash": cfg.config_hash},
                                                    indent=2, sort_keys=True))
    _, full, train_idx, _ = load_data(cfg)
    enc, head = model_configs(cfg, full.topology)
    snapshot = {"run": cfg.to_dict(), "config_hash": cfg.config_hash}
    try:
        final = pretrain(full.subset(train_idx), cfg.train_config(), run_dir, enc, head,
                         resume_from=args.resume, config_snapshot=snapshot)
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, f"training diverged: {exc} (checkpoint: {exc.checkpoint})")
    print(f"checkpoint={final}")
    return EXIT_OK


def _checkpoint_config(state, args):
    snapshot = state["config"].get("run")
    cfg = RunConfig.defaults() if snapshot is None else RunConfig({s: dict(v) for s, v in snapshot.items()})
    if getattr(args, "manifest", None):
        cfg.set("data", "manifest", args.manifest)
    for item in getattr(args, "overrides", []) or []:
        cfg.apply_override(item)
    return cfg


def _streams(arg, pairs):
    if arg == "all":
        return [s for s in STREAMS if s in pairs]
    if arg not in pairs:
        raise ConfigError(f"checkpoint has no {arg!r} stream (has {sorted(pairs)})")
    return [arg]


def run_protocol(protocol, pairs, train, test, streams, cfg, k=None, fraction=None):
    """Accuracy of one protocol, ensembling class scores when several streams are given."""
    scores = []
    for stream in streams:
        pair = pairs[stream]
        if protocol == "knn":
            tr = ev.extract_features(pair, train, stream, "train")
            te = ev.extract_features(pair, test, stream, "test")
            if len(streams) == 1:
                return ev.knn_eval(tr, te, k)
            votes, simsum = ev.knn_scores(tr, te, k, train.num_classes)
            scores.append(votes + 1e-6 * simsum)
        elif protocol == "linear":
            _, logits = ev.linear_eval(pair, train, test, stream, cfg.protocol("linear"), return_logits=True)
            scores.append(_softmax(logits))
        else:
            frac = 1.0 if protocol == "finetune" else fraction
            _, logits = ev.semi_eval(pair, train, test, frac, stream, cfg.protocol("semi"), return_logits=True)
            scores.append(_softmax(logits))
    combined = ev.ensemble_scores(scores)
    return float(np.mean(combined.argmax(1) == test.labels))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cmd_eval(args):
    if args.protocol not in PROTOCOLS:
        return _fail(EXIT_CONFIG, f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    state = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(state, args)
    _, full, train_idx, test_idx = load_data(cfg)
    train, test = full.subset(train_idx), full.subset(test_idx)
    streams = _streams(args.stream or cfg["eval"]["stream"], state["pairs"])
    k = args.k if args.k is not None else cfg["eval"]["knn_k"]
    fraction = args.fraction if args.fraction is not None else cfg["eval"]["fraction"]
    acc = run_protocol(args.protocol, state["pairs"], train, test, streams, cfg, k, fraction)
    result = {
        "protocol": args.protocol,
        "streams": streams,
        "accuracy": acc,
        "seed": cfg["eval"]["seed"],
        "checkpoint": str(args.checkpoint),
        "config_hash": cfg.config_hash,
    }
    if args.protocol == "knn":
        result["k"] = k
    if args.protocol in ("semi", "finetune"):
        result["fraction"] = 1.0 if args.protocol == "finetune" else fraction
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"eval-{args.protocol}-{'+'.join(streams)}.json")
    ev.write_result(out, **result)
    print(f"accuracy={acc:.6f}")
    return EXIT_OK


def _write_csv(path, header, labels, values):
    lines = [",".join(header)]
    for lab, row in zip(labels, values):
        lines.append(",".join([str(int(lab))] + [f"{v:.9e}" for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_export(args):
    state = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(state, args)
    _, full, _, _ = load_data(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stream in _streams(args.stream, state["pairs"]):
        fm = ev.extract_features(state["pairs"][stream], full, stream, "all")
        d = fm.features.shape[1]
        _write_csv(out / f"features_{stream}.csv", ["label"] + [f"f{i}" for i in range(d)], fm.labels, fm.features)
        _write_csv(out / f"pca_{stream}.csv", ["label", "pc1", "pc2"], fm.labels, ev.pca_2d(fm.features))
    print(f"exported={out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="cmcs", description="Cross-stream self-supervised skeleton learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=130)
    p.add_argument("--subjects", type=int, default=13)
    p.add_argument("--train-subjects", type=int, default=10)
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--joints", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    p.add_argument("config", nargs="?")
    p.add_argument("--run-dir")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="downstream evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--protocol", required=True)
    p.add_argument("--stream", help="joint, motion, bone or all (ensemble)")
    p.add_argument("--k", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export encoder features as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--stream", default="all")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [e for e in extra if not (e.startswith("--") and "." in e.split("=", 1)[0])]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except (FormatError, OSError) as exc:
        return _fail(EXIT_FORMAT, f"{type(exc).__name__}: {exc}")
    except CMCSError as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
