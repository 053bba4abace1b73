"""Acceptance gate: one test per criterion, each with its runtime budget.

Every test tags itself with a ``criterion`` property; conftest prints one
PASS/FAIL line per criterion in the terminal summary.
"""

import copy
import csv
import dataclasses
import json
import math
import time

import numpy as np
import torch

from cmcs.cli import main, synth_benchmark
from cmcs.config import RunConfig
from cmcs.evaluation import (
    FeatureMatrix,
    SEMI_PROTOCOL,
    ensemble_scores,
    extract_features,
    finetune_eval,
    knn_eval,
    linear_eval,
    LINEAR_PROTOCOL,
    nmi,
    semi_eval,
)
from cmcs.losses import (
    LossWeights,
    SimilarityBundle,
    batch_similarity,
    byol_loss,
    cmal_loss,
    cscl_loss,
    ensemble_pseudo_label,
    inter_stream_vote,
    intra_stream_pseudo,
    normalized_mse,
    sharpen,
)
from cmcs.networks import ema_update, init_model_pair, load_checkpoint, save_checkpoint
from cmcs.skeleton import (
    build_stream_dataset,
    default_topology,
    generate_synthetic_dataset,
    preprocess,
    read_manifest,
    read_sequence_file,
    write_dataset,
    write_sequence_file,
    SkeletonSequence,
)
from cmcs.training import (
    TrainConfig,
    _stream_outputs,
    collapse_threshold,
    cross_stream_loss,
    default_model_configs,
    init_pairs,
    make_optimizer,
    pretrain,
    similarity_bundle,
    step_rng,
    train_step_stage2,
)

SEEDS = (0, 1, 2)


def criterion(record_property, name):
    record_property("criterion", name)
    return time.perf_counter()


def benchmark(seed=0):
    """4 classes x (100 train / 30 test), T=50, V=25, preprocessed."""
    manifest, seqs = synth_benchmark(seed=seed)
    tr, te = manifest.split_indices()
    ds = build_stream_dataset([preprocess(s, 50) for s in seqs], default_topology(), manifest.num_classes)
    return ds.subset(tr), ds.subset(te)


def epoch_records(run_dir):
    lines = [json.loads(x) for x in (run_dir / "metrics.jsonl").read_text().splitlines()]
    return [x for x in lines if x["type"] == "epoch"]


# -- 1. loss-gradient fidelity --------------------------------------------------------

def central_difference(fn, inputs, h=1e-6):
    grads = []
    for k, x in enumerate(inputs):
        g = np.zeros(x.shape)
        flat = x.detach().numpy().reshape(-1)
        for i in range(flat.size):
            def at(delta):
                y = [t.detach().clone() for t in inputs]
                y[k].view(-1)[i] += delta
                return fn(*y).item()
            g.reshape(-1)[i] = (at(h) - at(-h)) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a, n = np.concatenate([g.ravel() for g in analytic]), np.concatenate([g.ravel() for g in numeric])
    return np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12)


def test_c1_loss_gradient_fidelity(record_property):
    start = criterion(record_property, "1 loss-gradient fidelity")
    rng = np.random.default_rng(0)

    def tensor(shape, low=None, high=None):
        x = rng.normal(size=shape) if low is None else rng.uniform(low, high, shape)
        return torch.tensor(x, dtype=torch.float64, requires_grad=True)

    def check(fn, live, fixed=()):
        fn(*live, *fixed).backward()
        analytic = [x.grad.numpy() for x in live]
        numeric = central_difference(lambda *xs: fn(*xs, *fixed), [x.detach() for x in live])
        return relative_error(analytic, numeric)

    both = LossWeights(alpha=1.0, beta=1.0)
    worst = {"normalized_mse": 0.0, "byol_loss": 0.0, "cmal_loss": 0.0, "cscl_loss": 0.0}
    for _ in range(20):
        worst["normalized_mse"] = max(worst["normalized_mse"],
                                      check(lambda a, b: normalized_mse(a, b).sum(), [tensor((4, 6)), tensor((4, 6))]))
        # the target arguments are stop-gradient, so only the online pair is differentiated
        for name, fn in (("byol_loss", byol_loss), ("cmal_loss", lambda *a: cmal_loss(*a, both))):
            targets = [tensor((4, 6)), tensor((4, 6))]
            worst[name] = max(worst[name], check(fn, [tensor((4, 6)), tensor((4, 6))], targets))
            assert all(t.grad is None for t in targets)
        N = int(rng.integers(3, 6))
        label = torch.tensor(rng.random((N, N)) < 0.4) | torch.eye(N, dtype=torch.bool)

        def cscl(*mats):
            return cscl_loss(label, SimilarityBundle({f"s{i}": (mats[2 * i], mats[2 * i + 1]) for i in range(3)}))

        worst["cscl_loss"] = max(worst["cscl_loss"], check(cscl, [tensor((N, N), -0.95, 0.95) for _ in range(6)]))

    record_property("detail", json.dumps(worst))
    elapsed = time.perf_counter() - start
    assert all(e < 1e-4 for e in worst.values()), worst
    assert elapsed < 60


# -- 2. oracle equivalence ---------------------------------------------------------------

def sharpen_oracle(S, k):
    N = len(S)
    out = [[1 if i == j else 0 for j in range(N)] for i in range(N)]
    for i in range(N):
        ranked = sorted((j for j in range(N) if j != i), key=lambda j: (-S[i][j], j))
        for j in ranked[:k]:
            out[i][j] = 1
    return out


def knn_oracle(train_x, train_y, test_x, test_y, k):
    correct = 0
    for q, truth in zip(test_x, test_y):
        sims = []
        for j, t in enumerate(train_x):
            cos = sum(a * b for a, b in zip(q, t)) / (math.sqrt(sum(a * a for a in q)) * math.sqrt(sum(b * b for b in t)))
            sims.append((cos, j))
        sims.sort(key=lambda s: (-s[0], s[1]))
        votes, simsum = {}, {}
        for cos, j in sims[:k]:
            votes[train_y[j]] = votes.get(train_y[j], 0) + 1
            simsum[train_y[j]] = simsum.get(train_y[j], 0.0) + cos
        pred = max(votes, key=lambda c: (votes[c], simsum[c], -c))
        correct += pred == truth
    return correct / len(test_y)


def nmi_oracle(a, b):
    n = len(a)
    def H(x):
        return -sum((x.count(v) / n) * math.log(x.count(v) / n) for v in set(x))
    ha, hb = H(list(a)), H(list(b))
    if ha == 0 or hb == 0:
        return 0.0
    mi = 0.0
    for u in set(a):
        for v in set(b):
            nuv = sum(1 for x, y in zip(a, b) if x == u and y == v)
            if nuv:
                mi += nuv / n * math.log(nuv * n / (list(a).count(u) * list(b).count(v)))
    return mi / ((ha + hb) / 2)


def test_c2_oracle_equivalence(record_property):
    start = criterion(record_property, "2 oracle equivalence")
    rng = np.random.default_rng(1)
    for _ in range(100):
        N = int(rng.integers(2, 11))
        k = int(rng.integers(0, N))
        S = rng.normal(size=(N, N))
        if rng.random() < 0.3:
            S = np.round(S)  # force ties
        Sp = rng.normal(size=(N, N))
        assert sharpen(torch.tensor(S), k).int().tolist() == sharpen_oracle(S.tolist(), k)

        fused = intra_stream_pseudo(torch.tensor(S), torch.tensor(Sp), k).matrix.int().tolist()
        a, b = sharpen_oracle(S.tolist(), k), sharpen_oracle(Sp.tolist(), k)
        assert fused == [[a[i][j] & b[i][j] for j in range(N)] for i in range(N)]

        A, B, C = (rng.integers(0, 2, (N, N)) for _ in range(3))
        voted = inter_stream_vote(torch.tensor(A), torch.tensor(B), torch.tensor(C)).matrix.int().tolist()
        assert voted == [[int(A[i, j] + B[i, j] + C[i, j] >= 2) for j in range(N)] for i in range(N)]

        d = int(rng.integers(2, 9))
        Q = rng.normal(size=(N, d))
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        K = rng.normal(size=(N, d))
        K /= np.linalg.norm(K, axis=1, keepdims=True)
        got = batch_similarity(torch.tensor(Q), torch.tensor(K)).numpy()
        expected = [[sum(Q[i, c] * K[j, c] for c in range(d)) for j in range(N)] for i in range(N)]
        assert np.max(np.abs(got - np.array(expected))) <= 1e-6

        n_tr, n_te, classes = int(rng.integers(2, 11)), int(rng.integers(1, 11)), int(rng.integers(2, 4))
        tr_x, te_x = rng.normal(size=(n_tr, 3)), rng.normal(size=(n_te, 3))
        if rng.random() < 0.3:
            te_x[0] = tr_x[0]
        tr_y, te_y = rng.integers(0, classes, n_tr), rng.integers(0, classes, n_te)
        kk = int(rng.integers(1, n_tr + 1))
        acc = knn_eval(FeatureMatrix(tr_x, tr_y), FeatureMatrix(te_x, te_y), kk)
        assert acc == knn_oracle(tr_x.tolist(), tr_y.tolist(), te_x.tolist(), te_y.tolist(), kk)

        logits = [rng.normal(size=(N, classes)) for _ in range(3)]
        ens = ensemble_scores(logits)
        loop = [[sum(L[i, c] for L in logits) / 3 for c in range(classes)] for i in range(N)]
        assert np.max(np.abs(ens - np.array(loop))) <= 1e-6
        assert ens.argmax(1).tolist() == [int(np.argmax(r)) for r in loop]

        la, lb = rng.integers(0, 3, N), rng.integers(0, 3, N)
        assert abs(nmi(la, lb) - nmi_oracle(la.tolist(), lb.tolist())) <= 1e-6
    assert time.perf_counter() - start < 60


# -- 3. EMA exactness ------------------------------------------------------------------------

def test_c3_ema_exactness(record_property):
    start = criterion(record_property, "3 EMA exactness")
    from conftest import tiny_configs

    enc, head = tiny_configs()
    for tau in (0.0, 0.9, 0.996, 1.0):
        pair = init_model_pair(enc, head, tau=tau, seed=3)
        g = torch.Generator().manual_seed(4)
        with torch.no_grad():
            for p in pair.target_parameters():
                p.add_(torch.randn(p.shape, generator=g))
        xi = [p.detach().clone() for p in pair.target_parameters()]
        theta = [p.detach().clone() for p in pair.online_parameters()[:len(xi)]]
        ema_update(pair)
        for new, x, t in zip(pair.target_parameters(), xi, theta):
            if tau == 1.0:
                assert torch.equal(new, x)
            elif tau == 0.0:
                assert torch.equal(new, t)
            else:
                exact = tau * x.double() + (1 - tau) * t.double()
                ulp = torch.finfo(torch.float32).eps * torch.maximum(x.abs(), t.abs()).double()
                assert torch.all((new.double() - exact).abs() <= ulp + 1e-45)
        assert all(torch.equal(a, b) for a, b in zip(pair.online_parameters()[:len(xi)], theta))
    assert time.perf_counter() - start < 5


# -- 4. stop-gradient ------------------------------------------------------------------------------

def test_c4_stop_gradient(record_property, small_dataset):
    start = criterion(record_property, "4 stop-gradient")
    from conftest import tiny_configs

    enc, head = tiny_configs()
    cfg = TrainConfig(batch_size=8, total_epochs=2, stage1_epochs=1)
    batch = {s: small_dataset.streams[s][:8] for s in cfg.streams}

    def target_grads_zero(pairs):
        return all(p.grad is None or not p.grad.any() for pair in pairs.values() for p in pair.target_parameters())

    for loss_fn in (byol_loss, cmal_loss):
        pairs = init_pairs(cfg, enc, head)
        outs = _stream_outputs(pairs, batch, cfg, step_rng(0, 0, 1))
        sum(loss_fn(*o) for o in outs.values()).backward()
        assert target_grads_zero(pairs)

    # composite through the real training step
    pairs = init_pairs(cfg, enc, head)
    train_step_stage2(pairs, make_optimizer(pairs, cfg), batch, cfg, step_rng(0, 0, 1))
    assert target_grads_zero(pairs)

    # gradients with the live pseudo-label path vs. the label frozen as a constant matrix
    def composite_grads(freeze):
        pairs = init_pairs(cfg, enc, head)
        outs = _stream_outputs(pairs, batch, cfg, step_rng(0, 0, 1))
        cmal = sum(cmal_loss(*o) for o in outs.values())
        if freeze:
            bundle = similarity_bundle(outs)
            label, _ = ensemble_pseudo_label(bundle, cfg.top_k)
            constant = torch.tensor(label.matrix.numpy().copy())
            assert constant.grad_fn is None and not constant.requires_grad
            cscl = cscl_loss(constant, bundle)
        else:
            cscl, _ = cross_stream_loss(outs, cfg)
        (cmal + cfg.weights.gamma * cscl).backward()
        assert target_grads_zero(pairs)
        return [p.grad.clone() for name in sorted(pairs) for p in pairs[name].online_parameters()]

    live, frozen = composite_grads(False), composite_grads(True)
    assert all(torch.equal(a, b) for a, b in zip(live, frozen))
    assert time.perf_counter() - start < 30


# -- 5. anti-collapse contract -------------------------------------------------------------------

def test_c5_anti_collapse(record_property, tmp_path):
    start = criterion(record_property, "5 anti-collapse contract")
    train, _ = benchmark(0)
    assert len(train) == 400
    enc, head = default_model_configs(train)
    threshold = collapse_threshold(head.out_dim)
    common = dict(batch_size=32, total_epochs=30, stage1_epochs=30, objective="byol", streams=("joint",), seed=0,
                  checkpoint_every=30)
    pretrain(train, TrainConfig(**common), tmp_path / "healthy", enc, head)
    healthy = [r["collapse_std"]["joint"] for r in epoch_records(tmp_path / "healthy")]
    pretrain(train, TrainConfig(**common, use_predictor=False, tau=0.0), tmp_path / "degenerate", enc, head)
    degenerate = [r["collapse_std"]["joint"] for r in epoch_records(tmp_path / "degenerate")]
    record_property("detail", json.dumps({"threshold": threshold, "healthy_min": min(healthy),
                                          "degenerate_min": min(degenerate)}))
    assert len(healthy) == 30 and min(healthy) > threshold
    assert min(degenerate) < threshold
    assert time.perf_counter() - start < 600


# -- 6. representation quality ordering --------------------------------------------------------

def test_c6_representation_quality(record_property, tmp_path):
    start = criterion(record_property, "6 representation quality ordering")
    epochs, stage1 = 20, 15
    scores = {"random": [], "cmal": [], "cmcs": [], "byol": []}
    train, test = benchmark(0)
    for seed in SEEDS:
        k = 20 if len(train) >= 100 else 5
        enc, head = default_model_configs(train)

        def knn(pair):
            return knn_eval(extract_features(pair, train, "joint"), extract_features(pair, test, "joint"), k)

        cmcs_cfg = TrainConfig(batch_size=32, total_epochs=epochs, stage1_epochs=stage1, seed=seed,
                               checkpoint_every=stage1)
        scores["random"].append(knn(init_pairs(cmcs_cfg, enc, head)["joint"]))
        run = tmp_path / f"cmcs{seed}"
        final = pretrain(train, cmcs_cfg, run, enc, head)
        scores["cmal"].append(knn(load_checkpoint(run / "checkpoints" / f"epoch_{stage1:04d}.pt")["pairs"]["joint"]))
        scores["cmcs"].append(knn(load_checkpoint(final)["pairs"]["joint"]))
        byol_cfg = TrainConfig(batch_size=32, total_epochs=epochs, stage1_epochs=epochs, seed=seed,
                               objective="byol", streams=("joint",), checkpoint_every=epochs)
        scores["byol"].append(knn(load_checkpoint(pretrain(train, byol_cfg, tmp_path / f"byol{seed}",
                                                           enc, head))["pairs"]["joint"]))
    mean = {name: float(np.mean(v)) for name, v in scores.items()}
    elapsed = time.perf_counter() - start
    record_property("detail", json.dumps({"mean": mean, "per_seed": scores, "seconds": elapsed}))
    print("criterion 6 KNN per seed:", scores)
    print("criterion 6 KNN means:", mean, f"elapsed {elapsed:.0f}s")
    checks = {
        "cmal >= random + 0.15": mean["cmal"] >= mean["random"] + 0.15,
        "cmcs >= byol - 0.02": mean["cmcs"] >= mean["byol"] - 0.02,
        "runtime < 30 min": elapsed < 1800,
    }
    assert all(checks.values()), checks


# -- 7. protocol plumbing ---------------------------------------------------------------------------

def test_c7_protocol_plumbing(record_property):
    start = criterion(record_property, "7 protocol plumbing")
    train, test = benchmark(0)
    enc, head = default_model_configs(train)
    pair = init_model_pair(enc, head, seed=0)
    before = copy.deepcopy(pair.state_dict())
    linear_eval(pair, train, test, "joint", LINEAR_PROTOCOL.scaled(10))
    assert all(torch.equal(v, before[k]) for k, v in pair.state_dict().items())

    short = SEMI_PROTOCOL.scaled(5)
    a, la = semi_eval(pair, train, test, 1.0, "joint", short, return_logits=True)
    b, lb = finetune_eval(pair, train, test, "joint", short, return_logits=True)
    assert a == b and np.array_equal(la, lb)

    acc = {0.01: [], 0.1: []}
    for seed in SEEDS:
        seeded = init_model_pair(enc, head, seed=seed)
        for fraction in acc:
            cfg = dataclasses.replace(SEMI_PROTOCOL, seed=seed)
            acc[fraction].append(semi_eval(seeded, train, test, fraction, "joint", cfg))
    record_property("detail", json.dumps({str(k): v for k, v in acc.items()}))
    assert np.mean(acc[0.1]) >= np.mean(acc[0.01])
    assert time.perf_counter() - start < 900


# -- 8. determinism and resume -----------------------------------------------------------------------

def test_c8_determinism_and_resume(record_property, tmp_path):
    start = criterion(record_property, "8 determinism and resume")
    train, _ = benchmark(0)
    train = train.subset(np.arange(0, 400, 4))
    enc, head = default_model_configs(train)
    # the interrupted run stops at the stage boundary, so the resumed part runs stage 2
    cfg = TrainConfig(batch_size=32, total_epochs=3, stage1_epochs=2, seed=5)

    def final_line(run):
        return (run / "metrics.jsonl").read_text().splitlines()[-1]

    full = pretrain(train, cfg, tmp_path / "a", enc, head)
    pretrain(train, cfg, tmp_path / "b", enc, head)
    assert final_line(tmp_path / "a") == final_line(tmp_path / "b")

    part = pretrain(train, cfg, tmp_path / "c", enc, head, stop_after=2)
    resumed = pretrain(train, cfg, tmp_path / "c", resume_from=part)
    ref, got = load_checkpoint(full)["pairs"], load_checkpoint(resumed)["pairs"]
    for name in ref:
        a = torch.cat([v.flatten().double() for v in ref[name].state_dict().values() if v.is_floating_point()])
        b = torch.cat([v.flatten().double() for v in got[name].state_dict().values() if v.is_floating_point()])
        assert (torch.linalg.norm(a - b) / torch.linalg.norm(a)).item() <= 1e-5
    assert time.perf_counter() - start < 600


# -- 9. format round trips ------------------------------------------------------------------------------

def test_c9_format_round_trips(record_property, tmp_path):
    start = criterion(record_property, "9 format round trips")
    from conftest import tiny_configs

    rng = np.random.default_rng(9)
    seq = SkeletonSequence(rng.normal(size=(7, 25, 3, 2)).astype(np.float32))
    write_sequence_file(seq, tmp_path / "x.skl")
    assert read_sequence_file(tmp_path / "x.skl").data.tobytes() == seq.data.tobytes()

    manifest, seqs = generate_synthetic_dataset(2, 6, T=12, num_subjects=4)
    path = write_dataset(manifest, seqs, tmp_path / "data", default_topology())
    back = read_manifest(path)
    assert [vars(e) for e in back.entries] == [vars(e) for e in manifest.entries]
    assert back.num_classes == manifest.num_classes and back.split_protocol == manifest.split_protocol

    enc, head = tiny_configs()
    pairs = {s: init_model_pair(enc, head, seed=i) for i, s in enumerate(("joint", "motion", "bone"))}
    cfg = RunConfig.load(None, [f"--data.manifest={path}", "--data.target_frames=12", "--model.channel_scale=0.125",
                                "--model.feature_dim=16", "--model.hidden_dim=32", "--model.out_dim=16"])
    ckpt = save_checkpoint(tmp_path / "c.pt", pairs, None, 3, {"run": cfg.to_dict()})
    state = load_checkpoint(ckpt)
    assert state["epoch"] == 3 and state["config"]["run"] == cfg.to_dict()
    for name, pair in pairs.items():
        for (k, v), (k2, v2) in zip(pair.state_dict().items(), state["pairs"][name].state_dict().items()):
            assert k == k2 and torch.equal(v, v2)

    assert main(["export", str(ckpt), "--out", str(tmp_path / "exp")]) == 0
    full = build_stream_dataset([preprocess(s, 12) for s in seqs], default_topology(), 2)
    for name, pair in pairs.items():
        rows = list(csv.reader((tmp_path / "exp" / f"features_{name}.csv").read_text().splitlines()))
        assert rows[0] == ["label"] + [f"f{i}" for i in range(16)]
        labels = np.array([int(r[0]) for r in rows[1:]])
        values = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float32)
        expected = extract_features(pair, full, name)
        assert np.array_equal(labels, expected.labels)
        assert np.array_equal(values, expected.features)
        pca = np.loadtxt(tmp_path / "exp" / f"pca_{name}.csv", delimiter=",", skiprows=1)
        assert pca.shape == (len(full), 3) and np.all(np.abs(pca[:, 1:].mean(0)) < 1e-6)
    assert time.perf_counter() - start < 10
