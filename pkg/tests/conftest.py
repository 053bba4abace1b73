import numpy as np
import pytest
import torch

from cmcs.networks import EncoderConfig, HeadConfig, init_model_pair
from cmcs.skeleton import build_stream_dataset, default_topology, generate_synthetic_dataset, preprocess

torch.set_num_threads(1)


def tiny_configs(topology=None, feature_dim=16, out_dim=16, kind="graph_conv"):
    topology = topology or default_topology()
    enc = EncoderConfig(kind=kind, feature_dim=feature_dim, channel_scale=0.125,
                        num_joints=topology.num_joints, topology=topology)
    return enc, HeadConfig(hidden_dim=32, out_dim=out_dim)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """4 classes x 12 samples, 20 frames, 25 joints, all three streams."""
    manifest, seqs = generate_synthetic_dataset(4, 12, T=20, seed=3, num_subjects=4)
    seqs = [preprocess(s, 20) for s in seqs]
    return build_stream_dataset(seqs, default_topology(), manifest.num_classes)


@pytest.fixture
def tiny_pair():
    enc, head = tiny_configs()
    return init_model_pair(enc, head, seed=0)


# per-criterion acceptance outcomes, reported in the terminal summary
ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        for key, value in report.user_properties:
            if key == "criterion":
                ACCEPTANCE[value] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        verdict = "PASS" if ACCEPTANCE[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")
