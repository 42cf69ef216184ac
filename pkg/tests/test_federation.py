import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stsc.channel import ChannelSpec
from stsc.codec import init_params
from stsc.data import PartitionSpec, partition_iid
from stsc.federation import (AggregationError, FederationConfig, FederationError, aggregation_weights, fedavg,
                             global_loss, run_federated_training, run_local_baselines, select_participants)
from stsc.trainer import TrainConfig, local_train

from .conftest import TINY, smooth_dataset


def scalar(v):
    return {"w": torch.tensor([float(v)], dtype=torch.float64)}


def test_equal_sizes_is_mean():
    out = fedavg([scalar(1), scalar(2), scalar(6)], [5, 5, 5])
    assert float(out["w"]) == pytest.approx(3.0, rel=1e-15)


def test_single_client_identity():
    p = init_params(TINY)
    out = fedavg([p], [17])
    assert all(torch.equal(out[k], p[k]) for k in p)


def test_hand_arithmetic():
    assert float(fedavg([scalar(4), scalar(0), scalar(0)], [2, 1, 1])["w"]) == 2.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 20000), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
def test_weights_exact_and_aggregate_matches_oracle(sizes, seed):
    weights = aggregation_weights(sizes)
    assert sum(weights) == Fraction(1)
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(3, 4)) for _ in sizes]
    params = [{"a": torch.tensor(a)} for a in arrays]
    out = fedavg(params, sizes)["a"].numpy()
    expected = sum(n * a for n, a in zip(sizes, arrays)) / sum(sizes)
    assert np.max(np.abs(out - expected) / np.maximum(np.abs(expected), 1e-300)) < 1e-10


def test_subset_renormalization():
    rng = np.random.default_rng(3)
    sizes = {0: 16000, 1: 9000, 2: 25000}
    arrays = {k: rng.normal(size=5) for k in sizes}
    chosen = [0, 2]
    out = fedavg([{"a": torch.tensor(arrays[k])} for k in chosen], [sizes[k] for k in chosen])["a"].numpy()
    expected = (16000 * arrays[0] + 25000 * arrays[2]) / 41000
    assert np.max(np.abs(out - expected) / np.abs(expected)) < 1e-10
    assert sum(aggregation_weights([sizes[k] for k in chosen])) == 1


def test_shape_mismatch_names_array():
    a = {"x": torch.zeros(2), "y": torch.zeros(3)}
    b = {"x": torch.zeros(2), "y": torch.zeros(4)}
    with pytest.raises(AggregationError, match="'y'"):
        fedavg([a, b], [1, 1])
    with pytest.raises(AggregationError, match="'x'"):
        fedavg([a, {"y": torch.zeros(3)}], [1, 1])
    with pytest.raises(AggregationError):
        fedavg([a, b], [1])


def test_aggregate_keeps_dtype():
    out = fedavg([init_params(TINY), init_params(TINY)], [1, 2])
    assert all(v.dtype == torch.float32 for v in out.values())


@pytest.mark.parametrize("losses,sizes,expected", [([1, 2, 3], [4, 4, 4], 2.0), ([0.5], [9], 0.5), ([0, 4], [3, 1], 1.0)])
def test_global_loss(losses, sizes, expected):
    assert global_loss(losses, sizes) == pytest.approx(expected, abs=1e-15)


def test_global_loss_length_mismatch():
    with pytest.raises(ValueError):
        global_loss([1.0, 2.0], [1])


def test_selection_full_and_deterministic():
    cfg = FederationConfig(rounds=5)
    assert all(select_participants(t, cfg) == [0, 1, 2] for t in range(1, 6))
    part = FederationConfig(participants_per_round=2, seed=4)
    assert select_participants(7, part) == select_participants(7, part)


def test_selection_frequency():
    cfg = FederationConfig(participants_per_round=2, seed=1)
    counts = Counter(k for t in range(1, 301) for k in select_participants(t, cfg))
    assert set(counts) == {0, 1, 2}
    assert all(abs(c - 200) <= 25 for c in counts.values())
    assert all(len(select_participants(t, cfg)) == 2 for t in range(1, 50))


def test_config_guards():
    with pytest.raises(ValueError):
        FederationConfig(rounds=0)
    with pytest.raises(ValueError):
        FederationConfig(participants_per_round=4)
    with pytest.raises(ValueError):
        FederationConfig(num_clients=2)  # partition spec still says 3 clients


@pytest.fixture(scope="module")
def small_data():
    return smooth_dataset(24, size=8, seed=2)


def test_single_client_federation_equals_local_training(small_data):
    train = TrainConfig(learning_rate=0.05, batch_size=8, local_epochs=2, optimizer="sgd",
                        channel=ChannelSpec("rician", 6.0, seed=3), seed=9)
    cfg = FederationConfig(num_clients=1, rounds=3, participants_per_round=1,
                           partition=PartitionSpec("iid", 1.0, 1, 0), train=train, eval_samples=0)
    assignment = partition_iid(small_data.labels, 1, 0)
    init = init_params(TINY, torch.float64)
    fed, logs = run_federated_training(cfg, TINY, small_data, assignment, init=init)
    local, trace, _ = local_train(init, small_data, TrainConfig(**{**train.__dict__, "local_epochs": 6}), TINY,
                                  stream=("client", 0))
    assert all(torch.equal(fed[k], local[k]) for k in fed)
    assert [e.t for e in logs] == [1, 2, 3]


def test_round_logs_and_callback(small_data):
    train = TrainConfig(learning_rate=1e-3, batch_size=8, channel=ChannelSpec("awgn", 12.0))
    cfg = FederationConfig(rounds=3, participants_per_round=2, train=train, eval_samples=6, seed=2)
    assignment = partition_iid(small_data.labels, 3, 0)
    seen = []
    params, logs = run_federated_training(cfg, TINY, small_data, assignment, small_data,
                                          on_round=lambda e, p: seen.append((e.t, len(p))))
    assert [t for t, _ in seen] == [1, 2, 3]
    for e in logs:
        assert len(e.client_ids) == 2 and e.client_ids == sorted(e.client_ids)
        assert e.client_sizes == [8, 8]
        assert e.global_loss == pytest.approx(global_loss(e.client_losses, e.client_sizes))
        assert math.isfinite(e.psnr_eval) and e.ssim_eval is not None
        rec = e.to_record()
        assert set(rec) == {"t", "client_ids", "loss_k", "sizes", "loss_global", "psnr_eval", "ssim_eval"}


def test_divergence_surfaces_round(small_data):
    bad = init_params(TINY)
    bad["decoder.head.bias"] = torch.full_like(bad["decoder.head.bias"], math.nan)
    cfg = FederationConfig(rounds=2, eval_samples=0)
    with pytest.raises(FederationError, match="round 1, client 0"):
        run_federated_training(cfg, TINY, small_data, partition_iid(small_data.labels, 3, 0), init=bad)


def test_local_baselines_shape(small_data):
    train = TrainConfig(learning_rate=1e-3, batch_size=8)
    cfg = FederationConfig(rounds=2, train=train, eval_samples=0)
    out = run_local_baselines(cfg, TINY, small_data, partition_iid(small_data.labels, 3, 0))
    assert len(out) == 3
    assert all(len(curve) == 2 for _, curve in out)
