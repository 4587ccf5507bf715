import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfedprompt.errors import ConfigError, ContractError
from mmfedprompt.synthdata import (ScenarioSpec, TestScenario, TrainScenario, apply_missing, build_benchmark,
                                   dump_csv, generate, load_csv, make_test, nearest_mean_accuracy, partition)


@pytest.fixture(scope="module")
def pool():
    return generate(8, 50, seed=3)


def count_patterns(samples):
    pats = [s.present for s in samples]
    return {p: pats.count(p) for p in [(True, True), (True, False), (False, True)]}


def test_generate_counts():
    samples = generate(8, 250)
    assert len(samples) == 2000
    assert np.array_equal(np.bincount([s.label for s in samples]), [250] * 8)
    assert samples[0].modality_a.shape == (4, 16)


def test_noiseless_nearest_mean_is_perfect():
    samples = generate(8, 20, seed=1, sigma=0.0)
    assert nearest_mean_accuracy(samples, samples) == 1.0


def test_both_modalities_beat_either_alone():
    samples = generate(8, 250, seed=0)
    train, test = samples[:1600], samples[1600:]
    both = nearest_mean_accuracy(train, test)
    a_only = nearest_mean_accuracy(train, test, use=(True, False))
    b_only = nearest_mean_accuracy(train, test, use=(False, True))
    assert both > a_only and both > b_only


def test_miss_both_counts(pool):
    out = apply_missing(pool[:100], TrainScenario.MISS_BOTH, 0.7, seed=0)
    assert count_patterns(out) == {(True, True): 30, (True, False): 35, (False, True): 35}


def test_miss_text_counts(pool):
    out = apply_missing(pool[:100], TrainScenario.MISS_TEXT, 0.7, seed=0)
    assert count_patterns(out) == {(True, True): 30, (True, False): 70, (False, True): 0}


def test_zero_rate_keeps_everything(pool):
    out = apply_missing(pool, TrainScenario.MISS_BOTH, 0.0, seed=0)
    assert all(s.present == (True, True) for s in out)


def test_dropped_block_is_zero(pool):
    out = apply_missing(pool, TrainScenario.MISS_IMAGE, 0.5, seed=2)
    for s in out:
        if not s.present[0]:
            assert not s.modality_a.any()


def test_apply_missing_needs_complete_input(pool):
    once = apply_missing(pool, TrainScenario.MISS_TEXT, 0.5, seed=0)
    with pytest.raises(ContractError):
        apply_missing(once, TrainScenario.MISS_TEXT, 0.5, seed=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 120), eta=st.floats(0, 1), seed=st.integers(0, 2**32 - 1),
       scenario=st.sampled_from(list(TrainScenario)))
def test_missing_counts_are_exact_floors(n, eta, seed, scenario):
    samples = generate(2, 60, d_raw=2, seed=0, t_a=1, t_b=1)[:n]
    out = apply_missing(samples, scenario, eta, seed)
    c = count_patterns(out)
    assert sum(c.values()) == n  # never both missing
    if scenario is TrainScenario.MISS_BOTH:
        k = int(np.floor(eta * n / 2))
        assert c[(True, False)] == k and c[(False, True)] == k
    else:
        k = int(np.floor(eta * n))
        missing = c[(True, False)] if scenario is TrainScenario.MISS_TEXT else c[(False, True)]
        assert missing == k


def test_test_scenarios(pool):
    assert all(s.present == (True, True) for s in make_test(pool, TestScenario.FULL_MODAL, 0.7, 0))
    assert all(s.present == (False, True) for s in make_test(pool, TestScenario.TEXT_ONLY, 0.7, 0))
    assert all(s.present == (True, False) for s in make_test(pool, TestScenario.IMAGE_ONLY, 0.7, 0))


def test_sim_train_matches_miss_both_counts(pool):
    sim = make_test(pool, TestScenario.SIM_TRAIN, 0.7, 5, TrainScenario.MISS_BOTH)
    both = make_test(pool, TestScenario.MISS_BOTH, 0.7, 5)
    assert count_patterns(sim) == count_patterns(both)


def test_uniform_partition(pool):
    samples = generate(8, 250)
    parts = partition(samples, 20)
    assert [len(p) for p in parts] == [100] * 20
    assert len(partition(samples, 1)[0]) == 2000


@settings(max_examples=20, deadline=None)
@given(n_clients=st.integers(1, 30), seed=st.integers(0, 1000), mode=st.sampled_from(["uniform", "dirichlet"]))
def test_partition_is_disjoint_cover(pool, n_clients, seed, mode):
    parts = partition(pool, n_clients, mode=mode, seed=seed, alpha=0.5)
    ids = sorted(id(s) for p in parts for s in p.samples)
    assert ids == sorted(id(s) for s in pool)
    assert all(len(p) > 0 for p in parts)


def test_dirichlet_skew():
    samples = generate(8, 100, seed=0)
    shares = []
    for seed in range(10):
        for p in partition(samples, 8, mode="dirichlet", seed=seed, alpha=0.1):
            shares.append(np.bincount(p.labels(), minlength=8).max() / len(p))
    assert np.mean(shares) >= 0.5


def test_partition_errors(pool):
    with pytest.raises(ConfigError):
        partition(pool[:3], 4)
    with pytest.raises(ConfigError):
        partition(pool, 2, mode="zipf")


def test_same_seed_same_bytes():
    spec = ScenarioSpec(eta=0.5, seed=9)
    a, b = build_benchmark(spec, n_train=200, n_test=50), build_benchmark(spec, n_train=200, n_test=50)
    flat = lambda bm: b"".join(s.modality_a.tobytes() + s.modality_b.tobytes() + bytes(s.present)  # noqa: E731
                               for c in bm.clients for s in c.samples)
    assert flat(a) == flat(b)


def test_scenario_validation():
    with pytest.raises(ConfigError):
        ScenarioSpec(eta=1.5)
    with pytest.raises(ConfigError):
        ScenarioSpec(n_clients=0)
    with pytest.raises(ValueError):
        ScenarioSpec(train_scenario="miss-audio")


def test_csv_round_trip(tmp_path):
    bm = build_benchmark(ScenarioSpec(n_clients=3, seed=1), n_train=60, n_test=10)
    path = tmp_path / "data.csv"
    dump_csv(path, bm.clients)
    back = load_csv(path)
    assert [c.client_id for c in back] == [0, 1, 2]
    for c0, c1 in zip(bm.clients, back):
        for s0, s1 in zip(c0.samples, c1.samples):
            assert np.array_equal(s0.modality_a, s1.modality_a) and np.array_equal(s0.modality_b, s1.modality_b)
            assert s0.present == s1.present and s0.label == s1.label
