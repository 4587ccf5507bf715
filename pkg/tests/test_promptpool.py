import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmfedprompt import numcore as nc
from mmfedprompt.errors import ContractError, DegenerateVectorError
from mmfedprompt.promptpool import (KEY_COLLAPSE, PromptPool, distance, distances, fedavg_pools, regularizer,
                                    renormalize_keys, select_topk, topk_indices)


def oracle_distance(q, k):
    dot = sum(a * b for a, b in zip(q, k))
    return 1.0 - dot / (math.sqrt(sum(a * a for a in q)) * math.sqrt(sum(b * b for b in k)))


def oracle_topk(q, keys, kappa):
    return sorted(range(len(keys)), key=lambda i: (oracle_distance(q, keys[i]), i))[:kappa]


def pool_of(keys, rng, d_model=4):
    return PromptPool(rng.normal(size=(len(keys), 1, d_model)), keys, "inter")


def test_distance_examples(rng):
    q = rng.normal(size=16)
    assert distance(q, q) == pytest.approx(0.0, abs=1e-15)
    assert distance(q, -q) == pytest.approx(2.0)
    k = rng.normal(size=16)
    assert distance(q, k) == pytest.approx(oracle_distance(q, k), abs=1e-12)
    with pytest.raises(DegenerateVectorError):
        distance(np.zeros(16), k)


def test_select_all_is_sorted(rng):
    keys = rng.normal(size=(6, 5))
    q = rng.normal(size=5)
    idx, prompts = select_topk(q, pool_of(keys, rng), 6)
    d = [distance(q, keys[i]) for i in idx]
    assert sorted(idx.tolist()) == list(range(6)) and d == sorted(d)
    assert len(prompts) == 6 and np.array_equal(prompts[0].key, keys[idx[0]])


def test_tie_goes_to_lower_index(rng):
    keys = rng.normal(size=(5, 3))
    keys[3] = keys[1]
    q = keys[1] + 1e-3
    idx, _ = select_topk(q, pool_of(keys, rng), 2)
    assert idx.tolist() == [1, 3]
    idx, _ = select_topk(q, pool_of(keys, rng), 1)
    assert idx.tolist() == [1]


def test_kappa_bounds(rng):
    pool = pool_of(rng.normal(size=(4, 3)), rng)
    with pytest.raises(ContractError):
        select_topk(rng.normal(size=3), pool, 5)
    with pytest.raises(ContractError):
        select_topk(rng.normal(size=3), pool, 0)


def test_topk_matches_sort_oracle_with_ties_and_scale(rng):
    for _ in range(300):
        tau = int(rng.integers(1, 21))
        kappa = int(rng.integers(1, tau + 1))
        keys = rng.normal(size=(tau, 16))
        if tau > 2:
            keys[rng.integers(tau)] = keys[rng.integers(tau)]
        q = rng.normal(size=16)
        want = oracle_topk(q.tolist(), keys.tolist(), kappa)
        for c in (1.0, 0.1, 10.0):
            assert topk_indices((c * q)[None], keys, kappa)[0].tolist() == want


@settings(max_examples=50, deadline=None)
@given(q=arrays(np.float64, 8, elements=st.floats(-1, 1)), c=st.floats(1e-3, 1e3), seed=st.integers(0, 10**6))
def test_selection_is_scale_invariant(q, c, seed):
    if np.linalg.norm(q) < 1e-3:
        return
    keys = np.random.default_rng(seed).normal(size=(20, 8))
    assert np.array_equal(topk_indices(q[None], keys, 5), topk_indices((c * q)[None], keys, 5))


def test_regularizer_examples(rng):
    q = rng.normal(size=6)
    assert regularizer(q, np.stack([q, 2 * q])).item() == pytest.approx(0.0, abs=1e-12)
    q = np.array([1.0, 0.0, 0.0])
    k1, k2 = np.array([[0.0, 1.0, 0.0]]), np.array([[0.0, 0.0, 3.0]])
    assert regularizer(q, [k1, k2]).item() == pytest.approx(2.0)
    keys = rng.normal(size=(4, 6))
    q = rng.normal(size=6)
    assert regularizer(q, keys).item() == pytest.approx(sum(distance(q, k) for k in keys), abs=1e-12)
    assert regularizer(q, keys, raw_cosine=True).item() == pytest.approx(sum(1 - distance(q, k) for k in keys))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_regularizer_nonnegative_and_zero_only_when_collinear(seed):
    r = np.random.default_rng(seed)
    q = r.normal(size=5)
    keys = r.normal(size=(3, 5))
    assert regularizer(q, keys).item() > 0
    assert regularizer(q, q[None] * r.uniform(0.1, 5, (3, 1))).item() == pytest.approx(0.0, abs=1e-12)


def test_regularizer_gradient_only_reaches_selected_keys(rng):
    keys = rng.normal(size=(6, 4))
    q = rng.normal(size=4)
    tape = nc.Tape()
    leaf = tape.leaf(keys)
    idx = topk_indices(q[None], keys, 2)[0]
    g = nc.backward(tape, regularizer(q, nc.gather_rows(leaf, idx)))[leaf]
    unselected = np.setdiff1d(np.arange(6), idx)
    assert np.all(g[unselected] == 0.0) and np.all(np.abs(g[idx]).sum(axis=1) > 0)


def test_batched_distances_match_single(rng):
    qs, keys = rng.normal(size=(3, 5)), rng.normal(size=(7, 5))
    d = distances(qs, keys)
    for b in range(3):
        assert np.allclose(d[b], [oracle_distance(qs[b], k) for k in keys], atol=1e-12)


def test_fedavg_pools_examples(rng):
    p = PromptPool(rng.normal(size=(4, 1, 3)), rng.normal(size=(4, 2)))
    same = fedavg_pools([p, p.copy(), p.copy()])
    assert np.allclose(same.tokens, p.tokens, atol=1e-12) and np.allclose(same.keys, p.keys, atol=1e-12)
    neg = PromptPool(-p.tokens, p.keys)
    assert np.allclose(fedavg_pools([p, neg]).tokens, 0.0)
    pools = [PromptPool(rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 2))) for _ in range(3)]
    avg = fedavg_pools(pools)
    for i, j, k in [(0, 0, 0), (3, 1, 2), (2, 0, 1)]:
        assert abs(avg.tokens[i, j, k] - (pools[0].tokens[i, j, k] + pools[1].tokens[i, j, k]
                                          + pools[2].tokens[i, j, k]) / 3) <= 1e-12
    flipped = fedavg_pools(pools[::-1])
    assert np.allclose(flipped.tokens, avg.tokens, atol=1e-12) and np.allclose(flipped.keys, avg.keys, atol=1e-12)


def test_fedavg_pools_mismatch(rng):
    with pytest.raises(ContractError):
        fedavg_pools([PromptPool(np.zeros((3, 1, 2)), np.ones((3, 2))), PromptPool(np.zeros((4, 1, 2)), np.ones((4, 2)))])


def test_key_collapse_is_repaired():
    keys = np.array([[1e-9, 0.0], [3.0, 4.0]])
    fixed = renormalize_keys(keys, np.random.default_rng(0))
    assert np.linalg.norm(fixed[0]) == pytest.approx(1.0) and np.array_equal(fixed[1], keys[1])
    assert np.linalg.norm(renormalize_keys(keys)[0]) > KEY_COLLAPSE


def test_pool_init(rng):
    p = PromptPool.init(20, 1, 32, 16, "inter", rng)
    assert p.tokens.shape == (20, 1, 32) and p.keys.shape == (20, 16)
    assert np.allclose(np.linalg.norm(p.keys, axis=1), 1.0)
    with pytest.raises(ContractError):
        PromptPool.init(31, rng=rng)
