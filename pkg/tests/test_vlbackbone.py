import numpy as np
import pytest

from conftest import central_diff, rel_err
from mmfedprompt import numcore as nc
from mmfedprompt.errors import DimensionError
from mmfedprompt.synthdata import Sample, generate
from mmfedprompt.vlbackbone import (PATTERN_COMPLETE, PATTERN_IMAGE_MISSING, PATTERN_TEXT_MISSING, BackboneParams,
                                    HeadParams, cross_entropy, forward, query, task_loss, tokenize, tokenize_batch)


@pytest.fixture(scope="module")
def bb():
    return BackboneParams.init(seed=0)


@pytest.fixture(scope="module")
def samples():
    return generate(8, 4, seed=0)


def head_dict(h):
    return {n: getattr(h, n) for n in HeadParams.NAMES}


def test_tokenize_shape(bb, samples):
    tokens, code = tokenize(samples[0], bb)
    assert tokens.shape == (8, 32) and code == PATTERN_COMPLETE
    assert tokenize(samples[0].drop(1), bb)[1] == PATTERN_TEXT_MISSING
    assert tokenize(samples[0].drop(0), bb)[1] == PATTERN_IMAGE_MISSING


def test_zero_head_gives_uniform_softmax(bb, samples, rng):
    tokens, _ = tokenize(samples[0], bb)
    h = HeadParams.zeros(32, 8)
    h.cls_b = np.full(8, 0.3)
    logits = forward(tokens, np.zeros((10, 32)), head_dict(h), bb).data
    assert np.allclose(logits, 0.3)


def test_output_shape_with_ten_prompts(bb, samples, rng):
    tokens, _ = tokenize(samples[0], bb)
    out = forward(tokens, rng.normal(0, 0.02, (10, 32)), head_dict(HeadParams.init()), bb)
    assert out.shape == (8,)


def test_width_mismatch(bb, samples):
    tokens, _ = tokenize(samples[0], bb)
    with pytest.raises(DimensionError):
        forward(tokens, np.zeros((2, 31)), head_dict(HeadParams.init()), bb)


def test_task_loss_examples():
    assert task_loss(np.zeros(8), 3).item() == pytest.approx(np.log(8), abs=1e-12)
    logits = np.zeros(8)
    logits[2] = 10.0 + np.log(8)
    assert task_loss(logits, 2).item() < 1e-3


def test_cross_entropy_matches_direct(rng):
    logits = rng.normal(size=(5, 8))
    labels = rng.integers(0, 8, 5)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(cross_entropy(logits, labels).data, -np.log(p[np.arange(5), labels]), atol=1e-12)


def test_prompt_and_head_gradients(bb, samples, rng):
    tokens, _ = tokenize(samples[1], bb)
    prompts = rng.normal(0, 0.3, (4, 32))
    head = HeadParams.init(seed=2)
    head.cls_w = rng.normal(size=head.cls_w.shape)
    label = samples[1].label

    def loss_with(p=prompts, **over):
        h = head_dict(head) | over
        return task_loss(forward(tokens, p, h, bb), label).item()

    tape = nc.Tape()
    p_leaf = tape.leaf(prompts)
    leaves = head.leaves(tape)
    loss = task_loss(forward(tokens, p_leaf, leaves, bb), label)
    grads = nc.backward(tape, loss)
    assert rel_err(grads[p_leaf], central_diff(lambda x: loss_with(p=x), prompts)) <= 1e-4
    for n in ("cls_w", "pooler_b"):
        fd = central_diff(lambda x, n=n: loss_with(**{n: x}), getattr(head, n))
        assert rel_err(grads[leaves[n]], fd) <= 1e-4


def test_only_prompts_and_head_get_gradient(bb, samples, rng):
    tokens, _ = tokenize(samples[0], bb)
    tape = nc.Tape()
    p = tape.leaf(rng.normal(0, 0.02, (3, 32)))
    leaves = HeadParams.init().leaves(tape)
    grads = nc.backward(tape, task_loss(forward(tokens, p, leaves, bb), 0))
    assert set(grads) == {p, *leaves.values()}


def test_prompt_order_invariance(bb, samples, rng):
    tokens, _ = tokenize(samples[0], bb)
    prompts = rng.normal(0, 0.5, (6, 32))
    h = head_dict(HeadParams.init())
    a = forward(tokens, prompts, h, bb).data
    b = forward(tokens, prompts[rng.permutation(6)], h, bb).data
    assert np.allclose(a, b, atol=1e-12)


def test_batched_forward_matches_single(bb, samples, rng):
    tokens, _, _ = tokenize_batch(samples[:5], bb)
    prompts = rng.normal(0, 0.1, (5, 3, 32))
    h = head_dict(HeadParams.init())
    batch = forward(tokens, prompts, h, bb).data
    for i in range(5):
        assert np.allclose(batch[i], forward(tokens[i], prompts[i], h, bb).data, atol=1e-12)


def test_backbone_is_frozen(bb):
    before = bb.fingerprint()
    with pytest.raises(ValueError):
        bb.w_q[0, 0] = 1.0
    assert bb.fingerprint() == before == BackboneParams.init(seed=0).fingerprint()


def test_query_examples(bb, samples):
    s = samples[0]
    t, c = tokenize(s, bb)
    assert np.array_equal(query(t, c, bb), query(t, c, bb))
    assert query(t, c, bb).shape == (16,)
    # same tokens, different pattern bits
    assert not np.allclose(query(t, PATTERN_COMPLETE, bb), query(t, PATTERN_TEXT_MISSING, bb))


def test_query_identity_projection_reproduces_mean(samples):
    base = BackboneParams.init(d_model=4, d_q=6, d_raw=16)
    proj = np.eye(6)
    bb = BackboneParams(**{f: getattr(base, f) for f in base.__dataclass_fields__} | {"query_proj": proj})
    tokens = np.arange(32.0).reshape(8, 4)
    q = query(tokens, PATTERN_TEXT_MISSING, bb, t_a=4)
    assert np.allclose(q[:4], tokens[:4].mean(axis=0))
    assert np.array_equal(q[4:], [1.0, 0.0])
    q = query(tokens, PATTERN_COMPLETE, bb, t_a=4)
    assert np.allclose(q[:4], tokens.mean(axis=0)) and np.array_equal(q[4:], [0.0, 0.0])


def test_sample_needs_a_modality():
    with pytest.raises(Exception):
        Sample(np.zeros((4, 16)), np.zeros((4, 16)), (False, False), 0)
