import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import RingBufferOracle, tensor

from hcl import gradcore as gc
from hcl.contrast import (
    MemoryQueue,
    MomentumPair,
    brute_force_info_nce,
    info_nce_loss,
    key_copy,
    momentum_update,
    similarity,
)
from hcl.gradcore import ShapeError, Tensor


def _unit(rng, *shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_similarity_value():
    a = np.array([1.0, 0.0])
    b = np.array([0.6, 0.8])
    assert similarity(a, b, 0.5) == pytest.approx(math.exp(1.2))
    with pytest.raises(ShapeError):
        similarity(a, np.ones(3), 1.0)
    with pytest.raises(ValueError):
        similarity(a, b, 0.0)


# ---------------------------------------------------------------------------
# queue


def test_queue_fifo_small():
    q = MemoryQueue(3, 1)
    q.push(np.array([[1.0], [2.0]]))
    assert q.contents().ravel().tolist() == [1, 2]
    q.push(np.array([[3.0], [4.0]]))
    assert q.contents().ravel().tolist() == [2, 3, 4]
    assert len(q) == 3


def test_queue_errors():
    q = MemoryQueue(4, 2)
    with pytest.raises(ShapeError):
        q.push(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        q.push(np.zeros((5, 2)))
    with pytest.raises(ValueError):
        MemoryQueue(0, 2)


def test_queue_contents_is_a_copy():
    q = MemoryQueue(2, 1)
    q.push(np.array([[1.0], [2.0]]))
    c = q.contents()
    c[:] = 9
    assert q.contents().ravel().tolist() == [1, 2]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.lists(st.integers(0, 9), max_size=40))
def test_queue_matches_ring_buffer_oracle(capacity, batch_sizes):
    q = MemoryQueue(capacity, 2, dtype=np.float64)
    ref = RingBufferOracle(capacity)
    counter = 0
    for b in batch_sizes:
        b = min(b, capacity)
        batch = np.arange(counter, counter + b, dtype=float).repeat(2).reshape(b, 2)
        counter += b
        q.push(batch)
        ref.push(batch)
        np.testing.assert_array_equal(q.contents(), ref.contents(2))
    rebuilt = MemoryQueue.from_rows(capacity, q.contents(), dtype=np.float64)
    np.testing.assert_array_equal(rebuilt.contents(), q.contents())


# ---------------------------------------------------------------------------
# loss


@pytest.mark.parametrize("T", [0.07, 0.2, 1.0])
def test_loss_matches_brute_force(T):
    rng = np.random.default_rng(int(T * 100))
    for _ in range(50):
        N = int(rng.integers(0, 17))
        d = int(rng.integers(2, 9))
        q, k = _unit(rng, d), _unit(rng, d)
        G = _unit(rng, N, d) if N else np.zeros((0, d))
        got = float(info_nce_loss(q, k, G, T).data)
        assert got == pytest.approx(brute_force_info_nce(q, k, G, T), abs=1e-10)


def test_batched_loss_is_mean_of_rows(rng):
    q, k, G = _unit(rng, 4, 5), _unit(rng, 4, 5), _unit(rng, 6, 5)
    got = float(info_nce_loss(q, k, G, 0.2).data)
    want = np.mean([brute_force_info_nce(q[i], k[i], G, 0.2) for i in range(4)])
    assert got == pytest.approx(want, abs=1e-12)


def test_empty_gallery_and_uniform_similarity(rng):
    q = _unit(rng, 6)
    assert float(info_nce_loss(q, q, MemoryQueue(4, 6, dtype=np.float64), 0.2).data) == 0.0
    G = np.tile(q, (7, 1))
    assert float(info_nce_loss(q, q, G, 0.2).data) == pytest.approx(math.log(8), abs=1e-12)


def test_loss_accepts_queue(rng):
    G = _unit(rng, 5, 3)
    mq = MemoryQueue(8, 3, dtype=np.float64)
    mq.push(G)
    q, k = _unit(rng, 3), _unit(rng, 3)
    assert float(info_nce_loss(q, k, mq, 0.5).data) == pytest.approx(float(info_nce_loss(q, k, G, 0.5).data))


def test_loss_logits_layout(rng):
    q, k, G = _unit(rng, 2, 4), _unit(rng, 2, 4), _unit(rng, 3, 4)
    _, logits = info_nce_loss(q, k, G, 0.5, return_logits=True)
    assert logits.shape == (2, 4)
    np.testing.assert_allclose(logits[:, 0], (q * k).sum(1) / 0.5)
    np.testing.assert_allclose(logits[:, 1:], q @ G.T / 0.5)


def test_loss_rejects_bad_shapes(rng):
    with pytest.raises(ShapeError):
        info_nce_loss(_unit(rng, 3), _unit(rng, 4), None, 0.2)
    with pytest.raises(ShapeError):
        info_nce_loss(_unit(rng, 3), _unit(rng, 3), _unit(rng, 2, 4), 0.2)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    T = [0.07, 0.2, 1.0][seed % 3]
    q, k = tensor(_unit(rng, 3, 6)), tensor(_unit(rng, 3, 6))
    G = _unit(rng, 5, 6)
    errs = gc.gradcheck(lambda q, k: info_nce_loss(q, k, G, T), [q, k], step=1e-6)
    assert max(errs) < 1e-4


def test_gallery_receives_no_gradient(rng):
    q = tensor(_unit(rng, 4))
    G = Tensor(_unit(rng, 3, 4), requires_grad=True)
    with gc.Graph() as g:
        g.backward(info_nce_loss(q, _unit(rng, 4), G, 0.2))
    assert G.grad is None and q.grad is not None


# ---------------------------------------------------------------------------
# momentum encoder


def _params(rng):
    return {"a": Tensor(rng.standard_normal((2, 3)), requires_grad=True), "b": Tensor(rng.standard_normal(4), requires_grad=True)}


def test_momentum_endpoints_exact(rng):
    query = _params(rng)
    key = key_copy(_params(rng))
    before = {k: v.data.copy() for k, v in key.items()}
    momentum_update(query, key, 1.0)
    for k in key:
        assert np.array_equal(key[k].data, before[k])
    momentum_update(query, key, 0.0)
    for k in key:
        assert np.array_equal(key[k].data, query[k].data)
        assert key[k].data is not query[k].data


def test_momentum_interpolates(rng):
    query, key = _params(rng), key_copy(_params(rng))
    want = {k: 0.9 * key[k].data + 0.1 * query[k].data for k in key}
    MomentumPair(query, key, 0.9).update()
    for k in key:
        np.testing.assert_allclose(key[k].data, want[k])
        assert not key[k].requires_grad


def test_momentum_structure_checks(rng):
    query = _params(rng)
    with pytest.raises(ShapeError):
        momentum_update(query, {"a": query["a"]}, 0.5)
    with pytest.raises(ValueError):
        MomentumPair(query, key_copy(query), 1.5)
