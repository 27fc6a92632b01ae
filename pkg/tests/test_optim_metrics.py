import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multivit2.errors import DataError, NonFiniteError, ShapeError
from multivit2.metrics import compute_accuracy, compute_auc
from multivit2.optim import AdamW, LRState, OptimizerState, adamw_step, lr_at
from multivit2.rng import derive_seed, seeded

GRADS = [0.5, -1.2, 0.3, 2.0, -0.7, 0.0, 1.1, -0.4, 0.9, -2.5]


def hand_trace(theta, grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8, wd=0.05):
    """Scalar AdamW written out step by step."""
    m = v = 0.0
    out = []
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** k)
        v_hat = v / (1 - b2 ** k)
        theta = theta - lr * (m_hat / (math.sqrt(v_hat) + eps) + wd * theta)
        out.append(theta)
    return out


def test_adamw_examples():
    st0 = OptimizerState.zeros_like([np.ones(3)], lr=0.1, weight_decay=0.0)
    p, st1 = adamw_step([np.ones(3)], [np.zeros(3)], st0)
    np.testing.assert_array_equal(p[0], np.ones(3))
    assert st1.step == st0.step + 1
    st0 = OptimizerState.zeros_like([np.ones(1)], lr=0.1, weight_decay=0.1)
    p, _ = adamw_step([np.ones(1)], [np.zeros(1)], st0)
    assert abs(p[0][0] - 0.99) < 1e-15


def test_adamw_errors():
    st0 = OptimizerState.zeros_like([np.ones(2)])
    with pytest.raises(ShapeError):
        adamw_step([np.ones(2)], [np.ones(3)], st0)
    with pytest.raises(ShapeError):
        adamw_step([np.ones(2), np.ones(2)], [np.ones(2), np.ones(2)], st0)
    with pytest.raises(NonFiniteError, match="step 1"):
        adamw_step([np.ones(2)], [np.array([1.0, np.nan])], st0)


def test_adamw_hand_trace_functional():
    expected = hand_trace(0.8, GRADS)
    params = [np.array([0.8])]
    state = OptimizerState.zeros_like(params, lr=0.01, weight_decay=0.05)
    for g, want in zip(GRADS, expected):
        params, state = adamw_step(params, [np.array([g])], state)
        assert abs(params[0][0] - want) < 1e-10
    assert state.step == 10


def test_adamw_hand_trace_optimizer():
    expected = hand_trace(0.8, GRADS)
    p = torch.nn.Parameter(torch.tensor([0.8], dtype=torch.float64))
    opt = AdamW([p], lr=0.01, weight_decay=0.05)
    for g, want in zip(GRADS, expected):
        p.grad = torch.tensor([g], dtype=torch.float64)
        opt.step()
        assert abs(p.item() - want) < 1e-10


def test_adamw_optimizer_rejects_nonfinite():
    p = torch.nn.Parameter(torch.ones(2))
    opt = AdamW([p])
    p.grad = torch.tensor([1.0, float("inf")])
    with pytest.raises(NonFiniteError):
        opt.step()


def test_lr_examples():
    state = LRState(base_lr=3e-4, warmup_epochs=20)
    assert lr_at(0, None, state)[0] == pytest.approx(1.5e-5, abs=1e-18)
    assert lr_at(19, None, state)[0] == 3e-4


def test_lr_plateau_halves_once():
    state = LRState(base_lr=1.0, warmup_epochs=0, patience=10, factor=0.5)
    lr, state = lr_at(0, 1.0, state)
    lrs = []
    for epoch in range(1, 11):
        lr, state = lr_at(epoch, 1.0, state)
        lrs.append(lr)
    assert lrs[:9] == [1.0] * 9 and lrs[9] == 0.5
    lr, state = lr_at(11, 0.5, state)  # an improvement resets the count
    assert lr == 0.5 and state.bad_epochs == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.floats(1e-5, 1.0),
       st.lists(st.floats(0.0, 10.0), min_size=1, max_size=80))
def test_lr_warmup_endpoint_and_monotone(w, base, losses):
    state = LRState(base_lr=base, warmup_epochs=w, patience=3)
    prev = None
    for epoch in range(w + len(losses)):
        metric = losses[epoch - w] if epoch >= w else None
        lr, state = lr_at(epoch, metric, state)
        assert lr > 0
        if epoch < w:
            assert lr <= base
        if epoch == w - 1:
            assert lr == base
        if epoch >= w:
            assert prev is None or lr <= prev
            prev = lr


def test_accuracy_examples():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    assert compute_accuracy(probs, [0, 1, 0, 1]) == 1.0
    assert compute_accuracy(probs, [1, 0, 1, 0]) == 0.0
    assert compute_accuracy(probs, [0, 1, 1, 1]) == 0.75
    assert compute_accuracy([[0.5, 0.5]], [0]) == 1.0  # ties go to class 0
    with pytest.raises(DataError):
        compute_accuracy(probs, [0, 1])
    with pytest.raises(DataError):
        compute_accuracy(np.zeros((0, 2)), [])


def test_auc_examples():
    assert compute_auc([0.1, 0.9], [0, 1]) == 1.0
    assert compute_auc([0.4] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert compute_auc([0.7, 0.3, 0.9], [0, 1, 1]) == 0.5
    with pytest.raises(DataError):
        compute_auc([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        compute_auc([0.1], [0, 1])


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("ties", [False, True])
def test_auc_equals_quadratic_oracle(ties):
    rng = np.random.default_rng(1 + ties)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 5, n) / 4.0 if ties else rng.random(n)
        assert compute_auc(scores, labels) == brute_auc(scores, labels)


def test_derive_seed_and_seeded():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, k) for k in range(100)}) == 100
    torch.manual_seed(5)
    before = torch.rand(1)
    torch.manual_seed(5)
    with seeded(9):
        a = torch.rand(1)
    with seeded(9):
        assert torch.equal(torch.rand(1), a)
    assert torch.equal(torch.rand(1), before)  # caller's stream untouched
