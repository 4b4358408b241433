import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from corewrite.contrastive import (
    ContrastiveConfig,
    combine,
    contrastive_total,
    cosine_sim,
    external_loss,
    in_batch_loss,
    internal_loss,
)

ORTHO = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]


def t64(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


def test_cosine_examples():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2))


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_sim([1, 0, 0], [1, 0])


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(weight=-1.0)
    assert ContrastiveConfig().temperature == 0.1


def test_combine_interleaves():
    a, b = t64([[1, 1], [2, 2]]), t64([[3, 3], [4, 4]])
    assert combine(a, b).tolist() == [[1, 1], [3, 3], [2, 2], [4, 4]]
    assert combine(a[:1], b[:1]).tolist() == [[1, 1], [3, 3]]
    c = combine(a, a)
    assert torch.equal(c[0::2], c[1::2])


@pytest.mark.parametrize("n", range(1, 9))
def test_combine_rows_exhaustive(n):
    a, b = torch.randn(n, 3), torch.randn(n, 3)
    c = combine(a, b)
    for k in range(n):
        assert torch.equal(c[2 * k], a[k]) and torch.equal(c[2 * k + 1], b[k])


def test_combine_shape_mismatch():
    with pytest.raises(ValueError):
        combine(torch.ones(2, 3), torch.ones(3, 3))


def test_orthogonal_fixture():
    assert in_batch_loss(t64(ORTHO), 1.0).item() == pytest.approx(0.55145, abs=1e-4)
    ell = math.e / (math.e + 2.0)
    assert in_batch_loss(t64(ORTHO), 1.0).item() == pytest.approx(-math.log(ell), abs=1e-12)
    q1, q2 = t64([[1, 0], [0, 1]]), t64([[1, 0], [0, 1]])
    assert internal_loss(q1, q2, 1.0).item() == pytest.approx(0.55145, abs=1e-4)


def test_single_pair_is_zero():
    assert in_batch_loss(t64([[1, 2], [3, -1]]), 0.5).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("x", [[[1.0, 0.0]], [[1.0, 0.0]] * 3, [[1.0, math.nan], [1.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]])
def test_in_batch_loss_rejects(x):
    with pytest.raises(ValueError):
        in_batch_loss(t64(x), 1.0)


def test_in_batch_loss_rejects_bad_tau():
    with pytest.raises(ValueError):
        in_batch_loss(t64(ORTHO), 0.0)


def test_avg_of_orthogonal_pair():
    q1, q2 = t64([[1, 0], [0, 1]]), t64([[0, 1], [1, 0]])
    t = t64([[0.5, 0.5], [1, 1]])
    # both averages are (0.5, 0.5) and both targets point the same way
    assert external_loss(q1, q2, t, 1.0).item() == pytest.approx(oracles.external_loss(q1, q2, t, 1.0), abs=1e-12)
    assert external_loss(q1, q2, t, 1.0).item() == pytest.approx(math.log(3), abs=1e-12)


def test_oracle_equivalence_on_200_random_batches():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        tau = float(rng.uniform(0.05, 2.0))
        q1, q2, t = (rng.normal(size=(n, m)) for _ in range(3))
        x = np.concatenate([q1, q2])
        assert in_batch_loss(t64(x), tau).item() == pytest.approx(oracles.in_batch_loss(x, tau), abs=1e-6)
        assert internal_loss(t64(q1), t64(q2), tau).item() == pytest.approx(
            oracles.internal_loss(q1, q2, tau), abs=1e-6)
        assert external_loss(t64(q1), t64(q2), t64(t), tau).item() == pytest.approx(
            oracles.external_loss(q1, q2, t, tau), abs=1e-6)


def test_total_is_sum_of_parts():
    rng = np.random.default_rng(5)
    q1, q2, t = (t64(rng.normal(size=(4, 5))) for _ in range(3))
    total = contrastive_total(q1, q2, t, 0.1).item()
    assert total == pytest.approx(internal_loss(q1, q2, 0.1).item() + external_loss(q1, q2, t, 0.1).item(), abs=1e-9)


def test_external_shape_mismatch():
    with pytest.raises(ValueError):
        external_loss(torch.ones(2, 3), torch.ones(2, 3), torch.ones(2, 4), 0.1)


batches = st.integers(1, 6).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda m: st.lists(st.lists(st.floats(-3, 3, allow_nan=False), min_size=m, max_size=m),
                           min_size=2 * n, max_size=2 * n)))


def nonzero_rows(x):
    return all(any(abs(v) > 1e-3 for v in row) for row in x)


@settings(max_examples=60, deadline=None)
@given(batches.filter(nonzero_rows), st.floats(0.05, 2.0))
def test_symmetric_under_pair_member_swap(x, tau):
    x = t64(x)
    swapped = x.clone()
    swapped[0::2], swapped[1::2] = x[1::2], x[0::2]
    assert in_batch_loss(x, tau).item() == pytest.approx(in_batch_loss(swapped, tau).item(), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(batches.filter(nonzero_rows), st.floats(0.05, 2.0), st.data())
def test_invariant_to_positive_row_scaling(x, tau, data):
    x = t64(x)
    scale = t64(data.draw(st.lists(st.floats(0.1, 10.0), min_size=len(x), max_size=len(x)))).unsqueeze(1)
    assert in_batch_loss(x, tau).item() == pytest.approx(in_batch_loss(x * scale, tau).item(), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(batches.filter(nonzero_rows), st.floats(0.05, 2.0), st.randoms())
def test_invariant_to_reordering_pairs(x, tau, rnd):
    x = t64(x)
    order = list(range(len(x) // 2))
    rnd.shuffle(order)
    perm = [r for k in order for r in (2 * k, 2 * k + 1)]
    assert in_batch_loss(x, tau).item() == pytest.approx(in_batch_loss(x[perm], tau).item(), abs=1e-9)


def test_identical_rows_loss():
    # every similarity is 1, so each ell = 1 / (2N - 1)
    for n in (1, 2, 5):
        x = torch.ones(2 * n, 3, dtype=torch.float64)
        assert in_batch_loss(x, 0.3).item() == pytest.approx(math.log(2 * n - 1), abs=1e-12)


def test_decreases_when_positive_similarity_grows():
    # rows 2 and 3 are orthogonal to the plane of rows 0 and 1, so rotating
    # row 1 toward row 0 changes only the first positive similarity
    def batch(theta):
        return t64([[1, 0, 0, 0], [math.cos(theta), math.sin(theta), 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    losses = [in_batch_loss(batch(th), 0.5).item() for th in (1.5, 1.2, 0.8, 0.4, 0.1)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_internal_loss_with_equal_views_matches_oracle():
    torch.manual_seed(0)
    q = torch.randn(4, 6, dtype=torch.float64)
    assert internal_loss(q, q, 0.1).item() == pytest.approx(oracles.internal_loss(q.numpy(), q.numpy(), 0.1), abs=1e-9)


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("which", ["internal_q1", "internal_q2", "external_q1", "external_t"])
def test_gradients_match_finite_differences(which):
    rng = np.random.default_rng({"internal_q1": 1, "internal_q2": 2, "external_q1": 3, "external_t": 4}[which])
    q1, q2, t = (rng.normal(size=(3, 5)) for _ in range(3))
    tau = 0.5

    def f(arr):
        a, b, c = q1, q2, t
        if which.endswith("q1"):
            a = arr
        elif which.endswith("q2"):
            b = arr
        else:
            c = arr
        if which.startswith("internal"):
            return oracles.internal_loss(a, b, tau)
        return oracles.external_loss(a, b, c, tau)

    target = {"q1": q1, "q2": q2, "t": t}[which.split("_")[1]]
    x = t64(target).requires_grad_(True)
    args = {"q1": t64(q1), "q2": t64(q2), "t": t64(t)}
    args[which.split("_")[1]] = x
    if which.startswith("internal"):
        loss = internal_loss(args["q1"], args["q2"], tau)
    else:
        loss = external_loss(args["q1"], args["q2"], args["t"], tau)
    loss.backward()
    numeric = oracles.central_diff(f, target)
    assert _rel_err(x.grad.numpy(), numeric) <= 1e-4
