import math
import warnings

import numpy as np
import pytest
import torch

from msproto.losses import (
    LossWeights,
    cross_entropy_map,
    distance_softmax,
    diversity_loss,
    entropy_loss,
    jeffreys_divergence,
    jeffreys_similarity,
    offclass_l1,
    stage1_loss,
    stage2_loss,
)
from msproto.prototypes import PrototypeBank, assignment_head
from oracles import np_diversity, np_entropy

D = torch.float64


def test_loss_weights_validation():
    LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(lambda_j=-1)


# -- cross entropy ---------------------------------------------------------------------

def test_ce_uniform_two_classes():
    scores = torch.zeros(1, 2, 3, 3, dtype=D)
    labels = torch.randint(0, 2, (1, 3, 3))
    assert abs(float(cross_entropy_map(scores, labels)) - math.log(2)) < 1e-12


def test_ce_confident_goes_to_zero():
    labels = torch.randint(0, 3, (2, 4, 4))
    scores = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).to(D) * 100
    assert float(cross_entropy_map(scores, labels)) < 1e-30


def test_ce_matches_loop(rng):
    scores = rng.normal(size=(2, 4, 3, 5))
    labels = rng.integers(0, 4, size=(2, 3, 5))
    labels[0, 1, 1] = labels[1, 2, 4] = 255
    got = float(cross_entropy_map(torch.as_tensor(scores), torch.as_tensor(labels)))
    terms = []
    for b in range(2):
        for y in range(3):
            for x in range(5):
                if labels[b, y, x] == 255:
                    continue
                s = scores[b, :, y, x]
                terms.append(-(s[labels[b, y, x]] - math.log(sum(math.exp(v) for v in s))))
    assert abs(got - np.mean(terms)) <= 1e-10


def test_ce_all_ignored_warns():
    scores = torch.zeros(1, 2, 2, 2, dtype=D, requires_grad=True)
    with pytest.warns(RuntimeWarning):
        loss = cross_entropy_map(scores, torch.full((1, 2, 2), 255))
    assert loss.item() == 0.0
    loss.backward()


# -- distributions / Jeffreys -----------------------------------------------------------

def test_distance_softmax_examples():
    feat = torch.tensor([[[0.0, math.sqrt(math.log(2))]]], dtype=D)  # d=1, H=1, W=2
    p = distance_softmax(feat, torch.zeros(1, dtype=D), torch.ones(1, 2, dtype=torch.bool))
    assert torch.allclose(p, torch.tensor([1 / 3, 2 / 3], dtype=D), atol=1e-15)
    q = distance_softmax(feat, torch.zeros(1, dtype=D), torch.ones(1, 2, dtype=torch.bool), negate=True)
    assert torch.allclose(q, torch.tensor([2 / 3, 1 / 3], dtype=D), atol=1e-15)
    same = distance_softmax(torch.ones(2, 3, 3, dtype=D), torch.zeros(2, dtype=D), torch.ones(3, 3))
    assert torch.allclose(same, torch.full((9,), 1 / 9, dtype=D))


def test_distance_softmax_masking_and_sum(rng):
    feat = torch.as_tensor(rng.normal(size=(4, 5, 5)))
    mask = rng.random((5, 5)) < 0.5
    mask[0, :2] = True
    p = distance_softmax(feat, torch.as_tensor(rng.normal(size=4)), mask)
    assert len(p) == mask.sum() and abs(float(p.sum()) - 1) <= 1e-9
    one = np.zeros((5, 5), dtype=bool)
    one[2, 2] = True
    assert distance_softmax(feat, torch.zeros(4, dtype=D), one) is None


def test_jeffreys_values():
    u, v = torch.tensor([0.5, 0.5], dtype=D), torch.tensor([0.9, 0.1], dtype=D)
    dj = float(jeffreys_divergence(u, v))
    assert abs(dj - 0.8789) < 1e-4
    exact = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(5) + 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert abs(dj - exact) < 1e-7
    assert float(jeffreys_divergence(u, u)) == 0.0
    assert abs(float(jeffreys_similarity([u, v])) - math.exp(-exact)) < 1e-7
    assert abs(math.exp(-0.8789) - 0.4152) < 1e-4
    with pytest.raises(ValueError):
        jeffreys_divergence(u, torch.ones(3, dtype=D) / 3)


def test_jeffreys_symmetric_nonnegative(rng):
    for _ in range(50):
        n = rng.integers(2, 10)
        u = torch.as_tensor(rng.dirichlet(np.ones(n)))
        v = torch.as_tensor(rng.dirichlet(np.ones(n)))
        a, b = float(jeffreys_divergence(u, v)), float(jeffreys_divergence(v, u))
        assert a == pytest.approx(b, rel=1e-12) and a > 0


def test_similarity_identical_is_one_and_three_way():
    u = torch.tensor([0.2, 0.3, 0.5], dtype=D)
    assert float(jeffreys_similarity([u, u.clone(), u.clone()])) == 1.0
    v = torch.tensor([0.6, 0.3, 0.1], dtype=D)
    a = float(jeffreys_divergence(u, v))
    assert float(jeffreys_similarity([u, u.clone(), v])) == pytest.approx((1 + 2 * math.exp(-a)) / 3, rel=1e-12)
    with pytest.raises(ValueError):
        jeffreys_similarity([u])


# -- diversity loss ----------------------------------------------------------------------

def make_bank(C, S, M, d, seed=0):
    return PrototypeBank(C, S, M, d, generator=torch.Generator().manual_seed(seed), dtype=D)


@pytest.mark.parametrize("negate", [False, True])
def test_diversity_matches_loop_oracle(rng, negate):
    for trial in range(5):
        C, S, M, d = 3, 2, 3, 4
        bank = make_bank(C, S, M, d, seed=trial)
        bank.alive[rng.integers(len(bank))] = False
        feats = rng.normal(size=(2, S, d, 4, 4))
        labels = rng.integers(0, C, size=(2, 4, 4))
        labels[0][labels[0] == 2] = 255
        labels[1, 0, 0] = 255
        got = diversity_loss(torch.as_tensor(feats), bank, torch.as_tensor(labels), negate=negate).item()
        ref = np_diversity(feats, bank.vectors.detach().numpy(), labels, C, S, M,
                           alive=bank.alive.numpy(), negate=negate)
        assert abs(got - ref) <= 1e-10


def test_diversity_identical_prototypes_max_penalty(rng):
    bank = make_bank(1, 1, 3, 2)
    with torch.no_grad():
        bank.vectors[:] = bank.vectors[0]
    feats = torch.as_tensor(rng.normal(size=(1, 1, 2, 3, 3)))
    loss = diversity_loss(feats, bank, torch.zeros(1, 3, 3, dtype=torch.long))
    assert loss.item() == pytest.approx(1.0, abs=1e-12)


def test_diversity_hand_computation():
    # one class, S=1, M=2, two positions; distances (0, 1) and (1, 0)
    bank = make_bank(1, 1, 2, 1)
    with torch.no_grad():
        bank.vectors[:, 0] = torch.tensor([0.0, 1.0], dtype=D)
    feats = torch.tensor([0.0, 1.0], dtype=D).reshape(1, 1, 1, 1, 2)
    loss = diversity_loss(feats, bank, torch.zeros(1, 1, 2, dtype=torch.long), smoothing=0.0).item()
    a = 1 / (1 + math.e)  # softmax(0, 1)[0]
    u, v = (a, 1 - a), (1 - a, a)
    dj = sum((x - y) * (math.log(x) - math.log(y)) for x, y in zip(u, v))
    assert loss == pytest.approx(math.exp(-dj), abs=1e-12)


def test_diversity_skips_small_cells(rng):
    bank = make_bank(2, 1, 2, 2)
    feats = torch.as_tensor(rng.normal(size=(1, 1, 2, 3, 3)))
    labels = torch.full((1, 3, 3), 255, dtype=torch.long)
    labels[0, 0, 0] = 1  # class 1 has a single position, class 0 none
    assert diversity_loss(feats, bank, labels).item() == 0.0
    bank.alive[[0]] = False
    labels[:] = 0
    assert diversity_loss(feats, bank, labels).item() == 0.0


def test_diversity_bounds_and_permutation_invariance(rng):
    for trial in range(10):
        bank = make_bank(2, 2, 3, 3, seed=trial)
        feats = torch.as_tensor(rng.normal(size=(2, 2, 3, 4, 4)))
        labels = torch.as_tensor(rng.integers(0, 2, size=(2, 4, 4)))
        base = diversity_loss(feats, bank, labels).item()
        assert 0.0 <= base <= 1.0
        perm = bank.cell_indices(1, 0)
        with torch.no_grad():
            bank.vectors[perm] = bank.vectors[perm.flip(0)].clone()
        assert diversity_loss(feats, bank, labels).item() == pytest.approx(base, abs=1e-13)


def test_diversity_finite_gradients_with_dead_rows(rng):
    bank = make_bank(2, 2, 2, 3)
    bank.alive[1] = False
    feats = torch.as_tensor(rng.normal(size=(1, 2, 3, 3, 3)), dtype=D).requires_grad_()
    labels = torch.zeros(1, 3, 3, dtype=torch.long)
    diversity_loss(feats, bank, labels).backward()
    assert torch.isfinite(feats.grad).all() and torch.isfinite(bank.vectors.grad).all()


# -- entropy / l1 / composites ----------------------------------------------------------------

def test_entropy_values():
    assert float(entropy_loss(torch.eye(4, dtype=D)[None, :3])) == 0.0
    uni = torch.full((3, 3, 12), 1 / 12, dtype=D)
    assert abs(float(entropy_loss(uni)) - math.log(12)) <= 1e-9
    half = torch.zeros(1, 1, 6, dtype=D)
    half[0, 0, :2] = 0.5
    assert abs(float(entropy_loss(half)) - math.log(2)) < 1e-15


def test_entropy_matches_loop(rng):
    for _ in range(20):
        w = rng.dirichlet(np.ones(8) * 0.3, size=(2, 3))
        w[w < 0.05] = 0
        assert float(entropy_loss(torch.as_tensor(w))) == pytest.approx(np_entropy(w), abs=1e-12)


def test_entropy_gradient_finite_at_zero():
    w = torch.tensor([[[0.5, 0.5, 0.0]]], dtype=D, requires_grad=True)
    entropy_loss(w).backward()
    assert torch.isfinite(w.grad).all()


def test_entropy_decreases_uniform_to_one_hot():
    uni = torch.full((1, 1, 6), 1 / 6, dtype=D)
    hot = torch.zeros(1, 1, 6, dtype=D)
    hot[0, 0, 2] = 1
    vals = [float(entropy_loss((1 - t) * uni + t * hot)) for t in np.linspace(0, 1, 21)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_offclass_l1():
    owner = torch.arange(6) // 3
    head = assignment_head(owner, 2, D)
    assert float(offclass_l1(head, owner)) == 3.0
    head2 = head.clone()
    head2[0, 0] = 42.0
    assert float(offclass_l1(head2, owner)) == 3.0
    head2[head2 < 0] = 0
    assert float(offclass_l1(head2, owner)) == 0.0


def test_composites():
    assert stage1_loss(1.0, 0.4, 0.25) == pytest.approx(1.1)
    assert stage2_loss(1.0, 2.0, 3.0, 0.05, 1e-3) == pytest.approx(1.103)
    assert stage1_loss(0.7, 5.0, 0.0) == 0.7
    assert stage2_loss(0.7, 5.0, 9.0, 0.0, 0.0) == 0.7
    assert stage1_loss(1.0, 0.4, 0.25, 3.0, 1e-4) == pytest.approx(1.1003)


def test_no_warnings_in_normal_ce():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cross_entropy_map(torch.zeros(1, 2, 2, 2, dtype=D), torch.zeros(1, 2, 2, dtype=torch.long))
