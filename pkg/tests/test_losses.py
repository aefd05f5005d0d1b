import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dirpose.errors import DegenerateDirection, UsageError
from dirpose.losses import (
    LossWeights,
    combined_loss,
    combined_loss_grad,
    direction_loss,
    distribution_loss,
    rotation_loss,
    spread_loss,
)
from dirpose.sphere_grid import (
    GridSpec,
    RawGrid,
    SphericalDistribution,
    expectation,
    inverse_softplus,
    normalize,
    vmf_target,
    vmf_weights,
)

seeds = st.integers(0, 2**32 - 1)


def unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def fd_relative_error(values, target, spec, weights, activation, cells, h=1e-4):
    """Vector relative error between analytic and central-difference gradients on ``cells``."""
    grad = combined_loss_grad(RawGrid(spec, values), target, weights, activation)
    fd = []
    for i, j in cells:
        up, dn = values.copy(), values.copy()
        up[i, j] += h
        dn[i, j] -= h
        lp = combined_loss(RawGrid(spec, up), target, weights, activation).total
        lm = combined_loss(RawGrid(spec, dn), target, weights, activation).total
        fd.append((lp - lm) / (2 * h))
    fd = np.array(fd)
    an = np.array([grad[i, j] for i, j in cells])
    return np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12)


# -- individual terms ----------------------------------------------------------------


def test_direction_loss_examples():
    assert direction_loss([0, 0, 1], [0, 0, 1]) == -1.0
    assert direction_loss([0, 0, 1], [0, 0, -1]) == 1.0
    assert direction_loss([1, 0, 0], [1, 1, 0]) == pytest.approx(-math.sqrt(2) / 2, abs=1e-15)
    with pytest.raises(DegenerateDirection):
        direction_loss([0, 0, 0], [0, 0, 1])


@given(seeds, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_direction_loss_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=3), rng.normal(size=3)
    assert direction_loss(a * p, b * q) == pytest.approx(direction_loss(p, q), abs=1e-12)


def test_distribution_loss_examples():
    spec = GridSpec(2, 2)
    p1 = SphericalDistribution.from_weights(spec, [[1.0, 2.0], [3.0, 4.0]])
    p2 = SphericalDistribution.from_weights(spec, [[4.0, 1.0], [1.0, 1.0]])
    assert distribution_loss(p1, p1) == 0.0
    s = math.sin(math.pi / 4)  # both rows of a 2-row grid
    a = [1 / (10 * s), 2 / (10 * s), 3 / (10 * s), 4 / (10 * s)]
    b = [4 / (7 * s), 1 / (7 * s), 1 / (7 * s), 1 / (7 * s)]
    hand = sum((x - y) ** 2 * s for x, y in zip(a, b)) / 4
    assert distribution_loss(p1, p2) == pytest.approx(hand, rel=1e-13)


def test_distribution_loss_rejects_mismatched_grids():
    with pytest.raises(UsageError):
        distribution_loss(SphericalDistribution.uniform(GridSpec(4, 4)), SphericalDistribution.uniform(GridSpec(4, 8)))


@given(seeds)
def test_distribution_loss_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(5, 6)
    p = SphericalDistribution.from_weights(spec, rng.uniform(0, 1, spec.shape))
    q = SphericalDistribution.from_weights(spec, rng.uniform(0, 1, spec.shape))
    d = distribution_loss(p, q)
    assert d == distribution_loss(q, p)
    assert d > 0


def test_spread_loss_examples():
    assert spread_loss([0.0, 0.6, 0.8]) == pytest.approx(0.0, abs=1e-15)
    assert spread_loss([0.0, 0.0, 0.0]) == 1.0
    e = expectation(vmf_target(GridSpec(64, 64), [0, 0, 1], 10.0))
    assert spread_loss(e) == pytest.approx(1 - (1 / math.tanh(10) - 0.1), abs=5e-3)


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(8e7, 0.1)
    with pytest.raises(UsageError):
        LossWeights(-1.0, 0.1)
    with pytest.raises(UsageError):
        LossWeights(1.0, float("nan"))


# -- combined loss -------------------------------------------------------------------


def test_self_comparison():
    spec = GridSpec(32, 32)
    mu = [0.3, 0.4, -0.5]
    target = vmf_target(spec, mu, 10.0)
    raw = RawGrid(spec, inverse_softplus(target.probs))
    out = combined_loss(raw, target)
    assert out.direction == pytest.approx(-1.0, abs=1e-12)
    assert out.distribution == pytest.approx(0.0, abs=1e-24)
    assert out.spread == pytest.approx(1 - np.linalg.norm(expectation(target)), abs=1e-12)


def test_constant_grid_hits_the_degenerate_guard():
    spec = GridSpec(16, 16)
    target = vmf_target(spec, [0, 0, 1], 10.0)
    raw = RawGrid(spec, np.zeros(spec.shape))
    with pytest.raises(DegenerateDirection):
        combined_loss(raw, target)
    with pytest.raises(DegenerateDirection):
        combined_loss_grad(raw, target)
    skipped = combined_loss(raw, target, degenerate="skip")
    assert skipped.direction == 0.0
    assert skipped.spread == 1.0
    assert skipped.distribution > 0


def test_softplus_inverse_of_unnormalized_vmf():
    # softplus(u) = exp(kappa mu . rho) cellwise; normalization then reproduces the target.
    spec = GridSpec(64, 64)
    mu = np.array([0.0, 0.0, 1.0])
    target = vmf_target(spec, mu, 10.0)
    raw = RawGrid(spec, inverse_softplus(np.exp(10.0 * (spec.directions @ mu))))
    assert combined_loss(raw, target).distribution < 1e-6
    np.testing.assert_allclose(normalize(raw).probs, target.probs, rtol=1e-9)


def test_mismatched_specs():
    with pytest.raises(UsageError):
        combined_loss(RawGrid(GridSpec(4, 4), np.zeros((4, 4))), vmf_target(GridSpec(4, 8), [0, 0, 1], 1.0))


@given(seeds, st.sampled_from(["softplus", "exp"]))
def test_breakdown_recomposes(seed, activation):
    rng = np.random.default_rng(seed)
    spec = GridSpec(8, 8)
    w = LossWeights(rng.uniform(0, 1e4), rng.uniform(0, 1))
    out = combined_loss(RawGrid(spec, rng.normal(size=spec.shape)), vmf_target(spec, unit(rng), 5.0), w, activation, "skip")
    assert out.total == pytest.approx(out.direction + w.lambda_d * out.distribution + w.lambda_sigma * out.spread, abs=1e-9)
    assert set(out.to_dict()) == {"direction", "distribution", "spread", "total"}


# -- gradients -------------------------------------------------------------------------


@pytest.mark.parametrize("activation", ["softplus", "exp"])
def test_gradient_matches_finite_differences(activation):
    rng = np.random.default_rng(21)
    spec = GridSpec(64, 64)
    for _ in range(5):
        values = rng.normal(size=spec.shape)
        target = vmf_target(spec, unit(rng), 10.0)
        cells = list(zip(rng.integers(0, 64, 20), rng.integers(0, 64, 20)))
        assert fd_relative_error(values, target, spec, LossWeights(), activation, cells) < 1e-4


def test_gradient_vanishes_at_the_target():
    # The spread term keeps pulling toward a sharper grid, so switch it off.
    spec = GridSpec(32, 32)
    target = vmf_target(spec, [0.1, -0.7, 0.7], 10.0)
    u = np.log(target.probs) + 3.0
    w = LossWeights(8e7, 0.0)
    g = combined_loss_grad(RawGrid(spec, u), target, w, "exp")
    g = g - g.mean()  # drop the normalization-invariant all-ones component
    assert np.abs(g).max() / np.abs(u).max() < 1e-6


def test_exp_shift_invariance():
    rng = np.random.default_rng(4)
    spec = GridSpec(16, 16)
    target = vmf_target(spec, unit(rng), 10.0)
    u = rng.normal(size=spec.shape)
    base = combined_loss(RawGrid(spec, u), target, activation="exp")
    shifted = combined_loss(RawGrid(spec, u + 5.0), target, activation="exp")
    assert shifted.total == pytest.approx(base.total, rel=1e-12)
    g = combined_loss_grad(RawGrid(spec, u), target, activation="exp")
    assert abs(g.sum()) <= 1e-8 * max(1.0, np.abs(g).sum())


@given(seeds, st.sampled_from(["softplus", "exp"]))
def test_small_step_along_negative_gradient_decreases_loss(seed, activation):
    rng = np.random.default_rng(seed)
    spec = GridSpec(12, 12)
    target = vmf_target(spec, unit(rng), 10.0)
    u = rng.normal(size=spec.shape)
    w = LossWeights()
    g = combined_loss_grad(RawGrid(spec, u), target, w, activation)
    if np.linalg.norm(g) <= 1e-8:
        return
    before = combined_loss(RawGrid(spec, u), target, w, activation).total
    eta = 1e-3 / np.linalg.norm(g)
    after = combined_loss(RawGrid(spec, u - eta * g), target, w, activation).total
    assert after < before


# -- rotation loss -------------------------------------------------------------------


def test_rotation_loss_matched_and_permuted():
    spec = GridSpec(32, 32)
    cols = np.eye(3)
    targets = [vmf_target(spec, c, 10.0) for c in cols]
    grids = [RawGrid(spec, inverse_softplus(t.probs)) for t in targets]
    matched = rotation_loss(grids, targets)
    assert matched == pytest.approx(sum(combined_loss(g, t).total for g, t in zip(grids, targets)))
    assert matched == pytest.approx(sum(-1 + 0.1 * (1 - np.linalg.norm(expectation(t))) for t in targets), abs=1e-9)
    permuted = rotation_loss(grids[1:] + grids[:1], targets)
    assert permuted > matched + 1.0


def test_rotation_loss_is_additive_over_a_translation_term():
    rng = np.random.default_rng(8)
    spec = GridSpec(16, 16)
    t_target = vmf_target(spec, unit(rng), 10.0)
    others = [vmf_target(spec, unit(rng), 10.0) for _ in range(2)]
    grids = [RawGrid(spec, rng.normal(size=spec.shape)) for _ in range(3)]
    l_t = combined_loss(grids[0], t_target).total
    extra = sum(combined_loss(g, t).total for g, t in zip(grids[1:], others))
    assert rotation_loss(grids, [t_target, *others]) == pytest.approx(l_t + extra, rel=1e-13)


def test_rotation_loss_needs_matching_lengths():
    spec = GridSpec(4, 4)
    with pytest.raises(UsageError):
        rotation_loss([RawGrid(spec, np.zeros((4, 4)))], [])
