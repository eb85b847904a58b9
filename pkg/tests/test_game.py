"""Game core: exact enumeration vs closed forms, MC convergence, axioms,
spatial games over model taps."""

import numpy as np
import pytest

from crgx import autodiff as ad
from crgx import game, zoo
from crgx.utility import UtilitySpec, utility_node


def rel_gap(approx, exact):
    return float(np.max(np.abs(approx - exact) / (1.0 + np.abs(exact))))


def test_two_player_table_game():
    # U{} = 0, U{1} = 1, U{2} = 2, U{1,2} = 4: marginals average to (1.5, 2.5)
    g = game.CooperativeGame.from_table([0.0, 1.0, 2.0, 4.0])
    sv = game.shapley_exact(g)
    np.testing.assert_allclose(sv.values, [1.5, 2.5], rtol=0, atol=1e-12)
    assert sv.method == "exact"


def test_exact_efficiency_on_random_games():
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = int(rng.integers(2, 9))
        g = game.CooperativeGame.from_table(rng.normal(size=1 << d))
        sv = game.shapley_exact(g)
        span = g.u_full - g.u_empty
        assert abs(float(np.sum(sv.values)) - span) <= 1e-9 * (1.0 + abs(span))


def test_exact_guard_above_enumeration_limit():
    g = game.CooperativeGame(21, lambda mask: float(np.sum(mask)))
    with pytest.raises(ValueError, match="2\\^21"):
        game.shapley_exact(g)


def test_additive_game_mc_is_exact_with_zero_stderr():
    g = game.CooperativeGame.from_table([0.0, 3.0, 5.0, 8.0])
    sv = game.shapley_mc(g, samples=100, seed=11)
    assert np.array_equal(sv.values, [3.0, 5.0])
    assert np.array_equal(sv.stderr, [0.0, 0.0])
    assert sv.samples == 100


def test_mc_depends_only_on_seed_and_samples():
    rng = np.random.default_rng(4)
    g = game.CooperativeGame.from_table(rng.normal(size=32))
    a = game.shapley_mc(g, 500, seed=7)
    b = game.shapley_mc(g, 500, seed=7)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.stderr.tobytes() == b.stderr.tobytes()
    c = game.shapley_mc(g, 500, seed=8)
    assert not np.array_equal(a.values, c.values)


@pytest.mark.parametrize("seed", range(5))
def test_mc_converges_within_four_stderr(seed):
    rng = np.random.default_rng(100 + seed)
    g = game.CooperativeGame.from_table(rng.normal(size=64))
    exact = game.shapley_exact(g).values
    sv = game.shapley_mc(g, samples=20000, seed=seed)
    assert np.all(np.abs(sv.values - exact) <= 4.0 * sv.stderr + 1e-12)


def test_single_sample_mc_has_zero_stderr():
    g = game.CooperativeGame.from_table([0.0, 1.0, 2.0, 4.0])
    sv = game.shapley_mc(g, samples=1, seed=0)
    assert np.array_equal(sv.stderr, [0.0, 0.0])


def test_bilinear_first_order_overshoots_and_second_order_corrects():
    # U = x1 * x2 at x = (1, 1): gradient route says (1, 1), the exact value
    # is (0.5, 0.5), and the curvature term restores it.
    x = np.array([1.0, 1.0])
    g = game.CooperativeGame(2, lambda m: float(np.prod(np.where(m, x, 0.0))))
    exact = game.shapley_exact(g)
    outs, tape = ad.forward(lambda z: ad.mul(ad.index(z, 0), ad.index(z, 1)), {"z": x})
    grad = ad.gradient(tape, "out", "z")
    hv = ad.hvp(tape, "out", "z", x)
    first = game.shapley_first_order(grad[None, :], x[None, :])
    second = game.shapley_second_order(grad[None, :], hv[None, :], x[None, :])
    np.testing.assert_allclose(first.values, [1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(exact.values, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(second.values, exact.values, atol=1e-12)


@pytest.mark.parametrize("d", [4, 8])
def test_second_order_exact_on_random_quadratics(d):
    rng = np.random.default_rng(d)
    b = rng.normal(size=d)
    m = rng.normal(size=(d, d))
    m = (m + m.T) / 2.0
    x = rng.normal(size=d)

    def util(mask):
        xm = x * mask
        return float(b @ xm + 0.5 * xm @ (m @ xm))

    g = game.CooperativeGame(d, util)
    exact = game.shapley_exact(g).values
    outs, tape = ad.forward(
        lambda z: ad.add(ad.matmul(b, z), ad.mul(0.5, ad.matmul(z, ad.matmul(m, z)))),
        {"z": x})
    grad = ad.gradient(tape, "out", "z")
    hv = ad.hvp(tape, "out", "z", x)
    second = game.shapley_second_order(grad[None, :], hv[None, :], x[None, :])
    assert rel_gap(second.values, exact) <= 1e-9


def test_first_order_exact_on_linear_utilities():
    rng = np.random.default_rng(3)
    d = 6
    a = rng.normal(size=d)
    x = rng.normal(size=d)
    g = game.CooperativeGame(d, lambda mask: float(a @ (x * mask)))
    exact = game.shapley_exact(g).values
    outs, tape = ad.forward(lambda z: ad.matmul(a, z), {"z": x})
    grad = ad.gradient(tape, "out", "z")
    first = game.shapley_first_order(grad[None, :], x[None, :])
    assert rel_gap(first.values, exact) <= 1e-12


# -- spatial games ----------------------------------------------------------


def spatial_fixture(arch="cnn-relu", kind="pre-softmax", c=1, seed=0):
    model = zoo.build_model(arch, 3, seed)
    image = np.random.default_rng(seed + 50).uniform(0.0, 1.0, (3, 6, 6))
    spec = UtilitySpec(c, kind)
    return model, image, game.make_spatial_game(model, image, spec)


def test_empty_coalition_is_bias_utility():
    # All tap positions zeroed: GAP gives zeros, so the logit is the FC bias.
    model, image, sg = spatial_fixture()
    assert sg.u_empty == model.weights["fc_b"][1]


def test_full_coalition_reproduces_forward():
    model, image, sg = spatial_fixture(kind="rest")
    assert sg.u_full == game.compute_utility(model.forward(image), sg.spec)


def test_spatial_player_count_is_tap_positions():
    _, _, sg = spatial_fixture()
    assert sg.d == 16


def test_spatial_first_order_matches_exact_for_linear_head():
    model, image, sg = spatial_fixture()
    exact = game.shapley_exact(sg).values
    run = sg.run
    with run.tape:
        u = utility_node(run.tape.outputs["logits"], sg.spec)
    grad = ad.gradient(run.tape, u, "tap")
    first = game.shapley_first_order(grad, run.activations)
    assert rel_gap(first.values, exact) <= 1e-9


def test_spatial_exact_efficiency():
    _, _, sg = spatial_fixture(kind="post-softmax")
    sv = game.shapley_exact(sg)
    span = sg.u_full - sg.u_empty
    assert abs(float(np.sum(sv.values)) - span) <= 1e-9 * (1.0 + abs(span))


# -- axioms -----------------------------------------------------------------


def planted_game(seed=9, d=6):
    """Random table with player 0 a dummy and players 1, 2 interchangeable."""
    rng = np.random.default_rng(seed)
    masks = np.arange(1 << d)
    table = rng.normal(size=1 << d)[masks & ~1]
    b1, b2 = 1 << 1, 1 << 2
    for m in range(1 << d):
        if (m & b1) and not (m & b2):
            table[m] = table[(m & ~b1) | b2]
    return game.CooperativeGame.from_table(table)


def test_axiom_suite_on_planted_structure():
    g = planted_game()
    report = game.axiom_suite(g, game.shapley_exact(g))
    assert report["pass"]
    assert report["dummy"]["players"] == [0]
    assert (1, 2) in report["symmetry"]["pairs"]


def test_axiom_suite_flags_broken_vector():
    g = planted_game()
    bad = game.shapley_exact(g).values.copy()
    bad[0] += 0.5  # no longer zero for the dummy, efficiency broken too
    report = game.axiom_suite(g, bad)
    assert not report["efficiency"]["pass"]
    assert not report["dummy"]["pass"]
    assert not report["pass"]


def test_axiom_suite_linearity_with_explicit_pair():
    rng = np.random.default_rng(12)
    g1 = game.CooperativeGame.from_table(rng.normal(size=32))
    g2 = game.CooperativeGame.from_table(rng.normal(size=32))
    report = game.axiom_suite(g1, game.shapley_exact(g1), pair=(g2, 1.5, -2.0))
    assert report["linearity"]["pass"]


def test_doubling_scales_values():
    g = game.CooperativeGame.from_table([0.0, 1.0, 2.0, 4.0])
    doubled = game.CooperativeGame.from_table([0.0, 2.0, 4.0, 8.0])
    np.testing.assert_allclose(game.shapley_exact(doubled).values,
                               2.0 * game.shapley_exact(g).values, atol=1e-12)


def test_coalition_weights_sum_to_one():
    for d in (2, 5, 12, 20):
        w = game._coalition_weights(d)
        # summing w over all coalitions a player can join must give 1
        from math import comb
        total = sum(comb(d - 1, k) * w[k] for k in range(d))
        assert abs(total - 1.0) <= 1e-12


def test_game_validation():
    with pytest.raises(ValueError, match="player"):
        game.CooperativeGame(0, lambda m: 0.0)
    with pytest.raises(ValueError, match="power of two"):
        game.CooperativeGame.from_table([0.0, 1.0, 2.0])
    g = game.CooperativeGame.from_table([0.0, 1.0, 2.0, 4.0])
    with pytest.raises(ValueError, match="mask"):
        g.utility(np.ones(3, dtype=bool))
    with pytest.raises(ValueError, match="samples"):
        game.shapley_mc(g, 0, seed=0)
    with pytest.raises(ValueError, match="shape"):
        game.shapley_first_order(np.ones((2, 3)), np.ones((2, 4)))
