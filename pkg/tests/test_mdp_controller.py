import numpy as np
import pytest

from models import ConfigurationError, MdpHyper, QNetParams
from services.mdp_controller import INCREASE, KEEP, MdpController, MdpError, StepContext
from tests.factories import LinearQ, create_state, linear_q_fns, normal_equations_slope, paper_hyper


def biased_net(q_keep: float, q_increase: float, inputs: int = 5) -> QNetParams:
    """Network whose outputs are its output biases."""
    v = QNetParams.zeros(inputs)
    v.b2[:] = [q_keep, q_increase]
    return v


# Smoothing, slope and reward


def test_smooth_losses():
    assert MdpController.smooth_losses([4.0, 1.0, 7.0], 1.0, 123.0) == (4.0, 1.0, 7.0)
    assert MdpController.smooth_losses([1.0], 0.01, 2.0)[0] == pytest.approx(1.99)
    assert MdpController.smooth_losses([2, 2, 2], 0.5, 0.0) == (1.0, 1.5, 1.75)


def test_fit_slope_exact_cases():
    beta, b = MdpController.fit_slope([5, 4, 3, 2, 1])
    assert (beta, b) == pytest.approx((-1.0, 6.0))
    assert MdpController.fit_slope([3, 3, 3]) == pytest.approx((0.0, 3.0))
    assert MdpController.fit_slope([1, 2, 2, 3]) == pytest.approx((0.6, 0.5))


def test_fit_slope_matches_normal_equations():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        window = rng.normal(size=int(rng.integers(2, 12))) * 10
        beta, b = MdpController.fit_slope(window)
        beta_ref, b_ref = normal_equations_slope(window)
        assert beta == pytest.approx(beta_ref, rel=1e-9, abs=1e-12)
        assert b == pytest.approx(b_ref, rel=1e-9, abs=1e-12)


def test_fit_slope_needs_two_points():
    with pytest.raises(ConfigurationError):
        MdpController.fit_slope([1.0])


def test_reward():
    assert MdpController.reward(0.0, 10.0, 300.0) == 0.0
    assert MdpController.reward(-1.0, 1000.0, 300.0) == pytest.approx(0.3)
    assert MdpController.reward(0.5, 500.0, 300.0) == pytest.approx(-0.3)
    with pytest.raises(ConfigurationError):
        MdpController.reward(-1.0, 0.0, 300.0)


def test_smoothing_contracts_towards_the_raw_losses():
    rng = np.random.default_rng(4)
    for _ in range(500):
        raw = rng.normal(size=int(rng.integers(1, 10))) * 5
        alpha = float(rng.uniform(0.001, 1.0))
        p, q = rng.normal(size=2) * 10

        a = np.array(MdpController.smooth_losses(raw, alpha, p))
        b = np.array(MdpController.smooth_losses(raw, alpha, q))

        gap = np.abs(a - b)
        assert gap[-1] <= (1 - alpha) ** len(raw) * abs(p - q) + 1e-9
        assert np.all(np.diff(gap) <= 1e-12)
        assert np.all(a >= min(raw.min(), p) - 1e-9) and np.all(a <= max(raw.max(), p) + 1e-9)


def test_reward_sign_follows_the_slope_and_shrinks_with_cost():
    rng = np.random.default_rng(8)
    for _ in range(500):
        beta = float(rng.normal()) or 1.0
        low, high = sorted(rng.uniform(0.1, 5000.0, 2))

        r_low = MdpController.reward(beta, low, 300.0)
        r_high = MdpController.reward(beta, high, 300.0)

        assert np.sign(r_low) == -np.sign(beta)
        assert abs(r_high) <= abs(r_low)


# Q network


def test_zero_network_outputs_zero():
    assert MdpController.q_forward(QNetParams.zeros(5), create_state(2, [1.0] * 5)).tolist() == [0.0, 0.0]


def test_q_forward_is_pure():
    v = QNetParams.uniform(np.random.default_rng(1), 5)
    state = create_state(3, [0.9, 0.8, 0.8, 0.7, 0.6])

    assert np.array_equal(MdpController.q_forward(v, state), MdpController.q_forward(v, state))


def test_q_forward_matches_matrix_arithmetic():
    rng = np.random.default_rng(3)
    v = QNetParams.uniform(rng, 5, scale=1.0)
    losses = rng.uniform(0.5, 2.0, 5)
    state = create_state(4, losses, loss_scale=1.7)

    x = losses / 1.7
    hidden = [max(0.0, sum(x[i] * v.w1[i, j] for i in range(5)) + v.b1[j]) for j in range(10)]
    expected = [sum(hidden[j] * v.w2[j, a] for j in range(10)) + v.b2[a] for a in range(2)]

    assert MdpController.q_forward(v, state) == pytest.approx(expected, rel=1e-6)


def test_q_forward_rejects_non_finite_activations():
    v = QNetParams.zeros(3)
    v.b2[:] = [np.inf, 0.0]
    with pytest.raises(MdpError):
        MdpController.q_forward(v, create_state(2, [1.0, 1.0, 1.0]))


def test_q_forward_checks_window_width():
    with pytest.raises(ConfigurationError):
        MdpController.q_forward(QNetParams.zeros(5), create_state(2, [1.0] * 4))


def test_q_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    h = 1e-6
    for _ in range(100):
        v = QNetParams.uniform(rng, 5, scale=1.0)
        state = create_state(2, rng.uniform(0.2, 3.0, 5))
        action = int(rng.integers(0, 2))
        base = v.as_vector()
        grad = MdpController.q_grad(v, state, action)

        numeric = np.empty_like(base)
        for i in range(base.size):
            plus, minus = base.copy(), base.copy()
            plus[i] += h
            minus[i] -= h
            numeric[i] = (
                MdpController.q_forward(v.from_vector(plus), state)[action]
                - MdpController.q_forward(v.from_vector(minus), state)[action]
            ) / (2 * h)

        rel = np.abs(grad - numeric) / np.maximum(1e-2, np.abs(grad) + np.abs(numeric))
        assert rel.max() < 1e-3


# Policy and transition


def test_select_action_extremes():
    rng = np.random.default_rng(0)
    assert {MdpController.select_action([0.7, 0.2], 0.0, rng) for _ in range(100)} == {KEEP}
    assert {MdpController.select_action([0.7, 0.2], 1.0, rng) for _ in range(100)} == {INCREASE}


def test_select_action_explores_at_epsilon():
    rng = np.random.default_rng(12)
    draws = [MdpController.select_action([0.7, 0.2], 0.1, rng) for _ in range(100_000)]

    assert draws.count(KEEP) / len(draws) == pytest.approx(0.9, abs=0.01)


def test_ties_keep():
    assert MdpController.greedy([0.3, 0.3]) == KEEP


@pytest.mark.parametrize("epsilon", [0.0, 0.1, 1.0])
def test_select_action_ignores_a_common_shift_of_q(epsilon):
    rng = np.random.default_rng(9)
    qvals = rng.normal(size=(200, 2))
    shifts = rng.normal(size=200) * 100

    plain = np.random.default_rng(10)
    shifted = np.random.default_rng(10)
    for q, c in zip(qvals, shifts):
        assert MdpController.select_action(q, epsilon, plain) == MdpController.select_action(
            q + c, epsilon, shifted
        )


def test_transition():
    prev = create_state(4, [1.0] * 5)
    window = [0.9] * 5

    assert MdpController.transition(prev, window, biased_net(0.7, 0.2), 8).n == 4
    assert MdpController.transition(prev, window, biased_net(0.5, 0.5), 8).n == 4
    assert MdpController.transition(prev, window, biased_net(0.2, 0.7), 8).n == 5
    top = create_state(8, [1.0] * 5)
    assert MdpController.transition(top, window, biased_net(0.2, 0.7), 8).n == 8


def test_transition_floor_keeps_broadcast_bits():
    prev = create_state(3, [1.0] * 5)

    state = MdpController.transition(prev, [0.9] * 5, biased_net(0.7, 0.2), 8, floor=4)

    assert state.n == 4
    assert state.smoothed == (0.9,) * 5


# SARSA


def test_sarsa_scalar_hand_case():
    q_fn, grad_fn = linear_q_fns({(2, 0): 2.0, (2, 1): 2.0, (3, 0): 5.0, (3, 1): 5.0})
    s_prev, s_t = create_state(2, [1.0, 1.0]), create_state(3, [1.0, 1.0])

    updated = MdpController.sarsa_update(
        LinearQ(1.0), s_prev, 0, 1.0, s_t, 0, 0.1, 0.0, q_fn=q_fn, grad_fn=grad_fn
    )

    assert updated.v == pytest.approx(0.8)


def test_zero_td_error_leaves_weights_unchanged():
    v = QNetParams.uniform(np.random.default_rng(6), 5)
    state = create_state(2, [1.0] * 5)
    q = MdpController.q_forward(v, state)

    current = v
    for _ in range(1000):
        # r + 0 * Q' == Q(s, a)
        current = MdpController.sarsa_update(current, state, 1, float(q[1]), state, 0, 0.1, 0.0)

    assert current == v


def test_sarsa_moves_q_towards_the_target():
    v = QNetParams.uniform(np.random.default_rng(8), 5, scale=0.5)
    s_prev, s_t = create_state(2, [1.0] * 5), create_state(3, [0.8] * 5)
    before = MdpController.q_forward(v, s_prev)[1]

    updated = MdpController.sarsa_update(v, s_prev, 1, 10.0, s_t, 0, 0.01, 0.9)

    assert MdpController.q_forward(updated, s_prev)[1] > before
    assert updated.is_finite()


def test_sarsa_rejects_non_finite_td_error():
    v = QNetParams.zeros(2)
    state = create_state(2, [1.0, 1.0])
    with pytest.raises(MdpError):
        MdpController.sarsa_update(v, state, 0, float("nan"), state, 0, 0.1, 0.9)


# Full steps


def test_zero_network_without_exploration_stays_at_bit_min():
    hyper = paper_hyper(epsilon=0.0)
    controller = MdpController(hyper, seed=0, params=QNetParams.zeros(hyper.T))
    losses = [2.0]

    for _ in range(20):
        result = controller.step(losses, cost_ms=10.0)
        assert (result.action, result.bits) == (KEEP, hyper.bit_min)
        losses = [1.0] * hyper.T


def test_fast_falling_losses_earn_positive_rewards():
    hyper = paper_hyper(T=4)
    controller = MdpController(hyper, seed=2)
    controller.step([5.0], cost_ms=1.0)

    loss = 5.0
    for _ in range(10):
        window = [loss - 0.05 * (i + 1) for i in range(4)]
        loss = window[-1]
        assert controller.step(window, cost_ms=0.5).reward > 0


def test_two_step_transcript():
    hyper = MdpHyper(T=2, alpha=1.0, epsilon=0.0, eta_sarsa=0.5, gamma_discount=0.5, gamma_scale=10.0)
    # Q = (0.1, 0.3) everywhere, so the greedy action is to increase
    v = biased_net(0.1, 0.3, inputs=2)
    rng = np.random.default_rng(0)

    first = MdpController.mdp_step(0, StepContext(None, None, (4.0,), 0.0), v, hyper, rng)

    assert (first.state.n, first.action, first.bits, first.reward) == (2, INCREASE, 3, None)
    assert first.state.smoothed == (4.0, 4.0)
    assert first.params is v

    ctx = StepContext(first.state, first.action, (3.0, 2.0), cost_ms=5.0, prev_bits=first.bits)
    second = MdpController.mdp_step(1, ctx, v, hyper, rng)

    # alpha = 1 keeps the raw window; slope of (3, 2) is -1
    assert second.state.smoothed == (3.0, 2.0)
    assert second.state.n == 3
    assert second.reward == pytest.approx(2.0)
    assert (second.action, second.bits) == (INCREASE, 4)
    # delta = 2 + 0.5 * 0.3 - 0.3 = 1.85; only b2[increase] has a non-zero gradient
    assert second.params.b2.tolist() == pytest.approx([0.1, 0.3 + 0.5 * 1.85])
    assert np.array_equal(second.params.w1, v.w1)


def test_mdp_step_needs_a_full_window():
    hyper = paper_hyper()
    controller = MdpController(hyper, seed=0)
    controller.step([1.0], cost_ms=1.0)
    with pytest.raises(ConfigurationError):
        controller.step([1.0, 0.9], cost_ms=1.0)


def test_controllers_with_equal_seeds_agree():
    hyper = paper_hyper(epsilon=0.5)

    def bits(seed):
        controller = MdpController(hyper, seed)
        out = [controller.step([3.0], 1.0).bits]
        for i in range(12):
            out.append(controller.step([3.0 - 0.1 * i] * hyper.T, 2.0).bits)
        return out

    assert bits(4) == bits(4)
    assert all(b >= a for a, b in zip(bits(4), bits(4)[1:]))
