import math

import numpy as np
import pytest

from frozen_rdp import RDP_GRID
from oracles import rdp_subsampled_gaussian_quad
from tempered_dp import accountant as acc
from tempered_dp.tensor import ParameterError

MNIST_Q = 256 / 60_000


def test_full_batch_is_plain_gaussian():
    for a in (2, 7, 64, 512):
        for s in (0.5, 1.1, 4.0):
            assert abs(acc.rdp_subsampled_gaussian(1.0, s, a) - a / (2 * s * s)) <= 1e-9


def test_zero_sampling_costs_nothing():
    assert acc.rdp_subsampled_gaussian(0.0, 1.0, 8) == 0.0


@pytest.mark.parametrize("q,sigma,order,expected", RDP_GRID)
def test_matches_quadrature_oracle(q, sigma, order, expected):
    assert acc.rdp_subsampled_gaussian(q, sigma, order) == pytest.approx(expected, rel=1e-6)


def test_live_oracle_spot_check():
    # one fresh quadrature, so the frozen table cannot drift silently
    assert acc.rdp_subsampled_gaussian(0.01, 1.1, 2) == pytest.approx(
        rdp_subsampled_gaussian_quad(0.01, 1.1, 2), rel=1e-9)
    assert acc.rdp_subsampled_gaussian(0.01, 1.1, 2) == pytest.approx(1.2851e-4, rel=1e-4)


def test_large_orders_stay_finite():
    v = acc.rdp_subsampled_gaussian(0.5, 0.3, 512)
    assert math.isfinite(v) and v > 0


def test_input_validation():
    with pytest.raises(ParameterError):
        acc.rdp_subsampled_gaussian(1.2, 1.0, 2)
    with pytest.raises(ParameterError):
        acc.rdp_subsampled_gaussian(0.1, 0.0, 2)
    with pytest.raises(ParameterError):
        acc.rdp_subsampled_gaussian(0.1, 1.0, 2.5)
    with pytest.raises(ParameterError):
        acc.rdp_to_eps(np.zeros(3), 1e-5, ())
    with pytest.raises(ParameterError):
        acc.rdp_to_eps(np.zeros(1), 0.0, (2,))
    with pytest.raises(ParameterError):
        acc.compose([0.1], -1)


def test_conversion_picks_smallest_order_on_ties():
    L = math.log(1e5)
    sp = acc.rdp_to_eps([0.0, L / 2], 1e-5, (2, 3))  # both give exactly L
    assert sp.epsilon == L
    assert sp.optimal_order == 2


def test_reference_mnist_run():
    sp = acc.epsilon_for_training(MNIST_Q, 1.1, 14_063, 1e-5)
    assert sp.epsilon == pytest.approx(3.009, abs=5e-4)


def test_ledger_accumulates_steps():
    led = acc.RdpLedger(MNIST_Q, 1.1)
    led.record_step(100)
    led.record_step()
    assert led.spending(1e-5).epsilon == pytest.approx(
        acc.epsilon_for_training(MNIST_Q, 1.1, 101, 1e-5).epsilon, rel=1e-15)
    with pytest.raises(ParameterError):
        acc.RdpLedger(0.1, 1.0, orders=(4, 2))


def test_infinite_noise_hits_the_conversion_floor():
    floor = acc.conversion_floor(1e-5)
    assert floor == pytest.approx(math.log(1e5) / 511)
    assert acc.epsilon_for_training(MNIST_Q, 1e6, 10_000, 1e-5).epsilon == pytest.approx(
        floor, abs=1e-6)
    assert acc.RdpLedger(MNIST_Q, math.inf, steps=10).spending(1e-5).epsilon == floor


def test_monotone_in_steps_and_noise():
    qs, sigmas, steps = (0.001, 0.01, 0.1), (0.7, 1.0, 2.0, 5.0), (10, 100, 1000, 10_000)
    for q in qs:
        for s in sigmas:
            e = [acc.epsilon_for_training(q, s, n, 1e-5).epsilon for n in steps]
            assert all(a < b for a, b in zip(e, e[1:]))
        for n in steps:
            e = [acc.epsilon_for_training(q, s, n, 1e-5).epsilon for s in sigmas]
            assert all(a > b for a, b in zip(e, e[1:]))


@pytest.mark.parametrize("epochs,expected", [(15, 0.84052108643235), (40, 0.99356), (60, 1.11816)])
def test_solve_noise_for_mnist_budget(epochs, expected):
    steps = math.ceil(epochs / MNIST_Q)
    M = acc.solve_noise_multiplier(MNIST_Q, steps, 1e-5, 2.93)
    assert M == pytest.approx(expected, abs=5e-5)
    assert acc.epsilon_for_training(MNIST_Q, M, steps, 1e-5).epsilon == pytest.approx(2.93, abs=1e-6)


def test_solve_steps_and_q_round_trip():
    steps = acc.solve_steps(MNIST_Q, 1.1, 1e-5, 3.0)
    assert acc.epsilon_for_training(MNIST_Q, 1.1, steps, 1e-5).epsilon <= 3.0
    assert acc.epsilon_for_training(MNIST_Q, 1.1, steps + 1, 1e-5).epsilon > 3.0
    q = acc.solve_sampling_probability(1.1, 14_063, 1e-5, 3.009)
    assert q == pytest.approx(MNIST_Q, rel=1e-3)


def test_infeasible_targets():
    with pytest.raises(acc.InfeasibleBudget, match="infeasible"):
        acc.solve_noise_multiplier(MNIST_Q, 1000, 1e-5, 0.02)
    with pytest.raises(acc.InfeasibleBudget):
        acc.solve_steps(1.0, 0.1, 1e-5, 1.0)
