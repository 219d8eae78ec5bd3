import math

import numpy as np
import pytest

from gossipsim.compression import Identity, RandK, TopK
from gossipsim.consensus import DivergenceError, tracking_stepsize
from gossipsim.objectives import QuadraticObjective
from gossipsim.optimize import (
    AveragedIterate,
    ExactAveraging,
    PracticalSchedule,
    SgdConfig,
    TheoreticalSchedule,
    TrackingAveraging,
    blackbox_stepsize_requirement,
    run_optimization,
    sgd_round,
    theoretical_stepsize,
)
from gossipsim.streams import StreamPool, stream
from gossipsim.topology import FullyConnected, Ring, build_gossip_matrix

RING9 = build_gossip_matrix(Ring(9))
FC9 = build_gossip_matrix(FullyConnected(9))


def quad_objective(d, n, seed=31, noise=0.0):
    targets = stream(seed, tag="targets").standard_normal((d, n))
    return QuadraticObjective(targets, noise_sigma=noise)


def psi(x, y):
    xbar = x.mean(axis=1, keepdims=True)
    return float(np.sum((x - xbar) ** 2) + np.sum((x - y) ** 2))


class TestSchedules:
    def test_theoretical_formula(self):
        sched = TheoreticalSchedule(mu=2.0, a=100.0)
        assert sched.eta(0) == pytest.approx(4.0 / 200.0)
        assert sched.eta(50) == pytest.approx(4.0 / 300.0)

    def test_practical_formula(self):
        sched = PracticalSchedule(a=0.1, b=10.0, m=500)
        assert sched.eta(0) == pytest.approx(5.0)
        assert sched.eta(90) == pytest.approx(0.5)

    def test_strictly_decreasing(self):
        for sched in (TheoreticalSchedule(1.0, 410.0), PracticalSchedule(0.3, 50.0, 1800)):
            etas = [sched.eta(t) for t in range(100)]
            assert all(a > b for a, b in zip(etas, etas[1:]))


class TestTheoreticalStepsize:
    def test_perfect_network_floor(self):
        eta0, a = theoretical_stepsize(1.0, 1.0, 1.0, 1.0, 0)
        assert a == 410.0
        assert eta0 == pytest.approx(4.0 / 410.0)

    def test_condition_number_dominates(self):
        _, a = theoretical_stepsize(1.0, 100.0, 1.0, 1.0, 0)
        assert a == 1600.0

    def test_compression_raises_requirement(self):
        _, a = theoretical_stepsize(1.0, 1.0, 0.5, 0.1, 0)
        assert a == pytest.approx(410.0 / (0.25 * 0.1))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            theoretical_stepsize(0.0, 1.0, 1.0, 1.0, 0)

    def test_blackbox_form_agrees_with_tracking_form(self):
        # with the tracking contraction p = delta^2 omega / 82 the generic
        # requirement 5/p equals 410/(delta^2 omega)
        for delta, om in ((1.0, 1.0), (0.2, 0.05), (0.6, 0.3)):
            p = delta**2 * om / 82.0
            generic = blackbox_stepsize_requirement(p, mu=1.0, big_l=1.0)
            _, specialized = theoretical_stepsize(1.0, 1.0, delta, om, 0)
            assert generic == pytest.approx(specialized, rel=1e-12)
        assert blackbox_stepsize_requirement(0.9, mu=1.0, big_l=100.0) == 1600.0


class TestAveragedIterate:
    def test_weight_total_matches_closed_form(self):
        a, big_t = 410, 500
        avg = AveragedIterate(float(a), dim=3)
        for t in range(big_t):
            avg.update(t, np.zeros(3))
        closed = big_t * (2 * big_t**2 + 6 * a * big_t - 3 * big_t + 6 * a**2 - 6 * a + 1) // 6
        assert avg.s_total == float(closed)  # integer-valued floats stay exact
        assert avg.s_total >= big_t**3 / 3.0

    def test_weighted_value(self):
        avg = AveragedIterate(2.0, dim=1)
        avg.update(0, np.array([1.0]))  # weight 4
        avg.update(1, np.array([10.0]))  # weight 9
        assert avg.value()[0] == pytest.approx((4.0 + 90.0) / 13.0)

    def test_empty_average_rejected(self):
        with pytest.raises(ValueError):
            AveragedIterate(1.0, dim=2).value()


class TestAveragingSchemes:
    def test_exact_preserves_average_and_contracts(self):
        scheme = ExactAveraging(RING9, gamma=0.7)
        assert scheme.p == pytest.approx(0.7 * RING9.delta)
        x = stream(5, tag="psi").standard_normal((24, 9))
        y, s = scheme.initial_aux(x)
        for t in range(50):
            x2, y2, _, payloads = scheme.apply(x, y, s, t=t, seed=5)
            np.testing.assert_allclose(x2.mean(axis=1), x.mean(axis=1), atol=1e-12)
            assert psi(x2, y2) <= (1.0 - scheme.p) * psi(x, y)
            assert payloads is None
            x, y = x2, y2

    def test_tracking_preserves_average(self):
        scheme = TrackingAveraging(RING9, 0.4, TopK(3), d=24)
        x = stream(6, tag="psi").standard_normal((24, 9))
        y, s = scheme.initial_aux(x)
        for t in range(50):
            x, y, s, payloads = scheme.apply(x, y, s, t=t, seed=6)
            assert len(payloads) == 9
        np.testing.assert_allclose(
            x.mean(axis=1), stream(6, tag="psi").standard_normal((24, 9)).mean(axis=1), atol=1e-12
        )

    def test_tracking_lyapunov_contraction_deterministic(self):
        d = 24
        spec = TopK(3)
        scheme = TrackingAveraging(
            RING9, tracking_stepsize(RING9.delta, 3 / 24, RING9.beta), spec, d
        )
        assert scheme.p == pytest.approx(RING9.delta**2 * (3 / 24) / 82.0)
        x = stream(7, tag="psi").standard_normal((d, 9))
        y, s = scheme.initial_aux(x)
        for t in range(200):
            x2, y2, s2, _ = scheme.apply(x, y, s, t=t, seed=7)
            assert psi(x2, y2) <= (1.0 - scheme.p) * psi(x, y) + 1e-12
            x, y, s = x2, y2, s2

    def test_tracking_lyapunov_contraction_random_mean(self):
        # gradient-free rounds, mean over 20 seeds, 20% slack on p
        d, rounds = 24, 150
        spec = RandK(3)
        gamma = tracking_stepsize(RING9.delta, 3 / 24, RING9.beta)
        ratios = np.zeros(rounds)
        for seed in range(20):
            scheme = TrackingAveraging(RING9, gamma, spec, d)
            x = stream(seed, tag="psi").standard_normal((d, 9))
            y, s = scheme.initial_aux(x)
            for t in range(rounds):
                x2, y2, s2, _ = scheme.apply(x, y, s, t=t, seed=seed)
                ratios[t] += psi(x2, y2) / psi(x, y)
                x, y, s = x2, y2, s2
        ratios /= 20.0
        assert np.max(ratios) <= 1.0 - 0.8 * scheme.p


class TestReductions:
    def test_tracking_identity_equals_plain_every_iterate(self):
        d, rounds, seed = 12, 200, 5
        objective = quad_objective(d, 9, noise=0.5)
        x0 = stream(seed, tag="init").standard_normal((d, 9))
        plain = ExactAveraging(RING9, gamma=1.0)
        tracked = TrackingAveraging(RING9, 1.0, Identity(), d)
        xp, (yp, sp) = x0.copy(), plain.initial_aux(x0)
        xt, (yt, st) = x0.copy(), tracked.initial_aux(x0)
        sched = PracticalSchedule(a=0.05, b=float(d), m=1)
        pool_a, pool_b = StreamPool(), StreamPool()
        for t in range(rounds):
            eta = sched.eta(t)
            xp, yp, sp, _, _ = sgd_round(xp, yp, sp, objective, eta, plain, t, seed, pool_a)
            xt, yt, st, _, _ = sgd_round(xt, yt, st, objective, eta, tracked, t, seed, pool_b)
            assert np.max(np.abs(xp - xt)) <= 1e-12

    def test_fully_connected_plain_equals_minibatch_oracle(self):
        d, rounds, seed = 12, 200, 9
        objective = quad_objective(d, 9, noise=0.5)
        x0 = np.tile(stream(77, tag="init").standard_normal(d)[:, None], (1, 9))
        sched = PracticalSchedule(a=0.05, b=float(d), m=1)
        config = SgdConfig(matrix=FC9, schedule=sched, averaging="exact", gamma=1.0,
                           iters=rounds, seed=seed, eval_every=rounds, f_star=0.0)
        result = run_optimization(config, objective, x0)
        w = x0[:, 0].copy()
        for t in range(rounds):
            grads = [
                objective.stochastic_gradient(i, w, stream(seed, node=i, round_=t, tag="grad"))
                for i in range(9)
            ]
            w = w - sched.eta(t) * np.mean(grads, axis=0)
        assert np.max(np.abs(result.final_x - w[:, None])) <= 1e-12

    def test_single_node_ring_is_serial_sgd(self):
        d, rounds, seed = 6, 100, 3
        matrix = build_gossip_matrix(Ring(1))
        objective = quad_objective(d, 1, noise=1.0)
        x0 = stream(seed, tag="init").standard_normal((d, 1))
        sched = PracticalSchedule(a=0.1, b=float(d), m=1)
        config = SgdConfig(matrix=matrix, schedule=sched, averaging="exact", gamma=1.0,
                           iters=rounds, seed=seed, eval_every=rounds, f_star=0.0)
        result = run_optimization(config, objective, x0)
        w = x0[:, 0].copy()
        for t in range(rounds):
            g = objective.stochastic_gradient(0, w, stream(seed, node=0, round_=t, tag="grad"))
            w = w - sched.eta(t) * g
        assert np.array_equal(result.final_x[:, 0], w)

    def test_average_recursion_closed_form(self):
        # on a fully connected graph the node average follows
        # xbar <- xbar - eta (xbar - target_mean + noise_mean) exactly
        d, rounds, seed = 8, 300, 13
        objective = quad_objective(d, 9, noise=1.0)
        tbar = objective.targets.mean(axis=1)
        x0 = stream(seed, tag="init").standard_normal((d, 9))
        sched = PracticalSchedule(a=0.05, b=float(d), m=1)
        config = SgdConfig(matrix=FC9, schedule=sched, averaging="exact", gamma=1.0,
                           iters=rounds, seed=seed, eval_every=1, f_star=0.0)
        result = run_optimization(config, objective, x0)
        xbar = x0.mean(axis=1)
        for t in range(rounds):
            noise = np.mean(
                [
                    stream(seed, node=i, round_=t, tag="grad").standard_normal(d)
                    for i in range(9)
                ],
                axis=0,
            ) / math.sqrt(d)
            xbar = xbar - sched.eta(t) * (xbar - tbar + noise)
        np.testing.assert_allclose(result.final_x.mean(axis=1), xbar, atol=1e-10)


class TestRunOptimization:
    def test_zero_gradient_exact_averaging_fixed_point(self):
        d = 5
        target = stream(1, tag="targets").standard_normal(d)
        objective = QuadraticObjective(np.tile(target[:, None], (1, 9)))
        x0 = np.tile(target[:, None], (1, 9))
        config = SgdConfig(matrix=RING9, schedule=PracticalSchedule(0.1, 5.0, 1),
                           averaging="exact", iters=50, seed=0, eval_every=50, f_star=0.0)
        result = run_optimization(config, objective, x0)
        np.testing.assert_allclose(result.final_x, x0, atol=1e-14)

    def test_monotone_trend_quadratic(self):
        # suboptimality at T=2000 is below its value at T=1000, averaged
        # over 5 seeds, with the theoretical schedule
        d, n = 10, 9
        objective = quad_objective(d, n, noise=1.0)
        f_star = objective.value(objective.targets.mean(axis=1))
        sched = TheoreticalSchedule(mu=1.0, a=410.0)
        half, full = [], []
        for seed in range(5):
            config = SgdConfig(matrix=FC9, schedule=sched, averaging="exact", gamma=1.0,
                               iters=2000, seed=seed, eval_every=1000, f_star=f_star)
            recs = run_optimization(config, objective, np.zeros((d, n))).records
            by_iter = {r.iter: r.subopt for r in recs}
            half.append(by_iter[1000])
            full.append(by_iter[2000])
        assert np.mean(full) <= np.mean(half)

    def test_records_schema_and_bits(self):
        d = 16
        objective = quad_objective(d, 9)
        spec = TopK(2)
        config = SgdConfig(matrix=RING9, schedule=PracticalSchedule(0.05, 16.0, 1),
                           averaging="tracking", gamma=0.4, compression=spec,
                           iters=10, seed=0, eval_every=2, f_star=0.0)
        result = run_optimization(config, objective, np.zeros((d, 9)))
        iters = [r.iter for r in result.records]
        assert iters == [0, 2, 4, 6, 8, 10]
        per_round = sum(RING9.degrees) * (2 * (32 + 4))
        for rec in result.records:
            assert rec.bits == rec.iter * per_round
        assert all(b.bits >= a.bits for a, b in zip(result.records, result.records[1:]))
        assert result.empirical_g > 0 and math.isfinite(result.empirical_g)

    def test_full_payload_bits_for_exact_averaging(self):
        d = 16
        objective = quad_objective(d, 9)
        config = SgdConfig(matrix=RING9, schedule=PracticalSchedule(0.05, 16.0, 1),
                           averaging="exact", iters=4, seed=0, eval_every=4, f_star=0.0)
        result = run_optimization(config, objective, np.zeros((d, 9)))
        assert result.records[-1].bits == 4 * sum(RING9.degrees) * d * 32

    def test_divergence_reports_iteration(self):
        objective = quad_objective(4, 9)
        config = SgdConfig(matrix=RING9, schedule=PracticalSchedule(a=10.0, b=1.0, m=100),
                           averaging="exact", iters=200, seed=0, eval_every=10, f_star=0.0)
        with pytest.raises(DivergenceError) as err:
            run_optimization(config, objective, np.zeros((4, 9)))
        assert err.value.iteration >= 0

    def test_strict_theory_precondition(self):
        objective = quad_objective(4, 9)
        sched = TheoreticalSchedule(mu=1.0, a=10.0)  # far below 410/(delta^2)
        config = SgdConfig(matrix=RING9, schedule=sched, averaging="exact",
                           iters=5, seed=0, strict_theory=True, f_star=0.0)
        with pytest.raises(ValueError, match="theoretical requirement"):
            run_optimization(config, objective, np.zeros((4, 9)))
        relaxed = SgdConfig(matrix=RING9, schedule=sched, averaging="exact",
                            iters=5, seed=0, f_star=0.0)
        with pytest.warns(UserWarning, match="theoretical requirement"):
            run_optimization(relaxed, objective, np.zeros((4, 9)))

    def test_seed_determinism(self):
        d = 8
        objective = quad_objective(d, 9, noise=0.5)
        config = SgdConfig(matrix=RING9, schedule=PracticalSchedule(0.05, 8.0, 1),
                           averaging="tracking", gamma=0.4, compression=RandK(2),
                           iters=100, seed=21, eval_every=10, f_star=0.0)
        a = run_optimization(config, objective, np.zeros((d, 9)))
        b = run_optimization(config, objective, np.zeros((d, 9)))
        assert a.records == b.records
        assert np.array_equal(a.final_x, b.final_x)
        assert np.array_equal(a.x_avg, b.x_avg)
