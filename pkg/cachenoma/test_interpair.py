import math
import unittest

import numpy as np

from cachenoma.base import FileLibrary, InvalidParameterError, SystemScenario, UserProfile
from cachenoma.interpair import (allocate_budgets, default_pairing, oma_success_probability, plan_method1,
                                 plan_oma)
from cachenoma.model import adjust_threshold, estimate_success_probability
from cachenoma.pairing import case_exponent, classify_pair, pair_params


def four_user_scenario(p_max=4.0):
    library = FileLibrary.arithmetic()
    users = (UserProfile(1.0, cache=frozenset({3}), request=5),
             UserProfile(0.5, cache=frozenset({5}), request=3),
             UserProfile(1.0, request=10),
             UserProfile(0.5, cache=frozenset({12}), request=12))
    return SystemScenario(users, library, p_max=p_max)


class TestAllocateBudgets(unittest.TestCase):
    def test_square_root_split(self):
        budgets = allocate_budgets([1.0, 4.0, 0.0], 3.0)
        np.testing.assert_allclose(budgets, [1.0, 2.0, 0.0])

    def test_beats_random_perturbations(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            psis = rng.uniform(0.01, 5.0, rng.integers(1, 6))
            budgets = allocate_budgets(psis, 2.0)
            best = np.sum(psis / budgets)
            for _ in range(100):
                other = rng.dirichlet(np.ones(len(psis))) * 2.0
                self.assertGreaterEqual(np.sum(psis / other), best * (1 - 1e-9))

    def test_scale_invariant(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            psis = rng.uniform(0.01, 5.0, 3)
            for c in (1e-3, 0.5, 7.0, 1e4):
                np.testing.assert_allclose(allocate_budgets(c * psis, 2.0), allocate_budgets(psis, 2.0), rtol=1e-12)

    def test_all_zero_needs_no_power(self):
        np.testing.assert_array_equal(allocate_budgets([0.0, 0.0], 1.0), [0.0, 0.0])

    def test_rejects_bad_input(self):
        with self.assertRaises(InvalidParameterError):
            allocate_budgets([-1.0, 1.0], 1.0)
        with self.assertRaises(InvalidParameterError):
            allocate_budgets([1.0], 0.0)
        with self.assertRaises(InvalidParameterError):
            allocate_budgets([], 1.0)


class TestPlanMethod1(unittest.TestCase):
    def test_rejects_odd_k(self):
        users = tuple(UserProfile(1.0, request=i) for i in range(3))
        with self.assertRaises(InvalidParameterError):
            plan_method1(SystemScenario(users, FileLibrary.arithmetic()))

    def test_rejects_non_matching(self):
        with self.assertRaises(InvalidParameterError):
            plan_method1(four_user_scenario(), pairing=[(0, 1), (1, 2)])

    def test_default_pairing(self):
        self.assertEqual(default_pairing(6), [(0, 1), (2, 3), (4, 5)])

    def test_allocation_structure(self):
        plan, alloc = plan_method1(four_user_scenario())
        self.assertEqual(plan.w, 2)
        self.assertEqual(alloc.subchannel_count, 2)
        self.assertAlmostEqual(alloc.pair_budgets.sum(), 4.0)
        alloc.validate(4.0)
        # the second pair is T2: user 3 holds its own request
        self.assertEqual(tuple(alloc.alphas[2:]), (1.0, 0.0))

    def test_analytic_matches_monte_carlo(self):
        scenario = four_user_scenario()
        plan, alloc = plan_method1(scenario)
        p, se = estimate_success_probability(scenario, alloc, n_samples=40_000, rng=np.random.default_rng(1))
        self.assertLess(abs(p - plan.success_probability()), 4 * se)

    def test_two_stages_match_joint_grid(self):
        library = FileLibrary.arithmetic()
        users = (UserProfile(1.0, cache=frozenset({5}), request=3), UserProfile(0.5, request=5),
                 UserProfile(0.8, request=10), UserProfile(0.4, cache=frozenset({10}), request=12))
        scenario = SystemScenario(users, library, p_max=4.0)
        plan, _ = plan_method1(scenario)
        two_stage = -math.log(plan.success_probability())

        grid = np.linspace(0.005, 0.995, 150)
        exponents = []
        for i, j in default_pairing(4):
            case = classify_pair(users[i], users[j], library, 2)
            params = pair_params(users[i], users[j], library, scenario.noise_power, 2)
            exponents.append(case_exponent(case.tag, params.swapped() if case.swapped else params, grid))
        budgets = grid * scenario.p_max
        joint = (exponents[0][:, None, None] / budgets[None, None, :]
                 + exponents[1][None, :, None] / (scenario.p_max - budgets)[None, None, :])
        self.assertGreaterEqual(joint.min(), two_stage * (1 - 1e-9), "The joint grid beat the two-stage optimum")
        self.assertLessEqual(joint.min(), two_stage * 1.05)

    def test_custom_pairing(self):
        plan, alloc = plan_method1(four_user_scenario(), pairing=[(0, 2), (1, 3)])
        self.assertEqual(alloc.groups, [(0, 2), (1, 3)])
        self.assertEqual(len(plan.solutions), 2)

    def test_caching_never_hurts(self):
        rng = np.random.default_rng(2)
        library = FileLibrary.arithmetic()
        for _ in range(50):
            users = tuple(UserProfile(float(rng.uniform(0.3, 2)),
                                      cache=frozenset(rng.choice(library.size, 5, replace=False).tolist()),
                                      request=int(rng.integers(library.size))) for _ in range(4))
            scenario = SystemScenario(users, library, p_max=2.0)
            with_cache = plan_method1(scenario)[0].success_probability()
            without = plan_method1(scenario.without_caches())[0].success_probability()
            self.assertGreaterEqual(with_cache, without - 1e-12)


class TestPlanOma(unittest.TestCase):
    def test_exponents(self):
        scenario = four_user_scenario()
        plan, alloc = plan_oma(scenario)
        eps = adjust_threshold(scenario.request_thresholds, 4)
        expected = scenario.lambdas * eps * scenario.betas / 4
        expected[3] = 0.0
        np.testing.assert_allclose(plan.pair_psis, expected)
        self.assertEqual(alloc.groups, [(0,), (1,), (2,), (3,)])
        self.assertEqual(alloc.alphas[3], 0.0)

    def test_closed_form_success(self):
        scenario = four_user_scenario()
        plan, _ = plan_oma(scenario)
        self.assertAlmostEqual(oma_success_probability(scenario), plan.success_probability(), places=12)
        expected = math.exp(-np.sum(np.sqrt(plan.pair_psis)) ** 2 / scenario.p_max)
        self.assertAlmostEqual(oma_success_probability(scenario), expected, places=12)

    def test_matches_monte_carlo(self):
        scenario = four_user_scenario()
        plan, alloc = plan_oma(scenario)
        p, se = estimate_success_probability(scenario, alloc, n_samples=40_000, rng=np.random.default_rng(3))
        self.assertLess(abs(p - plan.success_probability()), 4 * se)


if __name__ == '__main__':
    unittest.main()
