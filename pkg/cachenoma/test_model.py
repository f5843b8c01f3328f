import math
import unittest

import numpy as np

from cachenoma.base import (FileLibrary, InvalidParameterError, MalformedAllocationError, PowerAllocation,
                            SystemScenario, UserProfile, rng_stream)
from cachenoma.model import (adjust_threshold, break_ties, decode_success, estimate_success_probability,
                             estimate_success_users, sample_channel_gains, sic_decode)


def two_user_scenario(cache0=(), cache1=(), requests=(0, 1), thresholds=(0.5, 0.5)):
    users = (UserProfile(1.0, cache=frozenset(cache0), request=requests[0]),
             UserProfile(0.5, cache=frozenset(cache1), request=requests[1]))
    return SystemScenario(users, FileLibrary(thresholds))


class TestAdjustThreshold(unittest.TestCase):
    def test_identity_on_full_bandwidth(self):
        eps = np.linspace(0.001, 5, 1000)
        np.testing.assert_array_equal(adjust_threshold(eps, 1), eps)

    def test_matches_power_formula(self):
        eps = np.linspace(0.001, 5, 1000)
        for w in (2, 3, 7):
            np.testing.assert_allclose(adjust_threshold(eps, w), (1 + eps) ** w - 1, rtol=1e-12)

    def test_strictly_increasing(self):
        eps = np.linspace(0.001, 5, 1000)
        self.assertTrue(np.all(np.diff(adjust_threshold(eps, 4)) > 0), "Adjusted thresholds should grow with eps")
        self.assertTrue(np.all(adjust_threshold(eps, 3) > adjust_threshold(eps, 2)),
                        "Narrower subchannels should need higher thresholds")

    def test_known_values(self):
        self.assertAlmostEqual(adjust_threshold(0.016, 2), 0.032256, places=12)
        self.assertAlmostEqual(adjust_threshold(0.608, 2), 1.585664, places=12)

    def test_rejects_zero_subchannels(self):
        with self.assertRaises(InvalidParameterError):
            adjust_threshold(0.1, 0)


class TestChannelGains(unittest.TestCase):
    def test_shapes(self):
        scenario = two_user_scenario()
        rng = np.random.default_rng(0)
        self.assertEqual(sample_channel_gains(scenario, rng).shape, (2,))
        self.assertEqual(sample_channel_gains(scenario, rng, 10).shape, (10, 2))

    def test_exponential_means(self):
        scenario = two_user_scenario()
        gains = sample_channel_gains(scenario, np.random.default_rng(1), 200_000)
        np.testing.assert_allclose(gains.mean(axis=0), [1.0, 2.0], rtol=0.02)

    def test_gamma_mean_and_variance(self):
        users = (UserProfile(1 / 3, gain_variance=0.1), UserProfile(1.0))
        scenario = SystemScenario(users, FileLibrary((0.1,)))
        gains = sample_channel_gains(scenario, np.random.default_rng(2), 200_000)
        self.assertAlmostEqual(gains[:, 0].mean(), 3.0, delta=0.01)
        self.assertAlmostEqual(gains[:, 0].var(), 0.1, delta=0.005)
        self.assertAlmostEqual(gains[:, 1].var(), 1.0, delta=0.03)

    def test_keyed_streams_are_reproducible(self):
        a = rng_stream(7, 3, 1).random(5)
        b = rng_stream(7, 3, 1).random(5)
        c = rng_stream(7, 3, 2).random(5)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.allclose(a, c))


class TestDecodeSuccess(unittest.TestCase):
    # alphas (0.8, 0.2), eps 0.5, beta 1: user 0 needs h >= 0.5 / 0.7, user 1 needs h >= 0.5 / 0.7 and h >= 2.5
    def test_two_user_sic(self):
        scenario = two_user_scenario()
        alloc = PowerAllocation([0.8, 0.2])
        gains = np.array([[1.0, 3.0], [1.0, 2.0], [0.7, 3.0]])
        expected = np.array([[True, True], [True, False], [False, True]])
        np.testing.assert_array_equal(decode_success(gains, alloc, scenario), expected)

    def test_cached_interference_is_removed(self):
        alloc = PowerAllocation([0.8, 0.2])
        gains = np.array([0.65, 3.0])
        self.assertFalse(sic_decode(gains, alloc, two_user_scenario()).success[0])
        self.assertTrue(sic_decode(gains, alloc, two_user_scenario(cache0=(1,))).success[0],
                        "User 0 should decode without interference once it holds file 1")

    def test_cached_stronger_signal_is_skipped(self):
        # user 1 holds file 0, so it only needs 0.2 h >= 0.5 and never decodes the stronger signal
        scenario = two_user_scenario(cache1=(0,))
        alloc = PowerAllocation([0.8, 0.2])
        outcome = sic_decode(np.array([0.1, 2.6]), alloc, scenario)
        np.testing.assert_array_equal(outcome.success, [False, True])
        self.assertEqual(outcome.success_count, 1)
        self.assertFalse(outcome.all_success)

    def test_self_cached_user_always_succeeds(self):
        scenario = two_user_scenario(cache1=(1,))
        alloc = PowerAllocation([1.0, 0.0])
        outcome = sic_decode(np.array([10.0, 0.0]), alloc, scenario)
        self.assertTrue(outcome.all_success)

    def test_boundary_is_inclusive(self):
        scenario = SystemScenario((UserProfile(1.0, request=0),), FileLibrary((0.5,)))
        self.assertTrue(sic_decode(np.array([0.5]), PowerAllocation([1.0]), scenario).success[0])
        self.assertFalse(sic_decode(np.array([0.499]), PowerAllocation([1.0]), scenario).success[0])

    def test_equal_powers_on_distinct_files_are_rejected(self):
        with self.assertRaises(MalformedAllocationError):
            decode_success(np.ones(2), PowerAllocation([0.5, 0.5]), two_user_scenario())

    def test_same_file_is_one_signal(self):
        scenario = two_user_scenario(requests=(0, 0))
        success = decode_success(np.array([0.5, 0.5]), PowerAllocation([0.5, 0.5]), scenario)
        np.testing.assert_array_equal(success, [[True, True]])

    def test_subchannels_scale_threshold_and_noise(self):
        # W = 2: eps becomes 1.25, beta becomes 0.5, so a lone user with full power needs h >= 0.625
        users = (UserProfile(1.0, request=0), UserProfile(1.0, request=1))
        scenario = SystemScenario(users, FileLibrary((0.5, 0.5)))
        alloc = PowerAllocation([1.0, 1.0], pair_budgets=[0.5, 0.5], subchannel_count=2, groups=[(0,), (1,)])
        # budget 0.5: 0.5 h >= 1.25 * 0.5
        gains = np.array([[1.25, 1.24]])
        np.testing.assert_array_equal(decode_success(gains, alloc, scenario), [[True, False]])

    def test_bad_groups_are_rejected(self):
        alloc = PowerAllocation([1.0, 0.0], groups=[(0,)])
        with self.assertRaises(MalformedAllocationError):
            decode_success(np.ones(2), alloc, two_user_scenario())


def straight_line_sic(h, alphas, users, thresholds, p_max):
    """One draw, one co-channel group, plain loops: strongest signal first, cached signals skipped."""

    order = sorted((i for i in range(len(users)) if alphas[i] > 0), key=lambda i: -alphas[i])
    success = []
    for i, user in enumerate(users):
        if user.request in user.cache:
            success.append(True)
            continue
        ok = False
        for pos, j in enumerate(order):
            f = users[j].request
            if f in user.cache:
                continue
            interference = sum(alphas[m] * p_max for m in order[pos + 1:] if users[m].request not in user.cache)
            if h[i] * alphas[j] * p_max < thresholds[f] * (h[i] * interference + 1.0):
                break
            if f == user.request:
                ok = True
                break
        success.append(ok)
    return success


class TestAgainstStraightLineSic(unittest.TestCase):
    def test_random_three_user_scenarios(self):
        rng = np.random.default_rng(5)
        library = FileLibrary.arithmetic(size=6, start=0.1, step=0.15)
        for _ in range(20):
            requests = rng.choice(6, 3, replace=False)
            users = tuple(UserProfile(float(rng.uniform(0.3, 2)), request=int(r),
                                      cache=frozenset(rng.choice(6, 2, replace=False).tolist())) for r in requests)
            scenario = SystemScenario(users, library, p_max=4.0)
            alphas = np.where(scenario.self_cached, 0.0, rng.dirichlet(np.ones(3)))
            alphas = alphas / alphas.sum() if alphas.sum() > 0 else alphas
            gains = sample_channel_gains(scenario, rng, 500)
            success = decode_success(gains, PowerAllocation(alphas), scenario)
            for n in range(len(gains)):
                self.assertEqual(list(success[n]), straight_line_sic(gains[n], alphas, users, library.thresholds, 4.0))


class TestMonteCarlo(unittest.TestCase):
    def test_single_user_matches_closed_form(self):
        scenario = SystemScenario((UserProfile(1.0, request=0),), FileLibrary((0.5,)), p_max=1.0)
        p, se = estimate_success_probability(scenario, PowerAllocation([1.0]), n_samples=40_000,
                                             rng=np.random.default_rng(3))
        self.assertLess(abs(p - math.exp(-0.5)), 4 * se)

    def test_rejects_allocation_with_bad_sum(self):
        with self.assertRaises(MalformedAllocationError):
            estimate_success_probability(two_user_scenario(), PowerAllocation([0.6, 0.2]), n_samples=10)

    def test_success_users_between_zero_and_k(self):
        mean, se = estimate_success_users(two_user_scenario(), PowerAllocation([0.8, 0.2]), n_samples=2000,
                                          rng=np.random.default_rng(4))
        self.assertGreaterEqual(mean, 0)
        self.assertLessEqual(mean, 2)
        self.assertGreater(se, 0)


class TestBreakTies(unittest.TestCase):
    def test_separates_ties_and_keeps_total(self):
        alphas = break_ties([0.25, 0.25, 0.5, 0.0], priority=[1, 0, 2, 3])
        self.assertAlmostEqual(alphas.sum(), 1.0, places=12)
        self.assertGreater(alphas[1], alphas[0], "Earlier users in the priority should get the larger share")
        self.assertEqual(alphas[3], 0.0)

    def test_leaves_distinct_values_alone(self):
        np.testing.assert_array_equal(break_ties([0.7, 0.3]), [0.7, 0.3])


if __name__ == '__main__':
    unittest.main()
