import logging
import math
from abc import ABC, abstractmethod
from typing import Optional, Sequence, Tuple

import numpy as np

from cachenoma.base import InvalidParameterError, PowerAllocation, SystemScenario
from cachenoma.interpair import plan_method1, plan_oma
from cachenoma.learning import DualPredictor, load_predictor, policy_alpha
from cachenoma.minlp import DEFAULT_XI, MinlpInstance, solve_exact
from cachenoma.model import break_ties

NOCACHE_SUFFIX = ":nocache"


class AllocationStrategy(ABC):
    """
    Turns a requesting-phase scenario into a power allocation.
    """

    @abstractmethod
    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        pass


def baseline_equal(scenario: SystemScenario) -> PowerAllocation:
    """
    P_max / K for every user who needs its file, on the full bandwidth. Equal shares are staggered so that users
    with a weaker average channel (larger lambda * beta) are decoded first.
    """

    active = ~scenario.self_cached
    n_active = int(active.sum())
    if n_active == 0:
        return PowerAllocation(np.zeros(scenario.k))

    alphas = np.where(active, 1.0 / n_active, 0.0)
    weakness = scenario.lambdas * scenario.betas
    priority = sorted(range(scenario.k), key=lambda i: (-weakness[i], i))
    return PowerAllocation(break_ties(alphas, priority))


def mmf_fractions(cnr: np.ndarray, p_max: float, iterations: int = 200) -> np.ndarray:
    """
    Equal-SINR fractions for a full-bandwidth SIC where lower-CNR users get more power and are decoded first.
    The common SINR t is found by bisection; for each t the fractions follow by substitution starting from the
    strongest-CNR user, whose signal is decoded last without interference.
    """

    order = sorted(range(len(cnr)), key=lambda i: (cnr[i], i))

    def fractions(t):
        alphas = np.zeros(len(cnr))
        weaker_sum = 0.0
        for i in reversed(order):
            alphas[i] = t * (cnr[i] * p_max * weaker_sum + 1) / (cnr[i] * p_max)
            weaker_sum += alphas[i]
        return alphas

    lo, hi = 0.0, 1.0
    while fractions(hi).sum() < 1:
        hi *= 2
    for _ in range(iterations):
        mid = (lo + hi) / 2
        if fractions(mid).sum() < 1:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break

    alphas = fractions(lo)
    return alphas / alphas.sum()


def baseline_mmf(scenario: SystemScenario) -> PowerAllocation:
    """
    Max-min fair rates driven by the average CNR E|h_i|^2 / beta_i = 1 / (lambda_i beta_i). Caches are not taken
    into account.
    """

    cnr = 1.0 / (scenario.lambdas * scenario.betas)
    alphas = mmf_fractions(cnr, scenario.p_max)
    logging.debug(f"MMF fractions {alphas}")
    return PowerAllocation(alphas)


class Method1Strategy(AllocationStrategy):
    """User pairs on orthogonal subchannels with closed-form splits."""

    def __init__(self, pairing: Optional[Sequence[Tuple[int, int]]] = None):
        self.pairing = pairing

    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        _, alloc = plan_method1(scenario, self.pairing)
        return alloc


class OmaStrategy(AllocationStrategy):
    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        _, alloc = plan_oma(scenario)
        return alloc


class EqualPowerStrategy(AllocationStrategy):
    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        return baseline_equal(scenario)


class MmfStrategy(AllocationStrategy):
    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        return baseline_mmf(scenario)


class ExactMinlpStrategy(AllocationStrategy):
    """Full-bandwidth allocation from the exact ordering enumeration."""

    def __init__(self, xi: float = DEFAULT_XI, workers: int = 1):
        self.xi = xi
        self.workers = workers

    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        solution = solve_exact(MinlpInstance.from_scenario(scenario, self.xi), scenario.p_max, workers=self.workers)
        return PowerAllocation(solution.decodable_alpha())


class PredictorStrategy(AllocationStrategy):
    """
    A trained predictor used as full-bandwidth allocator. Scenarios with fewer users than the predictor are padded
    with virtual users who hold their own request.
    """

    def __init__(self, predictor=None, checkpoint: Optional[str] = None):
        if predictor is None:
            if checkpoint is None:
                raise InvalidParameterError("A predictor or a checkpoint directory is required")
            predictor = load_predictor(checkpoint)
        self.predictor = predictor
        net = predictor.dnn_val if isinstance(predictor, DualPredictor) else predictor.net
        self.k_model = int(math.isqrt(net.input_dim))

    def allocate(self, scenario: SystemScenario) -> PowerAllocation:
        return PowerAllocation(policy_alpha(self.predictor.predict, scenario, self.k_model))


STRATEGIES_DICT = {
    "method1": Method1Strategy,
    "method2-exact": ExactMinlpStrategy,
    "method2-dualnet": PredictorStrategy,
    "oma": OmaStrategy,
    "equal": EqualPowerStrategy,
    "mmf": MmfStrategy,
}


def parse_method(tag: str) -> Tuple[str, bool]:
    """'oma:nocache' -> ('oma', True)."""

    nocache = tag.endswith(NOCACHE_SUFFIX)
    name = tag[:-len(NOCACHE_SUFFIX)] if nocache else tag
    if name not in STRATEGIES_DICT:
        raise InvalidParameterError(f"Unknown method {tag}, expected one of {sorted(STRATEGIES_DICT)}")
    return name, nocache


def allocate_with(tag: str, scenario: SystemScenario, **strategy_config) -> Tuple[PowerAllocation, SystemScenario]:
    """
    Allocation of a method tag. With the ':nocache' suffix the caches are cleared first; the returned scenario is
    the one the allocation must be evaluated on.
    """

    name, nocache = parse_method(tag)
    if nocache:
        scenario = scenario.without_caches()
    strategy = STRATEGIES_DICT[name](**strategy_config)
    return strategy.allocate(scenario), scenario
