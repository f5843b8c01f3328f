import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from cachenoma.base import InvalidParameterError, PowerAllocation, SystemScenario
from cachenoma.model import adjust_threshold
from cachenoma.pairing import PairSolution, classify_pair, pair_params, solve_pair


@dataclass
class StagePlan:
    """
    Outcome of the inter-pair stage: optimal exponents per co-channel group, their power budgets and the number of
    orthogonal subchannels.
    """

    pair_psis: np.ndarray
    budgets: np.ndarray
    w: int
    solutions: List[PairSolution] = field(default_factory=list)

    def success_probability(self) -> float:
        """Analytic product of exp(-Psi_i / P_i); groups with Psi_i = 0 always succeed."""

        active = self.pair_psis > 0
        if not np.any(active):
            return 1.0
        return float(np.exp(-np.sum(self.pair_psis[active] / self.budgets[active])))


def allocate_budgets(psis, p_max: float) -> np.ndarray:
    """
    Split p_max across groups proportionally to sqrt(Psi_i), which minimizes sum(Psi_i / P_i) on the simplex.
    Groups with Psi_i = 0 need no power.
    """

    psis = np.asarray(psis, dtype=np.float64)
    if psis.ndim != 1 or len(psis) == 0:
        raise InvalidParameterError(f"Expected a nonempty vector of exponents, got shape {psis.shape}")
    if np.any(psis < 0) or not np.all(np.isfinite(psis)):
        raise InvalidParameterError(f"Exponents must be nonnegative and finite, got {psis}")
    if not p_max > 0:
        raise InvalidParameterError(f"p_max must be positive, got {p_max}")

    roots = np.sqrt(psis)
    total = roots.sum()
    if total == 0:
        return np.zeros_like(psis)
    return roots / total * p_max


def default_pairing(k: int) -> List[Tuple[int, int]]:
    return [(i, i + 1) for i in range(0, k, 2)]


def plan_method1(scenario: SystemScenario,
                 pairing: Optional[Sequence[Tuple[int, int]]] = None) -> Tuple[StagePlan, PowerAllocation]:
    """
    Divide-and-conquer allocation: users are paired (input order by default), each pair gets one of K/2 equal
    subchannels, the intra-pair split comes from the closed form and the budgets from the inter-pair split.
    """

    k = scenario.k
    if k % 2 != 0:
        raise InvalidParameterError(f"Pairing needs an even number of users, got {k}")
    if pairing is None:
        pairing = default_pairing(k)
    pairing = [tuple(int(i) for i in pair) for pair in pairing]
    if any(len(pair) != 2 for pair in pairing) or sorted(i for pair in pairing for i in pair) != list(range(k)):
        raise InvalidParameterError(f"Pairing {pairing} is not a perfect matching of {k} users")

    w = k // 2
    alphas = np.zeros(k)
    solutions = []
    for i, j in pairing:
        u1, u2 = scenario.users[i], scenario.users[j]
        case = classify_pair(u1, u2, scenario.library, w)
        sol = solve_pair(case, pair_params(u1, u2, scenario.library, scenario.noise_power, w))
        alphas[i], alphas[j] = sol.decodable_alphas()
        solutions.append(sol)
        logging.debug(f"Pair ({i}, {j}): case {case.tag}, alpha={sol.alpha_star:.6f}, psi={sol.psi_star:.6g}")

    psis = np.array([sol.psi_star for sol in solutions])
    budgets = allocate_budgets(psis, scenario.p_max)
    plan = StagePlan(psis, budgets, w, solutions)
    return plan, PowerAllocation(alphas, pair_budgets=budgets, subchannel_count=w, groups=pairing)


def plan_oma(scenario: SystemScenario) -> Tuple[StagePlan, PowerAllocation]:
    """
    One user per subchannel. Each user needing its file has Psi_i = lambda_i * eps_i * beta_i on a 1/K
    subchannel; the budgets follow the same square-root split.
    """

    k = scenario.k
    eps = adjust_threshold(scenario.request_thresholds, k)
    psis = scenario.lambdas * eps * scenario.betas / k
    psis = np.where(scenario.self_cached, 0.0, psis)

    budgets = allocate_budgets(psis, scenario.p_max)
    alphas = np.where(scenario.self_cached, 0.0, 1.0)
    groups = [(i,) for i in range(k)]
    return StagePlan(psis, budgets, k), PowerAllocation(alphas, pair_budgets=budgets, subchannel_count=k,
                                                        groups=groups)


def oma_success_probability(scenario: SystemScenario) -> float:
    plan, _ = plan_oma(scenario)
    return math.exp(-np.sum(np.sqrt(plan.pair_psis)) ** 2 / scenario.p_max)
