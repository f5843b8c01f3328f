import itertools
import logging
import math
from dataclasses import dataclass
from multiprocessing import Pool
from typing import Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np

from cachenoma.base import InfeasibleProblemError, InvalidParameterError, SystemScenario
from cachenoma.model import TIE_STAGGER, break_ties

DEFAULT_XI = 1e-6
MAX_EXACT_USERS = 8
AGGREGATES = ("max", "sum")


@dataclass
class MinlpInstance:
    """
    Full-bandwidth allocation problem. cache[i, j] = 1 iff user i has cached the file requested by user j, eps[j] is
    the threshold of that file. xi is the margin every SINR denominator must keep above zero.
    """

    cache: np.ndarray
    eps: np.ndarray
    lambdas: np.ndarray
    betas: np.ndarray
    xi: float = DEFAULT_XI

    def __post_init__(self):
        self.cache = np.asarray(self.cache, dtype=np.int64)
        self.eps = np.asarray(self.eps, dtype=np.float64)
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        k = len(self.eps)
        if self.cache.shape != (k, k):
            raise InvalidParameterError(f"Cache matrix must be {k}x{k}, got {self.cache.shape}")
        if not np.isin(self.cache, (0, 1)).all():
            raise InvalidParameterError("Cache matrix must be binary")
        if len(self.lambdas) != k or len(self.betas) != k:
            raise InvalidParameterError("eps, lambdas and betas must have the same length")
        for name in ("eps", "lambdas", "betas"):
            if np.any(getattr(self, name) <= 0):
                raise InvalidParameterError(f"All {name} must be positive")
        if not self.xi > 0:
            raise InvalidParameterError(f"xi must be positive, got {self.xi}")

    @property
    def k(self) -> int:
        return len(self.eps)

    @property
    def active(self) -> np.ndarray:
        """Users who still need their request, i.e. have not cached it."""

        return np.diag(self.cache) == 0

    @classmethod
    def from_scenario(cls, scenario: SystemScenario, xi: float = DEFAULT_XI) -> "MinlpInstance":
        return cls(scenario.cache_matrix(), scenario.request_thresholds, scenario.lambdas, scenario.betas, xi)


@dataclass
class ExactSolution:
    order: Tuple[int, ...]
    psi: np.ndarray
    alpha: np.ndarray
    value: float
    enumerated: int
    p_max: float = 1.0

    @property
    def success_probability(self) -> float:
        return math.exp(-self.value / self.p_max)

    def decodable_alpha(self, stagger: float = TIE_STAGGER) -> np.ndarray:
        """Equal fractions are separated along the chosen order before they are handed to the decoder."""

        return break_ties(self.alpha, self.order, stagger)


def psi_from_order(order: Sequence[int], k: int) -> np.ndarray:
    """
    Ordering matrix of a decode order given strongest first; users missing from `order` rank last by index.
    psi[i, j] = 1 iff user i ranks before user j, and the diagonal is 0.
    """

    ranking = list(order) + [i for i in range(k) if i not in order]
    assert sorted(ranking) == list(range(k)), f"Order {order} is not a permutation of a subset of {k} users"
    position = np.empty(k, dtype=np.int64)
    position[ranking] = np.arange(k)
    return (position[:, None] < position[None, :]).astype(np.int64)


def _structure(instance: MinlpInstance, psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    required[i, j]: user i must decode the signal of user j. weights[i, j, k]: signal k interferes with that
    decode, i.e. it is weaker than j and user i has not cached it.
    """

    c = instance.cache
    active = instance.active
    required = (1 - c) * (1 - psi) * active[:, None] * active[None, :]
    off_diagonal = 1 - np.eye(instance.k, dtype=np.int64)
    weights = (1 - c)[:, None, :] * (psi * off_diagonal)[None, :, :]
    return required.astype(bool), weights


def denominators(instance: MinlpInstance, psi: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """den[i, j] = alpha_j - eps_j * sum_k weights[i, j, k] alpha_k."""

    _, weights = _structure(instance, psi)
    return alpha[None, :] - instance.eps[None, :] * (weights @ alpha)


def objective(instance: MinlpInstance, psi: np.ndarray, alpha, aggregate: str = "max",
              tol: float = 1e-9) -> float:
    """
    Success exponent of a full-bandwidth allocation; the success probability is exp(-value / p_max).

    The default `aggregate="max"` lets user i contribute lambda_i times its hardest decode threshold, which is
    exact for the success probability. `aggregate="sum"` is the literal double sum over every signal user i decodes,
    an upper bound on the exact exponent; pass it to reproduce that formulation.
    """

    if aggregate not in AGGREGATES:
        raise InvalidParameterError(f"Unknown aggregate {aggregate}, expected one of {AGGREGATES}")
    psi = np.asarray(psi, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=np.float64)

    required, _ = _structure(instance, psi)
    den = denominators(instance, psi, alpha)
    if np.any(den[required] < instance.xi - tol):
        i, j = np.argwhere(required & (den < instance.xi - tol))[0]
        raise InfeasibleProblemError(f"Denominator of user {i} decoding signal {j} is {den[i, j]:.3g} < xi")

    terms = np.zeros_like(den)
    terms[required] = (instance.eps[None, :] * instance.betas[:, None] / np.where(required, den, 1.0))[required]
    per_user = terms.max(axis=1) if aggregate == "max" else terms.sum(axis=1)
    return float(np.dot(instance.lambdas, per_user))


def check_constraints(instance: MinlpInstance, psi: np.ndarray, alpha, tol: float = 1e-9):
    """
    Raise InfeasibleProblemError if (psi, alpha) breaks the ordering, simplex, margin or cache constraints.
    """

    psi = np.asarray(psi)
    alpha = np.asarray(alpha, dtype=np.float64)
    k = instance.k

    if not np.isin(psi, (0, 1)).all():
        raise InfeasibleProblemError("Ordering matrix must be binary")
    if np.any(np.diag(psi) != 0):
        raise InfeasibleProblemError("Ordering matrix must have a zero diagonal")
    off = ~np.eye(k, dtype=bool)
    if np.any((psi + psi.T)[off] != 1):
        raise InfeasibleProblemError("Ordering matrix must satisfy psi_ij + psi_ji = 1")
    if np.any(alpha < -tol):
        raise InfeasibleProblemError(f"Negative fraction in {alpha}")
    if np.any(instance.active) and abs(alpha.sum() - 1) > tol:
        raise InfeasibleProblemError(f"Fractions sum to {alpha.sum()}, expected 1")
    if np.any(np.abs(alpha[~instance.active]) > tol):
        raise InfeasibleProblemError("Users with their own request cached must get no power")
    violated = (psi == 1) & (alpha[:, None] < alpha[None, :] - tol)
    if np.any(violated):
        i, j = np.argwhere(violated)[0]
        raise InfeasibleProblemError(f"psi[{i}, {j}] = 1 but alpha_{i} < alpha_{j}")

    required, _ = _structure(instance, psi)
    den = denominators(instance, psi, alpha)
    if np.any(den[required] < instance.xi - tol):
        raise InfeasibleProblemError("A SINR denominator falls below xi")


def solve_ordering(instance: MinlpInstance, order: Sequence[int],
                   aggregate: str = "max") -> Optional[Tuple[float, np.ndarray]]:
    """
    Minimize the exponent for one fixed decode order of the active users. The problem is convex: every term is a
    positive constant over an affine function of alpha. Returns None when the order admits no feasible point.
    """

    k = instance.k
    psi = psi_from_order(order, k)
    required, weights = _structure(instance, psi)

    a = cp.Variable(k)
    constraints = [cp.sum(a) == 1, a >= 0]
    constraints += [a[i] == 0 for i in range(k) if not instance.active[i]]
    constraints += [a[order[r]] >= a[order[r + 1]] for r in range(len(order) - 1)]

    user_terms = []
    for i in range(k):
        terms = []
        for j in np.flatnonzero(required[i]):
            den = a[j] - instance.eps[j] * (weights[i, j] @ a)
            constraints.append(den >= instance.xi)
            terms.append(instance.eps[j] * instance.betas[i] * cp.inv_pos(den))
        if not terms:
            continue
        if aggregate == "max":
            user_terms.append(instance.lambdas[i] * (cp.maximum(*terms) if len(terms) > 1 else terms[0]))
        else:
            user_terms.append(instance.lambdas[i] * cp.sum(cp.hstack(terms)))

    problem = cp.Problem(cp.Minimize(cp.sum(cp.hstack(user_terms))), constraints)
    try:
        problem.solve()
    except cp.SolverError as e:
        logging.debug(f"Order {tuple(order)}: solver failed ({e})")
        return None

    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or a.value is None:
        logging.debug(f"Order {tuple(order)}: status {problem.status}")
        return None

    alpha = np.clip(np.asarray(a.value, dtype=np.float64), 0.0, None)
    alpha[~instance.active] = 0.0
    alpha /= alpha.sum()
    try:
        value = objective(instance, psi, alpha, aggregate, tol=1e-7)
    except InfeasibleProblemError:
        value = float(problem.value)
    return value, alpha


def _solve_ordering_task(args):
    instance, order, aggregate = args
    return solve_ordering(instance, order, aggregate)


def solve_exact(instance: MinlpInstance, p_max: float = 1.0, aggregate: str = "max",
                workers: int = 1) -> ExactSolution:
    """
    Exact full-bandwidth allocation by enumerating every decode order of the active users and solving the convex
    inner problem for each. Ties between orders keep the first one in lexicographic order.
    """

    if not p_max > 0:
        raise InvalidParameterError(f"p_max must be positive, got {p_max}")
    active = [int(i) for i in np.flatnonzero(instance.active)]
    if len(active) > MAX_EXACT_USERS:
        raise InvalidParameterError(
            f"Exact enumeration supports at most {MAX_EXACT_USERS} active users, got {len(active)}")

    if not active:
        return ExactSolution((), psi_from_order((), instance.k), np.zeros(instance.k), 0.0, 1, p_max)

    orders = list(itertools.permutations(active))
    tasks = [(instance, order, aggregate) for order in orders]
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_solve_ordering_task, tasks)
    else:
        results = [_solve_ordering_task(t) for t in tasks]

    best: Optional[ExactSolution] = None
    for order, result in zip(orders, results):
        if result is None:
            continue
        value, alpha = result
        if best is None or value < best.value:
            best = ExactSolution(order, psi_from_order(order, instance.k), alpha, value, len(orders), p_max)

    if best is None:
        raise InfeasibleProblemError(f"None of the {len(orders)} decode orders admits a feasible allocation")

    logging.info(f"Exact solve over {len(orders)} orders: best order {best.order}, exponent {best.value:.6g}")
    return best


def enumeration_count(instance: MinlpInstance) -> int:
    return math.factorial(int(np.count_nonzero(instance.active)))
