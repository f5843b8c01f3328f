import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from cachenoma.base import (DecodeOutcome, InvalidParameterError, MalformedAllocationError, PowerAllocation,
                            SystemScenario)

# Relative slack on the decode inequality, so that exact SINR equality survives floating point rounding
BOUNDARY_SLACK = 1e-12

# Offset used to separate equal power fractions before they reach the decoder
TIE_STAGGER = 1e-9


def adjust_threshold(eps, w: int):
    """
    SINR threshold needed to decode a file on 1/W of the bandwidth, given its full-bandwidth threshold.
    """

    if w < 1:
        raise InvalidParameterError(f"Subchannel count must be >= 1, got {w}")
    if w == 1:
        return eps
    return np.expm1(w * np.log1p(eps))


def sample_channel_gains(scenario: SystemScenario, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """
    Draw |h_i|^2 for every user, shape (K,) for a single draw or (n, K) for n independent draws.
    """

    size = (1 if n is None else n, scenario.k)
    if all(u.gain_variance is None for u in scenario.users):
        gains = rng.standard_exponential(size) / scenario.lambdas
    else:
        gains = np.empty(size)
        for i, user in enumerate(scenario.users):
            if user.gain_variance is None:
                gains[:, i] = rng.exponential(user.mean_gain, size[0])
            else:
                shape = user.mean_gain ** 2 / user.gain_variance
                gains[:, i] = rng.gamma(shape, user.gain_variance / user.mean_gain, size[0])

    return gains[0] if n is None else gains


def group_signals(alloc: PowerAllocation, scenario: SystemScenario, members: Sequence[int],
                  budget: float) -> List[Tuple[int, float]]:
    """
    The superposed signals of one co-channel group as (file, watts), strongest first. Users asking for the same
    file share one signal carrying the sum of their powers.
    """

    per_file = {}
    for i in members:
        power = alloc.alphas[i] * budget
        if power > 0:
            f = scenario.users[i].request
            per_file[f] = per_file.get(f, 0.0) + power

    signals = sorted(per_file.items(), key=lambda x: x[1], reverse=True)
    for (f1, p1), (f2, p2) in zip(signals, signals[1:]):
        if p1 == p2:
            raise MalformedAllocationError(
                f"Files {f1} and {f2} share the power {p1} in group {tuple(members)}; the decode order is undefined")
    return signals


def decode_success(gains: np.ndarray, alloc: PowerAllocation, scenario: SystemScenario,
                   groups: Optional[Sequence[Sequence[int]]] = None) -> np.ndarray:
    """
    Vectorized SIC over many channel draws. Returns a boolean (n, K) matrix of per-user successes.

    Each user walks the signals of its group from the strongest to the weakest, removes the ones it has cached
    without decoding and must decode every other one until its own file is recovered.
    """

    gains = np.atleast_2d(np.asarray(gains, dtype=np.float64))
    n, k = gains.shape
    if k != scenario.k:
        raise InvalidParameterError(f"Gains for {k} users given, scenario has {scenario.k}")

    groups = alloc.resolve_groups(groups)
    w = alloc.subchannel_count
    betas = scenario.betas / w
    success = np.zeros((n, k), dtype=bool)

    for g, members in enumerate(groups):
        signals = group_signals(alloc, scenario, members, alloc.group_budget(g, scenario.p_max))
        files = [f for f, _ in signals]

        for i in members:
            user = scenario.users[i]
            if user.self_cached:
                success[:, i] = True
                continue
            if user.request not in files:
                continue

            h = gains[:, i]
            ok = np.ones(n, dtype=bool)
            for pos, (f, p) in enumerate(signals):
                if user.has_cached(f):
                    continue
                interference = sum(q for f_weak, q in signals[pos + 1:] if not user.has_cached(f_weak))
                eps = adjust_threshold(scenario.library.threshold(f), w)
                ok &= h * p >= eps * (h * interference + betas[i]) * (1 - BOUNDARY_SLACK)
                if f == user.request:
                    break
            success[:, i] = ok

    return success


def sic_decode(gains: np.ndarray, alloc: PowerAllocation, scenario: SystemScenario,
               co_channel_groups: Optional[Sequence[Sequence[int]]] = None) -> DecodeOutcome:
    """
    Decode a single channel draw.
    """

    gains = np.asarray(gains, dtype=np.float64)
    assert gains.ndim == 1, f"Expected a single draw, got shape {gains.shape}"
    return DecodeOutcome(decode_success(gains, alloc, scenario, co_channel_groups)[0])


def binomial_standard_error(p: float, n: int) -> float:
    return math.sqrt(max(p * (1 - p), 0.0) / n)


def estimate_success_probability(scenario: SystemScenario, alloc: PowerAllocation,
                                 groups: Optional[Sequence[Sequence[int]]] = None, n_samples: int = 10_000,
                                 rng: Optional[np.random.Generator] = None) -> Tuple[float, float]:
    """
    Monte Carlo estimate of the probability that every user decodes its request, with its binomial standard error.
    """

    if n_samples < 1:
        raise InvalidParameterError(f"n_samples must be >= 1, got {n_samples}")
    if rng is None:
        rng = np.random.default_rng(scenario.rng_seed)

    alloc.validate(scenario.p_max, groups)
    gains = sample_channel_gains(scenario, rng, n_samples)
    all_success = decode_success(gains, alloc, scenario, groups).all(axis=1)

    p = float(np.mean(all_success))
    logging.debug(f"Success probability {p} over {n_samples} draws")
    return p, binomial_standard_error(p, n_samples)


def estimate_success_users(scenario: SystemScenario, alloc: PowerAllocation,
                           groups: Optional[Sequence[Sequence[int]]] = None, n_samples: int = 500,
                           rng: Optional[np.random.Generator] = None) -> Tuple[float, float]:
    """
    Monte Carlo mean of the number of users who decode their request, with its standard error.
    """

    if rng is None:
        rng = np.random.default_rng(scenario.rng_seed)

    gains = sample_channel_gains(scenario, rng, n_samples)
    counts = decode_success(gains, alloc, scenario, groups).sum(axis=1)
    se = float(np.std(counts, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(np.mean(counts)), se


def break_ties(alphas, priority: Optional[Sequence[int]] = None, stagger: float = TIE_STAGGER) -> np.ndarray:
    """
    Separate exactly equal nonzero fractions by multiples of `stagger`; earlier users in `priority` get the larger
    share. The total is preserved.
    """

    alphas = np.array(alphas, dtype=np.float64)
    total = alphas.sum()
    if priority is None:
        priority = range(len(alphas))
    rank = {i: r for r, i in enumerate(priority)}

    changed = False
    for value in np.unique(alphas[alphas > 0]):
        tied = sorted(np.flatnonzero(alphas == value), key=lambda i: rank[i])
        if len(tied) < 2:
            continue
        changed = True
        for r, i in enumerate(tied):
            alphas[i] = value + (len(tied) - 1 - r) * stagger

    if changed and total > 0:
        alphas *= total / alphas.sum()
    return alphas
