import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from cachenoma.base import FileLibrary, InvalidParameterError, UserProfile
from cachenoma.model import TIE_STAGGER, adjust_threshold

# Both users have their own request cached, nothing to send
T1 = "T1"
# Exactly one user needs a transmission
T2 = "T2"
# Same uncached file requested by both, one signal serves them
T3 = "T3"
# User 1 cached f2, user 2 missed
C1 = "C1"
# User 2 cached f1, user 1 missed
C2 = "C2"
# Mutual caching
C3 = "C3"
# No useful cache at all
C4 = "C4"

PAIR_TAGS = (T1, T2, T3, C1, C2, C3, C4)

HIGH = "high"
LOW = "low"


@dataclass(frozen=True)
class PairParams:
    """
    Per-subchannel pair parameters: exponential rates, (adjusted) thresholds and noise terms beta = d^gamma sigma^2/W.
    """

    lam1: float
    lam2: float
    eps1: float
    eps2: float
    beta1: float
    beta2: float

    def __post_init__(self):
        for name in ("lam1", "lam2", "eps1", "eps2", "beta1", "beta2"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidParameterError(f"Pair parameter {name} must be positive and finite, got {value}")

    @property
    def a(self) -> float:
        return self.lam1 * self.eps1 * self.beta1

    @property
    def b(self) -> float:
        return self.lam2 * self.eps2 * self.beta2

    @property
    def zeta(self) -> float:
        return self.a / self.b

    def swapped(self) -> "PairParams":
        return PairParams(self.lam2, self.lam1, self.eps2, self.eps1, self.beta2, self.beta1)


@dataclass(frozen=True)
class PairCase:
    """
    Classification of a two-user situation. Cases C1 to C4 are stated for the relabeled pair (zeta >= 1); `swapped`
    tells whether the relabeling exchanged the users. For T2, `uncached_user` (0 or 1, original labels) is the user
    who still needs its file.
    """

    tag: str
    swapped: bool = False
    uncached_user: Optional[int] = None

    def __post_init__(self):
        if self.tag not in PAIR_TAGS:
            raise InvalidParameterError(f"Unknown pair case {self.tag}")
        if self.tag == T2 and self.uncached_user not in (0, 1):
            raise InvalidParameterError(f"Case T2 needs the uncached user, got {self.uncached_user}")


@dataclass(frozen=True)
class PairSolution:
    """
    Optimal split of a pair budget. `alpha_star` is the fraction of the pair's first user in original labels, and the
    pair succeeds with probability exp(-psi_star / P).
    """

    alpha_star: float
    psi_star: float
    case: PairCase
    branch: Optional[str] = None

    def alphas(self) -> Tuple[float, float]:
        if self.case.tag == T1:
            return 0.0, 0.0
        return self.alpha_star, 1.0 - self.alpha_star

    def decodable_alphas(self, stagger: float = TIE_STAGGER) -> Tuple[float, float]:
        """
        Like `alphas`, but an exact 0.5 split is moved by `stagger` toward the selected branch so that the decode
        order is defined.
        """

        alpha = self.alpha_star
        if self.case.tag in (C1, C2, C3, C4) and alpha == 0.5:
            sign = 1.0 if self.branch == HIGH else -1.0
            if self.case.swapped:
                sign = -sign
            alpha = 0.5 + sign * stagger
        if self.case.tag == T1:
            return 0.0, 0.0
        return alpha, 1.0 - alpha


def pair_params(u1: UserProfile, u2: UserProfile, library: FileLibrary, noise_power: float = 1.0,
                subchannels: int = 1) -> PairParams:
    """
    Pair parameters on one of `subchannels` equal subchannels: thresholds are adjusted and the noise is split.
    """

    return PairParams(
        lam1=u1.lam, lam2=u2.lam,
        eps1=float(adjust_threshold(library.threshold(u1.request), subchannels)),
        eps2=float(adjust_threshold(library.threshold(u2.request), subchannels)),
        beta1=u1.distance ** u1.pathloss_exp * noise_power / subchannels,
        beta2=u2.distance ** u2.pathloss_exp * noise_power / subchannels)


def classify_pair(u1: UserProfile, u2: UserProfile, library: FileLibrary, subchannels: int = 1) -> PairCase:
    """
    Decide which of T1-T3 or C1-C4 applies. Users are relabeled so that zeta >= 1 before the cross-caching
    pattern is read, so the tag always refers to the relabeled pair.
    """

    if u1.self_cached and u2.self_cached:
        return PairCase(T1)
    if u1.self_cached or u2.self_cached:
        return PairCase(T2, uncached_user=1 if u1.self_cached else 0)
    if u1.request == u2.request:
        return PairCase(T3)

    # sigma^2 and the 1/W noise split cancel in zeta
    swapped = pair_params(u1, u2, library, subchannels=subchannels).zeta < 1
    if swapped:
        u1, u2 = u2, u1

    first_has_second = u1.has_cached(u2.request)
    second_has_first = u2.has_cached(u1.request)
    if first_has_second and second_has_first:
        tag = C3
    elif first_has_second:
        tag = C1
    elif second_has_first:
        tag = C2
    else:
        tag = C4
    return PairCase(tag, swapped=swapped)


def _ratio(num, den):
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)


def branch_exponent(tag: str, params: PairParams, alpha, branch: str):
    """
    Exponent of the pair success probability on one side of alpha = 0.5. HIGH means user 1's signal is the
    stronger one and is decoded first. Infeasible points evaluate to inf.
    """

    alpha = np.asarray(alpha, dtype=np.float64)
    a, b = params.a, params.b
    e1, e2 = params.eps1, params.eps2
    # user 2 decoding f1 and user 1 decoding f2 as interference
    c21 = params.lam2 * e1 * params.beta2
    c12 = params.lam1 * e2 * params.beta1
    den_high = (1 + e1) * alpha - e1
    den_low = 1 - (1 + e2) * alpha

    if tag == C3:
        return _ratio(a, alpha) + _ratio(b, 1 - alpha)
    if tag == C1:
        if branch == HIGH:
            return _ratio(a, alpha) + np.maximum(_ratio(b, 1 - alpha), _ratio(c21, den_high))
        return _ratio(a, alpha) + _ratio(b, den_low)
    if tag == C2:
        if branch == HIGH:
            return _ratio(a, den_high) + _ratio(b, 1 - alpha)
        return np.maximum(_ratio(c12, den_low), _ratio(a, alpha)) + _ratio(b, 1 - alpha)
    if tag == C4:
        if branch == HIGH:
            return _ratio(a, den_high) + np.maximum(_ratio(c21, den_high), _ratio(b, 1 - alpha))
        return np.maximum(_ratio(c12, den_low), _ratio(a, alpha)) + _ratio(b, den_low)
    raise InvalidParameterError(f"Case {tag} has no power split")


def case_exponent(tag: str, params: PairParams, alpha):
    """
    Exponent Psi(alpha) of the pair success probability exp(-Psi/P), for a pair labeled the way `tag` is stated.
    At alpha = 0.5 the better of the two decode orders is taken. For T2 the first user is the one needing its file
    and alpha is its share; T3 does not depend on alpha.
    """

    alpha = np.asarray(alpha, dtype=np.float64)
    if tag == T1:
        return np.zeros_like(alpha)
    if tag == T2:
        return _ratio(params.a, alpha)
    if tag == T3:
        # both users request f1, so eps1 == eps2
        return np.full_like(alpha, params.eps1 * (params.lam1 * params.beta1 + params.lam2 * params.beta2))

    high = branch_exponent(tag, params, alpha, HIGH)
    low = branch_exponent(tag, params, alpha, LOW)
    outside = (alpha <= 0) | (alpha >= 1)
    psi = np.where(alpha > 0.5, high, np.where(alpha < 0.5, low, np.minimum(high, low)))
    return np.where(outside, np.inf, psi)


def _candidates(tag: str, p: PairParams) -> Tuple[float, float, float, float]:
    """Closed-form candidates (z1, g1) on the high branch and (z2, g2) on the low branch."""

    a, b, e1, e2 = p.a, p.b, p.eps1, p.eps2
    zeta = p.zeta
    r = math.sqrt(zeta)

    if tag == C1:
        z1 = max(1 - 1 / (r + 1), 1 - 1 / (1 + e1 + e1 / e2))
        g1 = a / z1 + b / (1 - z1)
        z2 = min((1 - 1 / (math.sqrt(zeta * (1 + e2)) + 1)) / (1 + e2), 0.5)
        g2 = a / z2 + b / (1 - (1 + e2) * z2)
    elif tag == C2:
        z1 = 1 - 1 / (math.sqrt(zeta * (1 + e1)) + 1 + e1)
        g1 = a / ((1 + e1) * z1 - e1) + b / (1 - z1)
        z2 = min(1 / (1 + e2 + e2 / e1), 0.5)
        g2 = a / z2 + b / (1 - z2)
    elif tag == C4:
        z1 = 1 - min(1 / (math.sqrt(1 + e1) * (r + math.sqrt(1 + e1))), 1 / (1 + e1 + e1 / e2))
        g1 = a / ((1 + e1) * z1 - e1) + b / (1 - z1)
        z2 = min((1 - 1 / (math.sqrt(zeta * (1 + e2)) + 1)) / (1 + e2), 1 / (1 + e2 + e2 / e1), 0.5)
        g2 = a / z2 + b / (1 - (1 + e2) * z2)
    else:
        raise InvalidParameterError(f"Case {tag} has no closed-form candidates")

    return z1, g1, z2, g2


def solve_pair(case: PairCase, params: PairParams) -> PairSolution:
    """
    Optimal power split of a pair. `params` use the original labels; they are relabeled internally when the case
    was classified with a swap and the returned alpha is mapped back.
    """

    if case.tag == T1:
        return PairSolution(0.0, 0.0, case)
    if case.tag == T2:
        needy = params if case.uncached_user == 0 else params.swapped()
        return PairSolution(1.0 if case.uncached_user == 0 else 0.0, needy.a, case)
    if case.tag == T3:
        return PairSolution(1.0, float(case_exponent(T3, params, 1.0)), case)

    p = params.swapped() if case.swapped else params
    assert p.zeta >= 1 - 1e-12, f"Case {case.tag} expects zeta >= 1 after relabeling, got {p.zeta}"

    if case.tag == C3:
        alpha, branch = 1 - 1 / (math.sqrt(p.zeta) + 1), HIGH
    else:
        z1, g1, z2, g2 = _candidates(case.tag, p)
        alpha, branch = (z1, HIGH) if g1 <= g2 else (z2, LOW)
        logging.debug(f"Case {case.tag}: high branch {z1:.6f} -> {g1:.6g}, low branch {z2:.6f} -> {g2:.6g}")

    psi = float(branch_exponent(case.tag, p, alpha, branch))
    assert np.isfinite(psi), f"Closed form for {case.tag} landed outside its feasible region at alpha={alpha}"

    if case.swapped:
        alpha = 1 - alpha
    return PairSolution(float(alpha), psi, case, branch)


def pair_success_probability(sol: PairSolution, p: float) -> float:
    if not p > 0:
        raise InvalidParameterError(f"Pair power must be positive, got {p}")
    return math.exp(-sol.psi_star / p)
