from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


class InvalidParameterError(ValueError):
    """A parameter is out of its domain (non-positive rate, bad dimension, odd K for pairing, ...)."""


class MalformedAllocationError(ValueError):
    """A power allocation cannot be decoded as given (ties, bad sums, inconsistent groups)."""


class InfeasibleProblemError(ValueError):
    """No allocation satisfies the constraints of an optimization problem."""


@dataclass(frozen=True)
class FileLibrary:
    """
    The files a BS can serve, each with the SINR threshold needed to decode it over the full bandwidth.
    """

    thresholds: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))
        if len(self.thresholds) < 1:
            raise InvalidParameterError("File library must contain at least one file")
        for f, eps in enumerate(self.thresholds):
            if not np.isfinite(eps) or eps <= 0:
                raise InvalidParameterError(f"Threshold of file {f} must be positive and finite, got {eps}")

    @property
    def size(self) -> int:
        return len(self.thresholds)

    def threshold(self, f: int) -> float:
        return self.thresholds[f]

    @classmethod
    def arithmetic(cls, size=38, start=0.016, step=0.016) -> "FileLibrary":
        """Thresholds start, start + step, ... (the default library goes from 0.016 to 0.608)."""

        return cls(tuple(start + step * i for i in range(size)))


@dataclass(frozen=True)
class UserProfile:
    """
    A cache-enabled user. |h|^2 is exponential with rate `lam` unless `gain_variance` is given, in which case it is
    gamma distributed with mean 1/lam and that variance.
    """

    lam: float
    distance: float = 1.0
    pathloss_exp: float = 2.0
    cache: frozenset = field(default_factory=frozenset)
    request: int = 0
    cache_capacity: Optional[int] = None
    gain_variance: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "cache", frozenset(int(f) for f in self.cache))
        if not self.lam > 0:
            raise InvalidParameterError(f"Exponential rate must be positive, got {self.lam}")
        if not self.distance > 0:
            raise InvalidParameterError(f"Distance must be positive, got {self.distance}")
        if not self.pathloss_exp > 0:
            raise InvalidParameterError(f"Pathloss exponent must be positive, got {self.pathloss_exp}")
        if self.cache_capacity is not None and len(self.cache) > self.cache_capacity:
            raise InvalidParameterError(
                f"Cache holds {len(self.cache)} files but capacity is {self.cache_capacity}")
        if self.gain_variance is not None and not self.gain_variance > 0:
            raise InvalidParameterError(f"Gain variance must be positive, got {self.gain_variance}")

    @property
    def mean_gain(self) -> float:
        return 1.0 / self.lam

    @property
    def self_cached(self) -> bool:
        return self.request in self.cache

    def has_cached(self, f: int) -> bool:
        return f in self.cache

    def with_cache(self, cache) -> "UserProfile":
        return UserProfile(self.lam, self.distance, self.pathloss_exp, frozenset(cache), self.request,
                           self.cache_capacity, self.gain_variance)


@dataclass(frozen=True)
class SystemScenario:
    """
    One requesting-phase snapshot: users with their caches and requests, the library, the power budget and the
    full-bandwidth noise power.
    """

    users: Tuple[UserProfile, ...]
    library: FileLibrary
    p_max: float = 1.0
    noise_power: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(self.users))
        if len(self.users) < 1:
            raise InvalidParameterError("A scenario needs at least one user")
        if not self.p_max > 0:
            raise InvalidParameterError(f"p_max must be positive, got {self.p_max}")
        if not self.noise_power > 0:
            raise InvalidParameterError(f"Noise power must be positive, got {self.noise_power}")
        for i, user in enumerate(self.users):
            if not 0 <= user.request < self.library.size:
                raise InvalidParameterError(f"User {i} requests file {user.request} outside the library")
            if any(not 0 <= f < self.library.size for f in user.cache):
                raise InvalidParameterError(f"User {i} caches a file outside the library")

    @property
    def k(self) -> int:
        return len(self.users)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([u.lam for u in self.users])

    @property
    def betas(self) -> np.ndarray:
        """beta_i = d_i^gamma * sigma^2 over the full bandwidth."""

        return np.array([u.distance ** u.pathloss_exp * self.noise_power for u in self.users])

    @property
    def request_thresholds(self) -> np.ndarray:
        return np.array([self.library.threshold(u.request) for u in self.users])

    @property
    def self_cached(self) -> np.ndarray:
        return np.array([u.self_cached for u in self.users], dtype=bool)

    def cache_matrix(self) -> np.ndarray:
        """C[i, j] = 1 iff user i has cached the file requested by user j."""

        return np.array([[1 if u.has_cached(v.request) else 0 for v in self.users] for u in self.users],
                        dtype=np.int64)

    def without_caches(self) -> "SystemScenario":
        return SystemScenario(tuple(u.with_cache(()) for u in self.users), self.library, self.p_max,
                              self.noise_power, self.rng_seed)


@dataclass
class PowerAllocation:
    """
    Power fractions per user. Users are partitioned into co-channel groups; group g transmits with
    `pair_budgets[g]` watts (or p_max when budgets are absent) on one of `subchannel_count` equal subchannels.
    """

    alphas: np.ndarray
    pair_budgets: Optional[np.ndarray] = None
    subchannel_count: int = 1
    groups: Optional[List[Tuple[int, ...]]] = None

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.pair_budgets is not None:
            self.pair_budgets = np.asarray(self.pair_budgets, dtype=np.float64)
        if self.subchannel_count < 1:
            raise InvalidParameterError(f"Subchannel count must be >= 1, got {self.subchannel_count}")
        if np.any(self.alphas < 0) or np.any(self.alphas > 1 + 1e-12):
            raise MalformedAllocationError(f"Power fractions must lie in [0, 1], got {self.alphas}")

    def resolve_groups(self, groups: Optional[Sequence[Sequence[int]]] = None) -> List[Tuple[int, ...]]:
        """Explicit groups win over the stored ones; the default is one group holding every user."""

        if groups is None:
            groups = self.groups
        if groups is None:
            groups = [tuple(range(len(self.alphas)))]
        groups = [tuple(int(i) for i in g) for g in groups]

        members = sorted(i for g in groups for i in g)
        if members != list(range(len(self.alphas))):
            raise MalformedAllocationError(f"Groups {groups} are not a partition of {len(self.alphas)} users")
        if self.pair_budgets is not None and len(self.pair_budgets) != len(groups):
            raise MalformedAllocationError(
                f"{len(self.pair_budgets)} budgets given for {len(groups)} co-channel groups")
        return groups

    def group_budget(self, g: int, p_max: float) -> float:
        if self.pair_budgets is None:
            return p_max
        return float(self.pair_budgets[g])

    def powers(self, p_max: float, groups=None) -> np.ndarray:
        """Watt-level power alpha_i * P_group per user."""

        result = np.zeros_like(self.alphas)
        for g, members in enumerate(self.resolve_groups(groups)):
            for i in members:
                result[i] = self.alphas[i] * self.group_budget(g, p_max)
        return result

    def validate(self, p_max: float, groups=None, tol=1e-9):
        """
        Check the fraction sums per group and the budget sum.
        """

        for g, members in enumerate(self.resolve_groups(groups)):
            total = float(np.sum(self.alphas[list(members)]))
            if total != 0 and abs(total - 1) > tol:
                raise MalformedAllocationError(f"Fractions of group {members} sum to {total}, expected 1")
        if self.pair_budgets is not None:
            if np.any(self.pair_budgets < 0):
                raise MalformedAllocationError(f"Negative pair budget in {self.pair_budgets}")
            budget = float(np.sum(self.pair_budgets))
            if budget != 0 and abs(budget - p_max) > tol * p_max:
                raise MalformedAllocationError(f"Pair budgets sum to {budget}, expected {p_max}")


@dataclass
class DecodeOutcome:
    """Per-user success flags of one channel draw."""

    success: np.ndarray

    @property
    def success_count(self) -> int:
        return int(np.count_nonzero(self.success))

    @property
    def all_success(self) -> bool:
        return bool(np.all(self.success))


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """
    An independent generator keyed by (seed, experiment id, replicate id, ...), so parallel replicates do not
    depend on scheduling.
    """

    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys)))
