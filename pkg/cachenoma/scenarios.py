import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from cachenoma.base import FileLibrary, InvalidParameterError, SystemScenario, UserProfile

REQUEST_DISTS = ("uniform", "zipf")
# random: up to C_max random files, full: exactly C_max random files, lowest_index: files 0, 1, ... up to C_max
CACHE_POLICIES = ("random", "full", "lowest_index", "none")

DEFAULT_LIBRARY = FileLibrary.arithmetic()


def zipf_probabilities(n: int, skew: float) -> np.ndarray:
    """P(file k) proportional to (k+1)^-skew for k = 0..n-1; skew 0 is uniform."""

    if n < 1:
        raise InvalidParameterError(f"Library size must be >= 1, got {n}")
    if skew < 0:
        raise InvalidParameterError(f"Zipf skew must be >= 0, got {skew}")
    weights = np.arange(1, n + 1, dtype=np.float64) ** -skew
    return weights / weights.sum()


def _cycled(values, k):
    values = tuple(values)
    return tuple(values[i % len(values)] for i in range(k))


@dataclass(frozen=True)
class ScenarioFamily:
    """
    Random requesting-phase snapshots: fixed channel statistics per user, random requests and cache contents.
    Per-user tuples are cycled over the K users.
    """

    k: int
    channel_means: Tuple[float, ...] = (1.0,)
    cache_capacities: Tuple[int, ...] = (2,)
    library: FileLibrary = field(default_factory=lambda: DEFAULT_LIBRARY)
    p_max: float = 1.0
    noise_power: float = 1.0
    distances: Tuple[float, ...] = (1.0,)
    pathloss_exp: float = 2.0
    request_dist: str = "uniform"
    zipf_skew: float = 0.0
    cache_policy: str = "random"
    gain_variances: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.k < 1:
            raise InvalidParameterError(f"K must be >= 1, got {self.k}")
        if self.request_dist not in REQUEST_DISTS:
            raise InvalidParameterError(f"Unknown request distribution {self.request_dist}")
        if self.cache_policy not in CACHE_POLICIES:
            raise InvalidParameterError(f"Unknown cache policy {self.cache_policy}")
        if any(m <= 0 for m in self.channel_means):
            raise InvalidParameterError(f"Channel means must be positive, got {self.channel_means}")
        if any(c < 0 or c > self.library.size for c in self.cache_capacities):
            raise InvalidParameterError(f"Cache capacities must lie in [0, {self.library.size}]")

    def request_probabilities(self) -> np.ndarray:
        skew = self.zipf_skew if self.request_dist == "zipf" else 0.0
        return zipf_probabilities(self.library.size, skew)

    def profiles(self):
        """Users of the family with no cache and request 0; draw fills both in."""

        means = _cycled(self.channel_means, self.k)
        capacities = _cycled(self.cache_capacities, self.k)
        distances = _cycled(self.distances, self.k)
        variances = _cycled(self.gain_variances, self.k) if self.gain_variances else (None,) * self.k
        return [UserProfile(1.0 / m, d, self.pathloss_exp, frozenset(), 0, c, v)
                for m, d, c, v in zip(means, distances, capacities, variances)]

    def draw_cache(self, capacity: int, rng: np.random.Generator) -> frozenset:
        n = self.library.size
        if self.cache_policy == "none" or capacity == 0:
            return frozenset()
        if self.cache_policy == "lowest_index":
            return frozenset(range(capacity))
        count = capacity if self.cache_policy == "full" else int(rng.integers(0, capacity + 1))
        return frozenset(rng.choice(n, size=count, replace=False).tolist())

    def draw(self, rng: np.random.Generator, seed: int = 0) -> SystemScenario:
        probs = self.request_probabilities()
        users = []
        for profile in self.profiles():
            cache = self.draw_cache(profile.cache_capacity, rng)
            request = int(rng.choice(self.library.size, p=probs))
            users.append(replace(profile, cache=cache, request=request))
        return SystemScenario(tuple(users), self.library, self.p_max, self.noise_power, seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["library"] = list(self.library.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioFamily":
        d = dict(d)
        if "library" in d:
            d["library"] = FileLibrary(tuple(d["library"]))
        for key in ("channel_means", "cache_capacities", "distances", "gain_variances"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidParameterError(f"Malformed scenario family: {e}") from e


# Paired users with exponential gains of mean 1 and 2, repeated for every pair
FIG4_FAMILY = ScenarioFamily(k=4, channel_means=(1.0, 2.0), cache_capacities=(10,), cache_policy="full")

# Three users with means 1, 2, 3 and room for two files each
FIG5_FAMILY = ScenarioFamily(k=3, channel_means=(1.0, 2.0, 3.0), cache_capacities=(2,))

# Two users with means 1 and 2; FIG7 fills both caches at random, FIG8 caches the most popular files
FIG7_FAMILY = ScenarioFamily(k=2, channel_means=(1.0, 2.0), cache_capacities=(2,), cache_policy="full")
FIG8_FAMILY = ScenarioFamily(k=2, channel_means=(1.0, 2.0), cache_capacities=(2,), request_dist="zipf",
                             zipf_skew=1.0, cache_policy="lowest_index")

# Four users of mean 3: trained with a narrow gamma spread, evaluated with exponential gains
FIG9_TRAIN_FAMILY = ScenarioFamily(k=4, channel_means=(3.0,), cache_capacities=(2,), gain_variances=(0.1,))
FIG9_FAMILY = ScenarioFamily(k=4, channel_means=(3.0,), cache_capacities=(2,))

PRESET_FAMILIES = {
    "fig4": FIG4_FAMILY,
    "fig5": FIG5_FAMILY,
    "fig7": FIG7_FAMILY,
    "fig8": FIG8_FAMILY,
    "fig9-train": FIG9_TRAIN_FAMILY,
    "fig9": FIG9_FAMILY,
}

EXPERIMENT_PRESETS = {
    "fig4": {
        "family": "fig4",
        "methods": ["method1", "method1:nocache", "oma", "oma:nocache", "mmf"],
        "sweep_var": "k",
        "sweep_values": [2, 4, 6, 8, 10],
        "metric": "success_probability",
    },
    "fig7": {
        "family": "fig7",
        "methods": ["method1", "method2-exact", "equal", "mmf"],
        "sweep_var": "p_max",
        "sweep_values": [1.0, 2.0, 5.0, 10.0, 20.0],
        "metric": "success_probability",
    },
    "fig8": {
        "family": "fig8",
        "methods": ["method1", "method2-exact", "equal", "mmf"],
        "sweep_var": "zipf_skew",
        "sweep_values": [0.0, 0.5, 1.0, 1.5, 2.0],
        "metric": "success_probability",
    },
    "fig9": {
        "family": "fig9",
        "methods": ["method1", "method2-exact", "oma"],
        "sweep_var": "p_max",
        "sweep_values": [1.0, 5.0, 10.0, 20.0],
        "metric": "success_probability",
    },
}


def preset_family(name: str) -> ScenarioFamily:
    if name not in PRESET_FAMILIES:
        raise InvalidParameterError(f"Unknown family {name}, expected one of {sorted(PRESET_FAMILIES)}")
    return PRESET_FAMILIES[name]


def scenario_to_dict(scenario: SystemScenario) -> dict:
    return {
        "library": list(scenario.library.thresholds),
        "p_max": scenario.p_max,
        "noise_power": scenario.noise_power,
        "rng_seed": scenario.rng_seed,
        "users": [{
            "lam": u.lam,
            "distance": u.distance,
            "pathloss_exp": u.pathloss_exp,
            "cache": sorted(u.cache),
            "request": u.request,
            "cache_capacity": u.cache_capacity,
            "gain_variance": u.gain_variance,
        } for u in scenario.users],
    }


def scenario_from_dict(d: dict) -> SystemScenario:
    """
    Build a scenario from its JSON form. `library` is either a list of thresholds or
    {"size": n, "start": x, "step": y} for an arithmetic library.
    """

    try:
        lib = d.get("library", {})
        library = FileLibrary.arithmetic(**lib) if isinstance(lib, dict) else FileLibrary(tuple(lib))
        users = tuple(UserProfile(lam=float(u["lam"]), distance=float(u.get("distance", 1.0)),
                                  pathloss_exp=float(u.get("pathloss_exp", 2.0)), cache=frozenset(u.get("cache", ())),
                                  request=int(u["request"]), cache_capacity=u.get("cache_capacity"),
                                  gain_variance=u.get("gain_variance")) for u in d["users"])
        return SystemScenario(users, library, float(d.get("p_max", 1.0)), float(d.get("noise_power", 1.0)),
                              int(d.get("rng_seed", 0)))
    except (KeyError, TypeError) as e:
        raise InvalidParameterError(f"Malformed scenario: missing or invalid field {e}") from e


def load_scenario(path: str) -> SystemScenario:
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as e:
        raise OSError(f"Could not read scenario file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InvalidParameterError(f"Scenario file {path} is not valid JSON: {e}") from e

    logging.info(f"Loaded scenario with {len(d.get('users', []))} users from {path}")
    return scenario_from_dict(d)


def save_scenario(scenario: SystemScenario, path: str):
    try:
        with open(path, "w") as f:
            json.dump(scenario_to_dict(scenario), f, indent=2)
    except OSError as e:
        raise OSError(f"Could not write scenario file {path}: {e}") from e
