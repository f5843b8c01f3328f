import itertools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
import torch as T

from cachenoma.base import InvalidParameterError, PowerAllocation, SystemScenario, UserProfile, rng_stream
from cachenoma.mlp_torch import (AdamConfig, AdamState, Mlp, compute_loss, forward, load_checkpoint,
                                 predictor_dims, save_checkpoint)
from cachenoma.model import break_ties, decode_success, sample_channel_gains
from cachenoma.scenarios import ScenarioFamily

PREDICTOR_KINDS = ("mae", "mae_sinr", "dual")
STATE_DECIMALS = 12


def encode_state(users, library) -> np.ndarray:
    """
    Row i of the K x K state is zero when user i has cached its own request; otherwise entry (i, j) is the
    threshold of user j's request, or zero when user i has cached that file. Rows are concatenated.
    """

    k = len(users)
    s = np.zeros((k, k))
    for i, u in enumerate(users):
        if u.self_cached:
            continue
        for j, v in enumerate(users):
            if not u.has_cached(v.request):
                s[i, j] = library.threshold(v.request)
    return s.reshape(-1)


def state_mask(state: np.ndarray) -> np.ndarray:
    """Users who need power: a nonzero diagonal entry of the state."""

    k = int(round(math.sqrt(len(state))))
    assert k * k == len(state), f"State of length {len(state)} is not a square"
    return np.diag(np.asarray(state).reshape(k, k)) > 0


def state_key(state: np.ndarray) -> tuple:
    return tuple(np.round(np.asarray(state, dtype=np.float64), STATE_DECIMALS).tolist())


@dataclass
class ExplorationConfig:
    t_trial: int = 10_000
    a_max: int = 200
    t_eval: int = 500
    capacity: int = 100_000
    seed: int = 0


class ExperienceStore:
    """
    Best action found so far per state, with its average reward. New states are only added while there is room;
    known states are updated whenever a strictly better reward shows up.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise InvalidParameterError(f"Store capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: Dict[tuple, Tuple[np.ndarray, np.ndarray, float]] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, state):
        return state_key(state) in self.entries

    def get(self, state) -> Optional[Tuple[np.ndarray, float]]:
        entry = self.entries.get(state_key(state))
        return None if entry is None else (entry[1], entry[2])

    def insert(self, state, action, reward: float) -> bool:
        """Returns whether the store changed."""

        key = state_key(state)
        stored = self.entries.get(key)
        if stored is None:
            if len(self.entries) >= self.capacity:
                return False
        elif reward <= stored[2]:
            return False
        self.entries[key] = (np.asarray(state, dtype=np.float64), np.asarray(action, dtype=np.float64), float(reward))
        return True

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"state": s.tolist(), "action": a.tolist(), "reward": r}
                             for s, a, r in self.entries.values()], columns=["state", "action", "reward"])

    def save(self, path: str):
        """One JSON record per line: {"state": [...K^2], "action": [...K], "reward": r}."""

        try:
            self.to_frame().to_json(path, orient="records", lines=True, double_precision=15)
        except OSError as e:
            raise OSError(f"Could not write experience store {path}: {e}") from e

    @classmethod
    def load(cls, path: str, capacity: int = 100_000) -> "ExperienceStore":
        try:
            df = pd.read_json(path, orient="records", lines=True)
        except (OSError, ValueError) as e:
            raise OSError(f"Could not read experience store {path}: {e}") from e
        store = cls(capacity)
        for row in df.itertuples(index=False):
            store.insert(np.asarray(row.state), np.asarray(row.action), float(row.reward))
        return store


def average_success_users(scenario: SystemScenario, alphas: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """Mean number of successful users over the rows of `gains`, for each full-bandwidth action row."""

    alphas = np.atleast_2d(alphas)
    return np.array([decode_success(gains, PowerAllocation(a), scenario).sum(axis=1).mean() for a in alphas])


def find_best_action(state: np.ndarray, scenario: SystemScenario, a_max: int, t_eval: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    Random search for the action with the best average number of successful users. Users who cached their own
    request get nothing. All candidates are scored on the same T_eval channel draws.
    """

    if a_max < 1 or t_eval < 1:
        raise InvalidParameterError(f"A_max and T_eval must be >= 1, got {a_max} and {t_eval}")
    k = scenario.k
    mask = state_mask(state)
    if not mask.any():
        return np.zeros(k), float(k)

    candidates = rng.random((a_max, k)) * mask
    candidates /= candidates.sum(axis=1, keepdims=True)
    gains = sample_channel_gains(scenario, rng, t_eval)
    rewards = average_success_users(scenario, candidates, gains)

    best = int(np.argmax(rewards))
    return candidates[best], float(rewards[best])


def simplex_grid(mask: np.ndarray, step: float) -> np.ndarray:
    """Every action on a regular grid of the simplex over the active users."""

    n = int(round(1 / step))
    active = np.flatnonzero(mask)
    points = []
    for combo in itertools.combinations_with_replacement(range(len(active)), n):
        point = np.zeros(len(mask))
        for idx in combo:
            point[active[idx]] += 1.0 / n
        points.append(point)
    return np.unique(np.array(points), axis=0)


def brute_force_action(scenario: SystemScenario, step: float = 0.02, t_eval: int = 500,
                       rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float]:
    """Best action on a simplex grid, scored on common channel draws."""

    if rng is None:
        rng = np.random.default_rng(scenario.rng_seed)
    mask = ~scenario.self_cached
    if not mask.any():
        return np.zeros(scenario.k), float(scenario.k)

    candidates = simplex_grid(mask, step)
    # equal shares on distinct files leave the decode order open
    candidates = np.array([break_ties(c) for c in candidates])
    gains = sample_channel_gains(scenario, rng, t_eval)
    rewards = average_success_users(scenario, candidates, gains)
    best = int(np.argmax(rewards))
    return candidates[best], float(rewards[best])


def _explore_trial(args):
    family, config, trial = args
    rng = rng_stream(config.seed, trial)
    scenario = family.draw(rng, seed=config.seed)
    state = encode_state(scenario.users, scenario.library)
    action, reward = find_best_action(state, scenario, config.a_max, config.t_eval, rng)
    return state, action, reward


def explore(family: ScenarioFamily, config: ExplorationConfig, workers: int = 1) -> ExperienceStore:
    """
    Random caching and requests, best-action search per state, and a bounded store of the results. Trials use
    their own random streams and are merged in trial order, so the store does not depend on `workers`.
    """

    store = ExperienceStore(config.capacity)
    tasks = ((family, config, trial) for trial in range(config.t_trial))

    if workers > 1:
        with Pool(workers) as p:
            results = p.imap(_explore_trial, tasks, chunksize=64)
            _merge(store, results, config.t_trial)
    else:
        _merge(store, map(_explore_trial, tasks), config.t_trial)

    logging.info(f"Exploration finished: {config.t_trial} trials, {len(store)} states stored")
    return store


def _merge(store: ExperienceStore, results, total: int):
    for i, (state, action, reward) in enumerate(results):
        store.insert(state, action, reward)
        if (i + 1) % 1000 == 0:
            logging.info(f"Explored {i + 1}/{total} trials, {len(store)} states stored")


@dataclass
class TrainingSet:
    states: np.ndarray
    masks: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.states)


def build_training_sets(store: ExperienceStore, xi_scale: float = 2.0) -> Tuple[TrainingSet, TrainingSet]:
    """
    Value set: actions sorted in descending order, masked to the number of active users. Order set: actions
    scaled by xi_scale, masked per user. Both use the raw states as inputs.
    """

    if len(store) == 0:
        raise InvalidParameterError("Cannot build training sets from an empty store")
    if not xi_scale > 1:
        raise InvalidParameterError(f"xi_scale must be > 1, got {xi_scale}")

    states = np.array([s for s, _, _ in store.entries.values()])
    actions = np.array([a for _, a, _ in store.entries.values()])
    masks = np.array([state_mask(s) for s in states])
    k = actions.shape[1]
    val_masks = np.arange(k)[None, :] < masks.sum(axis=1, keepdims=True)

    valset = TrainingSet(states, val_masks, -np.sort(-actions, axis=1))
    ordset = TrainingSet(states, masks, actions * xi_scale)
    return valset, ordset


def _renormalize(alpha: np.ndarray, mask: np.ndarray) -> np.ndarray:
    alpha = np.where(mask, alpha, 0.0)
    total = alpha.sum()
    if total <= 0:
        return alpha
    return break_ties(alpha / total)


class SinglePredictor:
    """One network maps the state straight to the power fractions."""

    kind = "single"

    def __init__(self, net: Mlp, loss: str = "mae"):
        self.net = net
        self.loss = loss

    def predict(self, state) -> np.ndarray:
        mask = state_mask(state)
        return _renormalize(forward(self.net, state, mask), mask)

    def save(self, directory: str, meta: Optional[dict] = None):
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(os.path.join(directory, "net.npz"), self.net, meta={"predictor": self.loss, **(meta or {})})


class DualPredictor:
    """
    The value network predicts the sorted fractions, the order network predicts which user gets which of them.
    """

    kind = "dual"

    def __init__(self, dnn_val: Mlp, dnn_ord: Mlp, xi_scale: float = 2.0):
        if dnn_val.dims[0] != dnn_ord.dims[0] or dnn_val.dims[-1] != dnn_ord.dims[-1]:
            raise InvalidParameterError("Value and order networks must share input and output dimensions")
        if not xi_scale > 1:
            raise InvalidParameterError(f"xi_scale must be > 1, got {xi_scale}")
        self.dnn_val = dnn_val
        self.dnn_ord = dnn_ord
        self.xi_scale = xi_scale

    def predict(self, state) -> np.ndarray:
        return predict_dual(self, state)

    def save(self, directory: str, meta: Optional[dict] = None):
        os.makedirs(directory, exist_ok=True)
        meta = {"predictor": "dual", "xi_scale": self.xi_scale, **(meta or {})}
        save_checkpoint(os.path.join(directory, "val.npz"), self.dnn_val, meta=meta)
        save_checkpoint(os.path.join(directory, "ord.npz"), self.dnn_ord, meta=meta)


def predict_dual(pred: DualPredictor, state, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Sorted values from the value network, handed out in the rank order of the order network. `mask` defaults to
    the users whose own request is not cached.
    """

    mask = state_mask(state) if mask is None else np.asarray(mask, dtype=bool)
    n_active = int(mask.sum())
    k = len(mask)
    if n_active == 0:
        return np.zeros(k)

    values = forward(pred.dnn_val, state, np.arange(k) < n_active)
    order_scores = forward(pred.dnn_ord, state, mask)
    return _renormalize(combine_dual(values, order_scores, mask), mask)


def combine_dual(values: np.ndarray, order_scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    The largest value goes to the active user with the largest order score, the second largest to the second,
    and so on. Inactive users get zero.
    """

    sorted_values = -np.sort(-np.asarray(values))
    active = np.flatnonzero(mask)
    ranked = active[np.argsort(-np.asarray(order_scores)[active], kind="stable")]
    alpha = np.zeros(len(mask))
    alpha[ranked] = sorted_values[:len(ranked)]
    return alpha


def load_predictor(directory: str):
    if os.path.exists(os.path.join(directory, "val.npz")):
        dnn_val, _, meta = load_checkpoint(os.path.join(directory, "val.npz"))
        dnn_ord, _, _ = load_checkpoint(os.path.join(directory, "ord.npz"))
        return DualPredictor(dnn_val, dnn_ord, meta.get("xi_scale", 2.0))
    net, _, meta = load_checkpoint(os.path.join(directory, "net.npz"))
    return SinglePredictor(net, meta.get("predictor", "mae"))


def virtual_users(scenario: SystemScenario, k_model: int) -> SystemScenario:
    """
    Pad a scenario with users who always have their request cached, so a predictor built for k_model users can
    serve fewer. Virtual users request file 0 and hold it.
    """

    if k_model < scenario.k:
        raise InvalidParameterError(f"Cannot fit {scenario.k} users into a {k_model}-user predictor")
    padding = tuple(UserProfile(1.0, cache=frozenset({0}), request=0) for _ in range(k_model - scenario.k))
    return SystemScenario(scenario.users + padding, scenario.library, scenario.p_max, scenario.noise_power,
                          scenario.rng_seed)


def policy_alpha(policy: Callable[[np.ndarray], np.ndarray], scenario: SystemScenario,
                 k_model: Optional[int] = None) -> np.ndarray:
    """Run a state-to-action policy on a scenario, padding with virtual users when the policy expects more."""

    padded = scenario if k_model is None or k_model == scenario.k else virtual_users(scenario, k_model)
    alpha = np.asarray(policy(encode_state(padded.users, padded.library)))[:scenario.k]
    return _renormalize(alpha, ~scenario.self_cached)


def evaluate_policy(policy: Callable[[np.ndarray], np.ndarray], family: ScenarioFamily, n_episodes: int,
                    t_eval: int, rng: np.random.Generator, k_model: Optional[int] = None) -> Tuple[float, float]:
    """
    Average number of successful users over random episodes, with its standard error across episodes.
    """

    if n_episodes < 1 or t_eval < 1:
        raise InvalidParameterError(f"Episode and evaluation counts must be >= 1, got {n_episodes} and {t_eval}")

    rewards = np.empty(n_episodes)
    for e in range(n_episodes):
        scenario = family.draw(rng)
        alpha = policy_alpha(policy, scenario, k_model)
        gains = sample_channel_gains(scenario, rng, t_eval)
        rewards[e] = average_success_users(scenario, alpha, gains)[0]

    se = float(rewards.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(rewards.mean()), se


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    xi_scale: float = 2.0
    sinr_samples: int = 256
    eval_episodes: int = 200
    eval_t_eval: int = 500
    adam: AdamConfig = field(default_factory=AdamConfig)


def _fit_epoch(net: Mlp, state: AdamState, data: TrainingSet, order: T.Tensor, config: TrainingConfig,
               loss: str, aux_fn=None) -> float:
    total = 0.0
    for start in range(0, len(data), config.batch_size):
        idx = order[start:start + config.batch_size].numpy()
        state.optimizer.zero_grad()
        value = compute_loss(net, data.states[idx], data.masks[idx], data.targets[idx], loss,
                             aux_fn() if aux_fn else None)
        value.backward()
        state.optimizer.step()
        state.steps += 1
        total += value.item() * len(idx)
    return total / len(data)


def _dataset_loss(net: Mlp, data: TrainingSet, loss: str, aux=None) -> float:
    with T.no_grad():
        return compute_loss(net, data.states, data.masks, data.targets, loss, aux).item()


def train_predictor(kind: str, store: ExperienceStore, family: ScenarioFamily,
                    config: Optional[TrainingConfig] = None, meta: Optional[dict] = None):
    """
    Train a single-network (MAE or MAE+SINR loss) or a dual-network predictor on the explored store. The
    returned frame holds loss and average successful users per epoch; epoch 0 is the untrained network.
    """

    if kind not in PREDICTOR_KINDS:
        raise InvalidParameterError(f"Unknown predictor {kind}, expected one of {PREDICTOR_KINDS}")
    config = config or TrainingConfig()
    k = family.k
    dims = predictor_dims(k)
    valset, ordset = build_training_sets(store, config.xi_scale)
    gen = T.Generator().manual_seed(config.seed)
    gain_rng = rng_stream(config.seed, 1)

    if kind == "dual":
        predictor = DualPredictor(Mlp(dims, config.seed), Mlp(dims, config.seed + 1), config.xi_scale)
        fits = [(predictor.dnn_val, valset, "mae", None), (predictor.dnn_ord, ordset, "mae", None)]
    else:
        predictor = SinglePredictor(Mlp(dims, config.seed), kind)
        raw = TrainingSet(ordset.states, ordset.masks, ordset.targets / config.xi_scale)
        reference = family.draw(np.random.default_rng(config.seed))
        betas = reference.betas

        def sinr_aux():
            return {"gains": sample_channel_gains(reference, gain_rng, config.sinr_samples), "betas": betas,
                    "p_max": reference.p_max}

        fits = [(predictor.net, raw, kind, sinr_aux if kind == "mae_sinr" else None)]

    optimizers = [AdamState(net, config.adam) for net, _, _, _ in fits]
    rows = []
    for epoch in range(config.epochs + 1):
        if epoch == 0:
            loss = sum(_dataset_loss(net, data, kind_, aux() if aux else None) for net, data, kind_, aux in fits)
        else:
            order = T.randperm(len(valset), generator=gen)
            loss = sum(_fit_epoch(net, opt, data, order, config, kind_, aux)
                       for (net, data, kind_, aux), opt in zip(fits, optimizers))

        avg, se = evaluate_policy(predictor.predict, family, config.eval_episodes, config.eval_t_eval,
                                  rng_stream(config.seed, 2))
        rows.append({"epoch": epoch, "loss": loss, "avg_success_users": avg, "se": se})
        logging.info(f"{kind} epoch {epoch}: loss {loss:.6f}, avg success users {avg:.4f} +- {se:.4f}")

    metrics = pd.DataFrame(rows)
    for key, value in (meta or {}).items():
        metrics[key] = value
    return predictor, metrics


def training_meta(family: ScenarioFamily, exploration: ExplorationConfig, training: TrainingConfig) -> dict:
    """Knobs recorded next to every metrics file."""

    return {"family": json.dumps(family.to_dict(), sort_keys=True), "t_trial": exploration.t_trial,
            "a_max": exploration.a_max, "t_eval": exploration.t_eval,
            "training": json.dumps(asdict(training), sort_keys=True)}
