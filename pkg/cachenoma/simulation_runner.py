import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import Pool
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from cachenoma.base import InvalidParameterError, rng_stream
from cachenoma.learning import (DualPredictor, ExperienceStore, ExplorationConfig, PREDICTOR_KINDS, TrainingConfig,
                                brute_force_action, evaluate_policy, explore, load_predictor, training_meta,
                                train_predictor)
from cachenoma.minlp import DEFAULT_XI, MinlpInstance, solve_exact
from cachenoma.mlp_torch import AdamConfig, Mlp, gradient_check
from cachenoma.model import decode_success, estimate_success_probability, estimate_success_users, \
    sample_channel_gains
from cachenoma.scenarios import EXPERIMENT_PRESETS, ScenarioFamily, load_scenario, preset_family
from cachenoma.strategies import allocate_with, parse_method

SEED = 42

METRICS = ("success_probability", "avg_success_users")
SWEEP_VARS = ("k", "p_max", "zipf_skew", "cache_capacity", "noise_power")
CSV_COLUMNS = ["method", "sweep_var", "sweep_value", "metric", "value", "se", "config_hash", "error"]
GRADCHECK_TOLERANCE = 1e-4
PREDICTOR_METHOD = "method2-dualnet"


@dataclass
class ExperimentSpec:
    """
    One figure-style study: a scenario family, the methods to compare and the grid of one swept parameter.
    `episodes` scenario draws are taken per sweep point, each evaluated on `n_samples` channel draws shared by all
    methods.
    """

    family: ScenarioFamily
    methods: List[str]
    sweep_var: str
    sweep_values: List[float]
    n_samples: int = 10_000
    episodes: int = 1
    metric: str = "success_probability"
    seed: int = SEED
    name: str = "experiment"
    strategy_config: Dict[str, dict] = field(default_factory=dict)

    def validate(self):
        if not self.methods:
            raise InvalidParameterError("The method list is empty")
        for tag in self.methods:
            parse_method(tag)
        if not self.sweep_values:
            raise InvalidParameterError("The sweep grid is empty")
        if self.sweep_var not in SWEEP_VARS:
            raise InvalidParameterError(f"Unknown sweep variable {self.sweep_var}, expected one of {SWEEP_VARS}")
        if self.metric not in METRICS:
            raise InvalidParameterError(f"Unknown metric {self.metric}, expected one of {METRICS}")
        if self.n_samples < 1 or self.episodes < 1:
            raise InvalidParameterError("n_samples and episodes must be >= 1")

    def family_at(self, value) -> ScenarioFamily:
        if self.sweep_var == "k":
            return replace(self.family, k=int(value))
        if self.sweep_var == "cache_capacity":
            return replace(self.family, cache_capacities=(int(value),))
        return replace(self.family, **{self.sweep_var: float(value)})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        missing = [key for key in ("family", "methods", "sweep_var", "sweep_values") if key not in d]
        if missing:
            raise InvalidParameterError(f"Experiment is missing {missing}")
        family = d.pop("family")
        family = preset_family(family) if isinstance(family, str) else ScenarioFamily.from_dict(family)
        try:
            return cls(family=family, **d)
        except TypeError as e:
            raise InvalidParameterError(f"Malformed experiment spec: {e}") from e

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ResultRow:
    method: str
    sweep_var: str
    sweep_value: float
    metric: str
    value: float
    se: float
    wall_time_s: float
    config_hash: str
    error: str = ""


def evaluate_allocation(tag: str, scenario, gains: np.ndarray, metric: str, strategy_config: dict) -> np.ndarray:
    """Per-draw metric of one method: all-users-success indicator or number of successful users."""

    alloc, evaluated_on = allocate_with(tag, scenario, **strategy_config)
    alloc.validate(evaluated_on.p_max)
    success = decode_success(gains, alloc, evaluated_on)
    return success.all(axis=1).astype(np.float64) if metric == "success_probability" else success.sum(axis=1)


def run_point(args) -> List[ResultRow]:
    """
    All methods at one sweep point, on common scenario and channel draws.
    """

    spec, point = args
    value = spec.sweep_values[point]
    family = spec.family_at(value)
    config_hash = spec.config_hash()

    draws = {tag: [] for tag in spec.methods}
    errors = {tag: "" for tag in spec.methods}
    elapsed = {tag: 0.0 for tag in spec.methods}
    for episode in range(spec.episodes):
        scenario = family.draw(rng_stream(spec.seed, point, episode), seed=spec.seed)
        gains = sample_channel_gains(scenario, rng_stream(spec.seed, point, episode, 1), spec.n_samples)
        for tag in spec.methods:
            if errors[tag]:
                continue
            start = time.monotonic()
            try:
                base_tag = parse_method(tag)[0]
                draws[tag].append(evaluate_allocation(tag, scenario, gains, spec.metric,
                                                      spec.strategy_config.get(base_tag, {})))
            except (ValueError, OSError) as e:
                errors[tag] = f"{type(e).__name__}: {e}"
                logging.warning(f"{tag} failed at {spec.sweep_var}={value}: {errors[tag]}")
            elapsed[tag] += time.monotonic() - start

    rows = []
    for tag in spec.methods:
        if errors[tag]:
            rows.append(ResultRow(tag, spec.sweep_var, value, spec.metric, math.nan, math.nan, elapsed[tag],
                                  config_hash, errors[tag]))
            continue
        x = np.concatenate(draws[tag])
        se = float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        rows.append(ResultRow(tag, spec.sweep_var, value, spec.metric, float(x.mean()), se, elapsed[tag],
                              config_hash))
    logging.info(f"{spec.name}: {spec.sweep_var}={value} done")
    return rows


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> pd.DataFrame:
    """
    Every (sweep point, method) pair as one row. Failures of a method are recorded in its row and the run goes
    on. The table does not depend on `workers`.
    """

    spec.validate()
    tasks = [(spec, point) for point in range(len(spec.sweep_values))]
    if workers > 1:
        with Pool(workers) as p:
            results = dict(enumerate(p.imap(run_point, tasks)))
    else:
        results = dict(enumerate(map(run_point, tasks)))

    rows = [asdict(row) for point in range(len(tasks)) for row in results[point]]
    return pd.DataFrame(rows, columns=list(ResultRow.__dataclass_fields__))


def emit_plotdata(table: pd.DataFrame, spec: ExperimentSpec, out_dir: str) -> List[str]:
    """
    Write <name>.csv (deterministic columns), <name>_timing.csv (wall times) and <name>_manifest.json holding the
    full spec, its hash and the seed.
    """

    spec.validate()
    if table.empty:
        raise InvalidParameterError("Nothing to write: the result table is empty")

    csv_path = os.path.join(out_dir, f"{spec.name}.csv")
    timing_path = os.path.join(out_dir, f"{spec.name}_timing.csv")
    manifest_path = os.path.join(out_dir, f"{spec.name}_manifest.json")
    manifest = {"name": spec.name, "seed": spec.seed, "config_hash": spec.config_hash(), "spec": spec.to_dict(),
                "rows": len(table)}
    try:
        os.makedirs(out_dir, exist_ok=True)
        table[CSV_COLUMNS].to_csv(csv_path, index=False, float_format="%.10g")
        table[["method", "sweep_value", "wall_time_s"]].to_csv(timing_path, index=False)
        with open(manifest_path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    except OSError as e:
        raise OSError(f"Could not write results to {out_dir}: {e}") from e

    logging.info(f"Wrote {len(table)} rows to {csv_path}")
    return [csv_path, timing_path, manifest_path]


def load_experiment(path: Optional[str], preset: Optional[str]) -> ExperimentSpec:
    if preset is not None:
        if preset not in EXPERIMENT_PRESETS:
            raise InvalidParameterError(f"Unknown preset {preset}, expected one of {sorted(EXPERIMENT_PRESETS)}")
        return ExperimentSpec.from_dict({**EXPERIMENT_PRESETS[preset], "name": preset})
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as e:
        raise OSError(f"Could not read experiment file {path}: {e}") from e
    # a written manifest carries the experiment under "spec"
    if isinstance(d, dict) and "spec" in d:
        d = d["spec"]
    if not isinstance(d, dict):
        raise InvalidParameterError(f"Experiment file {path} does not hold a JSON object")
    return ExperimentSpec.from_dict(d)


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.config)
    status = 0
    for tag in args.method:
        try:
            alloc, evaluated_on = allocate_with(tag, scenario)
            p, se = estimate_success_probability(evaluated_on, alloc, n_samples=args.samples,
                                                 rng=rng_stream(args.seed, 0))
            users, users_se = estimate_success_users(evaluated_on, alloc, n_samples=args.samples,
                                                     rng=rng_stream(args.seed, 0))
        except ValueError as e:
            print(f"{tag}: error {e}")
            status = 1
            continue
        print(f"{tag}: alphas={np.round(alloc.alphas, 6).tolist()} success_probability={p:.6f} (se {se:.6f}) "
              f"avg_success_users={users:.4f} (se {users_se:.4f})")
    return status


def cmd_solve(args) -> int:
    scenario = load_scenario(args.config)
    solution = solve_exact(MinlpInstance.from_scenario(scenario, args.xi), scenario.p_max, workers=args.workers)
    print(json.dumps({
        "order": list(solution.order),
        "alpha": solution.alpha.tolist(),
        "objective": solution.value,
        "success_probability": solution.success_probability,
        "orders_enumerated": solution.enumerated,
    }, indent=2))
    return 0


def learning_family(args) -> ScenarioFamily:
    family = preset_family(args.family)
    if args.cache_capacity is not None:
        family = replace(family, cache_capacities=(args.cache_capacity,))
    return family


def cmd_explore(args) -> int:
    family = learning_family(args)
    config = ExplorationConfig(args.trials, args.a_max, args.t_eval, args.capacity, args.seed)
    store = explore(family, config, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    store.save(os.path.join(args.out, "store.jsonl"))
    with open(os.path.join(args.out, "exploration.json"), "w") as f:
        json.dump({"family": family.to_dict(), **asdict(config), "states": len(store)}, f, indent=2)
    print(f"{len(store)} states stored in {args.out}")
    return 0


def cmd_train(args) -> int:
    family = learning_family(args)
    store = ExperienceStore.load(args.store)
    exploration = ExplorationConfig(t_trial=args.t_trial)
    training = TrainingConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                              xi_scale=args.xi_scale, eval_episodes=args.episodes, eval_t_eval=args.t_eval,
                              adam=AdamConfig(lr=args.lr))
    meta = {"predictor": args.predictor, **training_meta(family, exploration, training)}
    predictor, metrics = train_predictor(args.predictor, store, family, training, meta)
    os.makedirs(args.out, exist_ok=True)
    predictor.save(args.out, meta={"family": args.family, "cache_capacity": family.cache_capacities[0]})
    metrics.to_csv(os.path.join(args.out, f"metrics_{args.predictor}.csv"), index=False)
    print(metrics[["epoch", "loss", "avg_success_users", "se"]].to_string(index=False))
    return 0


def cmd_evaluate(args) -> int:
    family = learning_family(args)
    predictor = load_predictor(args.checkpoint)
    k_model = (predictor.dnn_val if isinstance(predictor, DualPredictor) else predictor.net).output_dim
    avg, se = evaluate_policy(predictor.predict, family, args.episodes, args.t_eval, rng_stream(args.seed, 2),
                              k_model=k_model)
    print(f"predictor: avg_success_users={avg:.4f} (se {se:.4f})")

    if args.brute_force:
        rng = rng_stream(args.seed, 3)
        rewards = []
        for _ in range(args.episodes):
            scenario = family.draw(rng)
            rewards.append(brute_force_action(scenario, args.grid_step, args.t_eval, rng)[1])
        rewards = np.array(rewards)
        print(f"brute force: avg_success_users={rewards.mean():.4f} "
              f"(se {rewards.std(ddof=1) / math.sqrt(len(rewards)) if len(rewards) > 1 else 0.0:.4f})")
    return 0


def cmd_sweep(args) -> int:
    spec = load_experiment(args.config, args.preset)
    overrides = {}
    if args.samples is not None:
        overrides["n_samples"] = args.samples
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.method:
        overrides["methods"] = args.method
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.checkpoint is not None:
        methods = overrides.get("methods", spec.methods)
        if PREDICTOR_METHOD not in methods:
            overrides["methods"] = [*methods, PREDICTOR_METHOD]
        overrides["strategy_config"] = {**spec.strategy_config, PREDICTOR_METHOD: {"checkpoint": args.checkpoint}}
    spec = replace(spec, **overrides)
    spec.validate()

    table = run_experiment(spec, workers=args.workers)
    emit_plotdata(table, spec, args.out)
    print(table[CSV_COLUMNS].to_string(index=False))
    return 1 if (table["error"] != "").any() else 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n in range(args.nets):
        k = int(rng.integers(2, 4))
        dims = [k * k, int(rng.integers(3, 7)), k]
        net = Mlp(dims, seed=args.seed + n)
        state = rng.random(k * k)
        target = rng.dirichlet(np.ones(k))
        aux = {"gains": rng.exponential(1.0, (16, k)), "betas": np.ones(k)}
        for loss in ("mae", "mae_sinr"):
            err = gradient_check(net, state, None, target, loss, aux)
            worst = max(worst, err)
            logging.info(f"net {n} dims {dims} loss {loss}: max relative error {err:.3g}")
    print(f"worst relative error over {args.nets} nets: {worst:.3g}")
    return 0 if worst <= GRADCHECK_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cachenoma", description="Power allocation for cache-aided NOMA")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (DEBUG, INFO, WARNING, ...)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Monte Carlo evaluation of methods on one scenario")
    p.add_argument("--config", required=True, help="Scenario JSON file")
    p.add_argument("--method", nargs="+", default=["method1"])
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=SEED)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="Exact full-bandwidth allocation of one scenario")
    p.add_argument("--config", required=True, help="Scenario JSON file")
    p.add_argument("--xi", type=float, default=DEFAULT_XI)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("explore", help="Build an experience store by random search")
    p.add_argument("--family", default="fig5")
    p.add_argument("--cache-capacity", type=int, help="Override the cache capacity of every user")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--a-max", type=int, default=200)
    p.add_argument("--t-eval", type=int, default=500)
    p.add_argument("--capacity", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("train", help="Train a predictor on an experience store")
    p.add_argument("--store", required=True)
    p.add_argument("--family", default="fig5")
    p.add_argument("--cache-capacity", type=int, help="Override the cache capacity of every user")
    p.add_argument("--predictor", choices=PREDICTOR_KINDS, default="dual")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--xi-scale", type=float, default=2.0)
    p.add_argument("--episodes", type=int, default=200, help="Evaluation episodes per epoch")
    p.add_argument("--t-eval", type=int, default=500)
    p.add_argument("--t-trial", type=int, default=10_000, help="Exploration size, recorded with the metrics")
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Average successful users of a trained predictor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--family", default="fig5")
    p.add_argument("--cache-capacity", type=int, help="Override the cache capacity of every user")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--t-eval", type=int, default=500)
    p.add_argument("--brute-force", action="store_true", help="Also report the simplex-grid optimum")
    p.add_argument("--grid-step", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=SEED)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="Run a figure-style experiment")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="Experiment JSON file")
    source.add_argument("--preset", choices=sorted(EXPERIMENT_PRESETS))
    p.add_argument("--method", nargs="+")
    p.add_argument("--samples", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help=f"Trained predictor directory, evaluated as {PREDICTOR_METHOD}")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="results")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="Compare backprop with finite differences on random nets")
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--seed", type=int, default=SEED)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        logging.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
