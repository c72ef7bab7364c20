#!/usr/bin/env python3
"""
Sweep Nodes
Data loading, model training, load tables, per-policy runners and the
coordinator of the α-sweep experiment. Nodes return partial state updates;
failures route to the error handler.
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor

from behavior_service import fit, load_model
from config import split_seed
from data_service import SyntheticConfig, read_trace, synthetic_trace
from evcs_model import DataFormatError
from policy_workflow import build_avg_load_table, make_policy
from report_service import build_sweep_rows, emit_reports
from simulation_service import compute_metrics, simulate
from sweep_state import CellResult, World, check_all_policies_completed

MODEL_POLICIES = ("2s", "mpc")


def _failure(state, error, stage):
    return {"error": str(error), "error_type": type(error).__name__, "stage": stage, "next": "error_handler"}


def data_loader_node(state):
    """Node 1: read the train/test traces or draw one synthetic world per world seed"""
    config = state["config"]
    print(f"📥 DATA LOADER: {state['sweep_id']}")
    try:
        worlds = []
        if config.synthetic is not None:
            generator = SyntheticConfig.from_dict(config.synthetic)
            station = config.station_config(n=generator.n_slots)
            for world_seed in config.world_seeds:
                train, truth = synthetic_trace(generator, split_seed(world_seed, "world", "train"), station)
                test, _ = synthetic_trace(generator, split_seed(world_seed, "world", "test"), station)
                worlds.append(World(world_seed, train, test, truth))
                print(f"🌍 World {world_seed}: {len(train.sessions)} training / {len(test.sessions)} test sessions")
        else:
            train = read_trace(config.train_trace)
            test = read_trace(config.test_trace)
            if train.n != test.n or train.dt_minutes != test.dt_minutes:
                raise DataFormatError("train and test traces differ in slot count or step length")
            if len(config.world_seeds) > 1:
                print("⚠️ Trace files define a single world, extra world seeds ignored")
            worlds.append(World(config.world_seeds[0], train, test))
            print(f"📁 Loaded {len(train.sessions)} training / {len(test.sessions)} test sessions")

        return {"worlds": worlds, "stage": "data_loaded", "next": "model_trainer"}
    except Exception as e:
        return _failure(state, e, "data_loading")


def model_trainer_node(state):
    """Node 2: fit (or load) the behavior model of every world"""
    config = state["config"]
    if not any(p in MODEL_POLICIES for p in config.policies):
        return {"models": {}, "stage": "model_skipped", "next": "load_table_builder"}

    print("🧠 MODEL TRAINER")
    try:
        models = {}
        for world in state["worlds"]:
            if config.model_path:
                models[world.world_seed] = load_model(config.model_path)
            else:
                models[world.world_seed] = fit(world.train)
            print(f"✅ Behavior model ready for world {world.world_seed} "
                  f"({models[world.world_seed].metadata.get('sessions', '?')} training sessions)")
        return {"models": models, "stage": "model_trained", "next": "load_table_builder"}
    except Exception as e:
        return _failure(state, e, "model_training")


def table_key(config, world_seed, alpha):
    """Load tables are per α unless the document pins one α for all of them"""
    return world_seed, config.table_alpha if config.table_alpha is not None else alpha


def load_table_builder_node(state):
    """Node 3: P-MPC average load tables for R-MPC"""
    config = state["config"]
    if "rmpc" not in config.policies:
        return {"load_tables": {}, "stage": "tables_skipped", "next": "policy_runners"}

    print("📋 LOAD TABLE BUILDER")
    try:
        tables = {}
        for world in state["worlds"]:
            for alpha in config.alphas:
                key = table_key(config, world.world_seed, alpha)
                if key not in tables:
                    station = config.station_config(key[1], n=world.train.n)
                    tables[key] = build_avg_load_table(world.train, station, seed=world.world_seed, **config.solver)
        return {"load_tables": tables, "stage": "tables_built", "next": "policy_runners"}
    except Exception as e:
        return _failure(state, e, "load_tables")


def run_cell(state, world, policy_name, alpha, policy_seed):
    """One closed-loop simulation; failures are captured in the result"""
    config = state["config"]
    cell = CellResult(policy=policy_name, alpha=alpha, world_seed=world.world_seed, policy_seed=policy_seed)
    cell.log_path = os.path.join(config.output_dir, "runs",
                                 f"{policy_name}_a{alpha:g}_w{world.world_seed}_p{policy_seed}_steps.jsonl")
    started = time.perf_counter()
    try:
        station = config.station_config(alpha, n=world.test.n)
        policy = make_policy(
            policy_name, station,
            model=state["models"].get(world.world_seed),
            table=state["load_tables"].get(table_key(config, world.world_seed, alpha)),
            trace=world.test,
            K=config.samples_K,
            K_prime=config.clusters_K_prime,
            seed=policy_seed,
            **config.solver,
        )
        header = {"config_hash": config.config_hash(), "policy": policy_name, "alpha": alpha,
                  "world_seed": world.world_seed, "policy_seed": policy_seed}
        cell.run = simulate(world.test, policy, station, seed=policy_seed, log_path=cell.log_path, verbose=False,
                            header=header)
        cell.metrics = compute_metrics(cell.run)
    except Exception as e:
        cell.error = str(e)
        cell.error_type = type(e).__name__
        print(f"❌ Cell {policy_name} α={alpha:g} world={world.world_seed} seed={policy_seed} failed: {e}")
    cell.wall_s = time.perf_counter() - started
    return cell


def make_policy_runner(policy_name):
    """Node factory: all cells of one policy, run concurrently"""

    def policy_runner(state):
        config = state["config"]
        cells = [(world, alpha, seed) for world in state["worlds"] for alpha in config.alphas
                 for seed in config.policy_seeds]
        print(f"🤖 POLICY RUNNER [{policy_name}]: {len(cells)} cells")

        if config.max_workers > 1 and len(cells) > 1:
            with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
                results = list(pool.map(lambda c: run_cell(state, c[0], policy_name, c[1], c[2]), cells))
        else:
            results = [run_cell(state, world, policy_name, alpha, seed) for world, alpha, seed in cells]

        failed = sum(1 for r in results if not r.ok)
        print(f"✅ [{policy_name}] done: {len(results) - failed} ok, {failed} failed")
        return {"cell_results": results, "policies_completed": [policy_name]}

    return policy_runner


def coordinator_node(state):
    """Node 5: join the runners and assemble the sweep rows"""
    print(f"🎯 COORDINATOR: {sorted(set(state.get('policies_completed', [])))}")
    try:
        if not check_all_policies_completed(state):
            missing = sorted(set(state["config"].policies) - set(state.get("policies_completed", [])))
            raise RuntimeError(f"policy runners missing: {missing}")
        rows = build_sweep_rows(state["cell_results"])
        return {"rows": rows, "stage": "coordinated", "next": "report_generator"}
    except Exception as e:
        return _failure(state, e, "coordination")


def report_generator_node(state):
    """Node 6: write all report files"""
    config = state["config"]
    try:
        files = emit_reports(state["cell_results"], state["rows"], config.output_dir, config.config_hash(),
                             seeds=(config.world_seeds, config.policy_seeds))
        return {"report_files": files, "stage": "complete", "next": "end"}
    except Exception as e:
        return _failure(state, e, "reporting")


def error_handler_node(state):
    """Report a failed sweep"""
    print(f"❌ SWEEP ERROR during {state['stage']}: {state.get('error_type', '')}: "
          f"{state.get('error', 'Unknown error occurred')}")
    return {"stage": "failed"}
