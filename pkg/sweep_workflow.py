#!/usr/bin/env python3
"""
Sweep Workflow
α-sweep experiment orchestrated with LangGraph: the selected policies run as
parallel nodes and meet in a coordinator before the reports are written
"""

from langgraph.graph import END, StateGraph

from config import ExperimentConfig
from sweep_nodes import (
    coordinator_node, data_loader_node, error_handler_node, load_table_builder_node, make_policy_runner,
    model_trainer_node, report_generator_node,
)
from sweep_state import SweepState, create_sweep_state, get_sweep_summary


def runner_name(policy):
    return f"run_{policy}"


def create_sweep_workflow(policies):
    """Create the sweep graph for the selected policies"""
    print("🏗️ Building Sweep Workflow...")
    workflow = StateGraph(SweepState)

    workflow.add_node("data_loader", data_loader_node)
    workflow.add_node("model_trainer", model_trainer_node)
    workflow.add_node("load_table_builder", load_table_builder_node)
    runners = [runner_name(p) for p in policies]
    for policy, name in zip(policies, runners):
        workflow.add_node(name, make_policy_runner(policy))
    workflow.add_node("coordinator", coordinator_node)
    workflow.add_node("report_generator", report_generator_node)
    workflow.add_node("error_handler", error_handler_node)

    workflow.set_entry_point("data_loader")

    def route_step(expected):
        def route(state):
            next_step = state.get("next", "end")
            if next_step == expected:
                return expected
            if next_step == "error_handler":
                return "error_handler"
            return END
        return route

    def route_final(state):
        return "error_handler" if state.get("next") == "error_handler" else END

    def route_to_runners(state):
        """Launch one runner per policy in parallel"""
        next_step = state.get("next", "end")
        if next_step == "policy_runners":
            return runners
        if next_step == "error_handler":
            return "error_handler"
        return END

    workflow.add_conditional_edges("data_loader", route_step("model_trainer"))
    workflow.add_conditional_edges("model_trainer", route_step("load_table_builder"))
    workflow.add_conditional_edges("load_table_builder", route_to_runners)

    # coordinator waits for every runner
    workflow.add_edge(runners, "coordinator")
    workflow.add_conditional_edges("coordinator", route_step("report_generator"))
    workflow.add_conditional_edges("report_generator", route_final)
    workflow.add_edge("error_handler", END)

    print(f"✅ Sweep Workflow Created: data → model → tables → [{', '.join(policies)}] → coordinator → reports")
    return workflow.compile()


def run_sweep(config: ExperimentConfig):
    """Run the policy × α × seed cross product; returns the final sweep state"""
    cells = len(config.policies) * len(config.alphas) * len(config.policy_seeds) * len(config.world_seeds)
    print("🚀 STARTING α-SWEEP")
    print(f"📥 Policies: {', '.join(config.policies)}")
    print(f"📥 α values: {', '.join(f'{a:g}' for a in config.alphas)}")
    print(f"📥 Seeds: world {config.world_seeds}, policy {config.policy_seeds} ({cells} cells)")
    print("=" * 70)

    state = create_sweep_state(config)
    workflow = create_sweep_workflow(list(config.policies))
    final_state = workflow.invoke(state)

    print("=" * 70)
    print("🏁 SWEEP COMPLETED")
    print(f"📊 {get_sweep_summary(final_state)}")
    return final_state
