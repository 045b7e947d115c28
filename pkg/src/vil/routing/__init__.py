"""Routing games: networks, generalized costs, Wardrop equilibrium."""

from .costs import BehaviorParams, CostModel, edge_cost
from .equilibrium import (
    EquilibriumState,
    RoutingProblem,
    assemble_vi,
    metrics,
    solve_equilibrium,
    wardrop_gap,
)
from .network import (
    DemandMatrix,
    Edge,
    EdgeCostParams,
    Network,
    data_path,
    demands_from_dict,
    demands_to_dict,
    expand_network,
    generate_demands,
    load_demands,
    load_network,
    network_from_dict,
    network_to_dict,
)
from .paths import PathSet, shortest_paths, shortest_paths_aon


def load_instance(name):
    """Load a shipped network (``braess``, ``linear_city``, ``two_loop``), expanded if it has modes."""
    net = load_network(data_path(f"{name}.json"))
    kinds = {e.kind for e in net.edges}
    if not net.expanded and len(kinds) > 1:
        return expand_network(net)
    return net


__all__ = [
    "BehaviorParams", "CostModel", "edge_cost", "EquilibriumState", "RoutingProblem", "assemble_vi",
    "metrics", "solve_equilibrium", "wardrop_gap", "DemandMatrix", "Edge", "EdgeCostParams", "Network",
    "data_path", "demands_from_dict", "demands_to_dict", "expand_network", "generate_demands",
    "load_demands", "load_network", "network_from_dict", "network_to_dict", "PathSet", "shortest_paths",
    "shortest_paths_aon", "load_instance",
]
