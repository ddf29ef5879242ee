"""Architecture ranking from pairwise predictions via maximal weighted acyclic subgraphs."""

from archgraph.graph import DirectedGraph, is_acyclic, scc, topological_order, transitive_reduction
from archgraph.mwas import MwasParams, MwasResult, max_mas, mwas_approx, mwas_bruteforce, spectral_radius
from archgraph.search import SearchConfig, SearchResult, arch_graph_search, arch_graph_zero, run_experiment

__version__ = "0.1.0"

__all__ = [
    "DirectedGraph",
    "MwasParams",
    "MwasResult",
    "SearchConfig",
    "SearchResult",
    "arch_graph_search",
    "arch_graph_zero",
    "is_acyclic",
    "max_mas",
    "mwas_approx",
    "mwas_bruteforce",
    "run_experiment",
    "scc",
    "spectral_radius",
    "topological_order",
    "transitive_reduction",
]
