"""Graph 3-coloring generation on Erdos-Renyi random graphs.

Edges are sampled independently with probability p; graphs that are not
3-colorable are rejected (and counted). For each kept graph all proper
colorings are enumerated and reduced to canonical form (colors relabeled in
first-appearance order), so solutions that differ only by a color
permutation collapse to one. One training pair is emitted per
(graph, canonical coloring), and the split is by distinct graph.
"""

from __future__ import annotations

import numpy as np

from gram.errors import ConfigError
from gram.numerics.rng import RngStream
from gram.oracles import coloring_solutions_exhaustive
from gram.tasks.dataset import Dataset, Instance
from gram.encodings import coloring_spec, encode_adjacency, encode_colors

# Edge probabilities targeting roughly half the sampled graphs 3-colorable.
DEFAULT_EDGE_P = {4: 0.60, 5: 0.55, 6: 0.45, 7: 0.40, 8: 0.35, 9: 0.30, 10: 0.28}


def gen_graph_coloring(n: int, n_graphs: int, seed: int, p: float | None = None,
                       max_targets_per_graph: int | None = 20,
                       test_fraction: float = 0.15,
                       max_attempts_factor: int = 50) -> tuple[Dataset, Dataset]:
    if n > 10:
        raise ConfigError("exhaustive coloring generation is limited to n <= 10")
    if p is None:
        p = DEFAULT_EDGE_P.get(n, 0.35)
    rng = RngStream(seed, ("coloring", n))
    edge_rng = rng.stream("edges")
    iu = np.triu_indices(n, k=1)

    graphs: dict[bytes, tuple[np.ndarray, list]] = {}
    rejected = 0
    attempts = 0
    max_attempts = max_attempts_factor * n_graphs
    while len(graphs) < n_graphs and attempts < max_attempts:
        attempts += 1
        adj = np.zeros((n, n), np.int64)
        adj[iu] = (edge_rng.uniform((len(iu[0]),)) < p).astype(np.int64)
        adj = adj + adj.T
        key = adj[iu].tobytes()
        if key in graphs:
            continue
        colorings = coloring_solutions_exhaustive(adj)
        if not colorings:
            rejected += 1
            continue
        graphs[key] = (adj, colorings)

    keys = sorted(graphs)
    set_ids = {key: i for i, key in enumerate(keys)}
    solution_sets = {set_ids[key]: [encode_colors(np.array(c)) for c in graphs[key][1]]
                     for key in keys}

    order = rng.stream("split").permutation(len(keys))
    n_test = max(1, round(test_fraction * len(keys))) if keys else 0
    test_keys = {keys[int(i)] for i in order[:n_test]}

    def build(want_test: bool) -> list[Instance]:
        out = []
        for key in keys:
            if (key in test_keys) != want_test:
                continue
            adj, colorings = graphs[key]
            inp = encode_adjacency(adj)
            chosen = colorings
            if max_targets_per_graph is not None and len(colorings) > max_targets_per_graph:
                pick = rng.stream("targets", set_ids[key]).permutation(len(colorings))
                chosen = [colorings[int(i)] for i in pick[:max_targets_per_graph]]
            for c in chosen:
                out.append(Instance(inp, encode_colors(np.array(c)), set_ids[key]))
        return out

    meta = {
        "generator": {"task": "coloring", "n": n, "p": p, "n_graphs": n_graphs, "seed": seed,
                      "max_targets_per_graph": max_targets_per_graph},
        "rejected_not_3_colorable": rejected,
        "n_unique_inputs": len(keys),
        "attempts": attempts,
    }
    spec = coloring_spec(n)
    train = Dataset(spec, build(False), solution_sets, dict(meta, split="train"))
    test = Dataset(spec, build(True), solution_sets, dict(meta, split="test"))
    return train, test
