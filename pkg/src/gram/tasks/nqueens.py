"""N-Queens puzzle generation.

Every complete placement is enumerated, then puzzles are formed by removing
k queens; the remaining queens are the input and the originating placement
is the target. Instances are grouped by distinct input, each group carries
the full set of valid completions, and the train/test split is performed on
distinct inputs so no input pattern leaks across the split.
"""

from __future__ import annotations

import itertools

import numpy as np

from gram.errors import ConfigError
from gram.numerics.rng import RngStream
from gram.oracles import nqueens_completions, nqueens_solutions_backtracking
from gram.tasks.dataset import Dataset, Instance
from gram.encodings import decode_nqueens, encode_nqueens, nqueens_spec, queens_from_cols


def gen_nqueens(n: int, removals: list[int], seed: int,
                max_per_solution: int | None = None,
                test_fraction: float = 0.15) -> tuple[Dataset, Dataset]:
    """Build the (train, test) datasets for n x n boards with the given
    removal counts."""
    if n > 10:
        raise ConfigError("exhaustive N-Queens generation is limited to n <= 10")
    if any(k < 1 or k > n for k in removals):
        raise ConfigError(f"removal counts must be in [1, {n}]")
    rng = RngStream(seed, ("nqueens", n))
    solutions = nqueens_solutions_backtracking(n)
    boards = [queens_from_cols(s, n) for s in solutions]

    pairs: dict[tuple[bytes, bytes], tuple[np.ndarray, np.ndarray]] = {}
    for si, board in enumerate(boards):
        target = encode_nqueens(board)
        rows = np.arange(n)
        for k in removals:
            combos = list(itertools.combinations(rows, k))
            if max_per_solution is not None and len(combos) > max_per_solution:
                pick = rng.stream("subsample", si, k).permutation(len(combos))[:max_per_solution]
                combos = [combos[int(i)] for i in pick]
            for removed in combos:
                puzzle = board.copy()
                puzzle[list(removed), :] = 0
                inp = encode_nqueens(puzzle)
                pairs[(inp.tobytes(), target.tobytes())] = (inp, target)

    by_input: dict[bytes, list[tuple[np.ndarray, np.ndarray]]] = {}
    for (ikey, _), (inp, tgt) in sorted(pairs.items()):
        by_input.setdefault(ikey, []).append((inp, tgt))

    input_keys = sorted(by_input)
    set_ids = {key: i for i, key in enumerate(input_keys)}
    solution_sets = {}
    for key in input_keys:
        inp = by_input[key][0][0]
        clues = decode_nqueens(inp, n)
        solution_sets[set_ids[key]] = [encode_nqueens(b)
                                       for b in nqueens_completions(clues, solutions)]

    order = rng.stream("split").permutation(len(input_keys))
    n_test = max(1, round(test_fraction * len(input_keys)))
    test_keys = {input_keys[int(i)] for i in order[:n_test]}

    def build(keys_filter) -> list[Instance]:
        out = []
        for key in input_keys:
            if (key in test_keys) != keys_filter:
                continue
            for inp, tgt in by_input[key]:
                out.append(Instance(inp, tgt, set_ids[key]))
        return out

    meta = {
        "generator": {"task": "nqueens", "n": n, "removals": removals, "seed": seed,
                      "max_per_solution": max_per_solution},
        "n_complete_solutions": len(solutions),
        "n_unique_inputs": len(input_keys),
    }
    spec = nqueens_spec(n)
    train = Dataset(spec, build(False), solution_sets, dict(meta, split="train"))
    test = Dataset(spec, build(True), solution_sets, dict(meta, split="test"))
    return train, test
