"""Sudoku board generation.

Complete boards come from randomized most-constrained-cell backtracking.
For the unconditional task each instance is (no input, complete board).
For the conditional task a local stand-in generator reduces complete
boards to puzzles while a counting solver certifies the solution stays
unique; this is synthetic data, not any published puzzle collection.
"""

from __future__ import annotations

import numpy as np

from gram.errors import DataError
from gram.numerics.rng import RngStream
from gram.oracles import count_sudoku_solutions, sudoku_valid
from gram.tasks.dataset import Dataset, Instance
from gram.encodings import encode_sudoku, sudoku_spec

_FULL = sum(1 << d for d in range(1, 10))


def random_complete_board(rng: RngStream) -> np.ndarray:
    """One uniform-ish complete board via randomized backtracking, always
    branching at the most constrained blank cell."""
    board = np.zeros((9, 9), np.int64)
    rows = [0] * 9
    cols = [0] * 9
    boxes = [0] * 9
    cells = [(i, j) for i in range(9) for j in range(9)]

    def rec(k: int) -> bool:
        if k == 81:
            return True
        best, best_used, best_n = k, 0, 10
        for t in range(k, 81):
            i, j = cells[t]
            used = rows[i] | cols[j] | boxes[3 * (i // 3) + j // 3]
            n_free = 9 - bin(used & _FULL).count("1")
            if n_free == 0:
                return False
            if n_free < best_n:
                best, best_used, best_n = t, used, n_free
                if n_free == 1:
                    break
        cells[k], cells[best] = cells[best], cells[k]
        i, j = cells[k]
        b = 3 * (i // 3) + j // 3
        digits = [d for d in range(1, 10) if not (best_used >> d) & 1]
        for idx in rng.permutation(len(digits)):
            d = digits[int(idx)]
            bit = 1 << d
            board[i, j] = d
            rows[i] |= bit
            cols[j] |= bit
            boxes[b] |= bit
            if rec(k + 1):
                return True
            rows[i] ^= bit
            cols[j] ^= bit
            boxes[b] ^= bit
        board[i, j] = 0
        cells[k], cells[best] = cells[best], cells[k]
        return False

    if not rec(0):
        raise DataError("board generation failed (should be impossible)")
    return board


def reduce_to_puzzle(board: np.ndarray, rng: RngStream, min_clues: int = 30) -> np.ndarray:
    """Blank random cells while the completion stays unique."""
    puzzle = board.copy()
    order = rng.permutation(81)
    clues = 81
    for flat in order:
        if clues <= min_clues:
            break
        i, j = divmod(int(flat), 9)
        kept = puzzle[i, j]
        puzzle[i, j] = 0
        if count_sudoku_solutions(puzzle, limit=2) != 1:
            puzzle[i, j] = kept
        else:
            clues -= 1
    return puzzle


def gen_sudoku_unconditional(n_boards: int, seed: int) -> Dataset:
    """Distinct complete boards as targets, with the empty-conditioning
    marker as input."""
    rng = RngStream(seed, ("sudoku-uncond",))
    seen: set[bytes] = set()
    instances = []
    solution_sets = {}
    while len(instances) < n_boards:
        board = random_complete_board(rng.stream("board", len(seen), rng.counter))
        key = board.tobytes()
        if key in seen:
            continue
        seen.add(key)
        assert sudoku_valid(board)
        sid = len(instances)
        target = encode_sudoku(board)
        instances.append(Instance(None, target, sid))
        solution_sets[sid] = [target]
    spec = sudoku_spec(conditional=False)
    meta = {"generator": {"task": "sudoku-uncond", "n_boards": n_boards, "seed": seed}}
    return Dataset(spec, instances, solution_sets, meta)


def gen_sudoku_conditional(n_puzzles: int, seed: int, min_clues: int = 30) -> tuple[Dataset, Dataset]:
    """Local stand-in conditional data: unique-solution puzzles reduced from
    random complete boards (synthetic, not a published benchmark)."""
    rng = RngStream(seed, ("sudoku-cond",))
    instances = []
    solution_sets = {}
    seen: set[bytes] = set()
    i = 0
    while len(instances) < n_puzzles:
        board = random_complete_board(rng.stream("board", i))
        puzzle = reduce_to_puzzle(board, rng.stream("reduce", i), min_clues)
        i += 1
        key = encode_sudoku(puzzle).tobytes()
        if key in seen:
            continue
        seen.add(key)
        sid = len(instances)
        instances.append(Instance(encode_sudoku(puzzle), encode_sudoku(board), sid))
        solution_sets[sid] = [encode_sudoku(board)]
    spec = sudoku_spec(conditional=True)
    meta = {"generator": {"task": "sudoku", "n_puzzles": n_puzzles, "seed": seed,
                          "min_clues": min_clues, "note": "synthetic stand-in data"}}
    n_test = max(1, round(0.15 * len(instances)))
    order = rng.stream("split").permutation(len(instances))
    test_idx = {int(k) for k in order[:n_test]}
    train = Dataset(spec, [inst for k, inst in enumerate(instances) if k not in test_idx],
                    solution_sets, dict(meta, split="train"))
    test = Dataset(spec, [inst for k, inst in enumerate(instances) if k in test_idx],
                   solution_sets, dict(meta, split="test"))
    return train, test
