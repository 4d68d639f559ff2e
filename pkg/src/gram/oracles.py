"""Independent brute-force solvers, validity checkers, and evaluation
metrics.

Everything here is deliberately simple and exhaustive; these functions are
the ground truth the learned model is scored against, so they must not
share code with the model path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from gram.errors import ConfigError, DataError
from gram.encodings import (
    TaskSpec,
    decode_adjacency,
    decode_colors,
    decode_nqueens,
    decode_sudoku,
    encode_colors,
    encode_nqueens,
    queens_from_cols,
)

ENUMERATION_CAP = 200_000


# ---------------------------------------------------------------------------
# Sudoku
# ---------------------------------------------------------------------------

_FULL_UNIT = sum(1 << d for d in range(1, 10))


def sudoku_valid(board: np.ndarray) -> bool:
    """True iff the board is complete and every row, column, and 3x3 box
    contains the digits 1-9 exactly once. Boards with blanks are invalid."""
    board = np.asarray(board)
    if board.shape != (9, 9):
        return False
    if board.min() < 1 or board.max() > 9:
        return False
    for i in range(9):
        row = 0
        col = 0
        for j in range(9):
            row |= 1 << int(board[i, j])
            col |= 1 << int(board[j, i])
        if row != _FULL_UNIT or col != _FULL_UNIT:
            return False
    for bi in range(3):
        for bj in range(3):
            box = 0
            for i in range(3):
                for j in range(3):
                    box |= 1 << int(board[3 * bi + i, 3 * bj + j])
            if box != _FULL_UNIT:
                return False
    return True


def sudoku_completions(board: np.ndarray, cap: int = ENUMERATION_CAP) -> list[np.ndarray]:
    """All completions of a partial board (0 = blank), alphabetical cell
    order backtracking. Raises once more than cap solutions are found."""
    board = np.asarray(board).copy()
    rows = [0] * 9
    cols = [0] * 9
    boxes = [0] * 9
    blanks = []
    for i in range(9):
        for j in range(9):
            d = int(board[i, j])
            if d == 0:
                blanks.append((i, j))
            else:
                bit = 1 << d
                b = 3 * (i // 3) + j // 3
                if rows[i] & bit or cols[j] & bit or boxes[b] & bit:
                    return []
                rows[i] |= bit
                cols[j] |= bit
                boxes[b] |= bit
    out: list[np.ndarray] = []

    def rec(k: int):
        if k == len(blanks):
            out.append(board.copy())
            if len(out) > cap:
                raise DataError(f"sudoku completion count exceeds cap {cap}")
            return
        i, j = blanks[k]
        b = 3 * (i // 3) + j // 3
        used = rows[i] | cols[j] | boxes[b]
        for d in range(1, 10):
            bit = 1 << d
            if used & bit:
                continue
            board[i, j] = d
            rows[i] |= bit
            cols[j] |= bit
            boxes[b] |= bit
            rec(k + 1)
            rows[i] ^= bit
            cols[j] ^= bit
            boxes[b] ^= bit
        board[i, j] = 0

    rec(0)
    return out


def count_sudoku_solutions(board: np.ndarray, limit: int = 2) -> int:
    """Number of completions, stopping early at limit (uniqueness checks)."""
    board = np.asarray(board).copy()
    rows = [0] * 9
    cols = [0] * 9
    boxes = [0] * 9
    blanks = []
    for i in range(9):
        for j in range(9):
            d = int(board[i, j])
            if d == 0:
                blanks.append((i, j))
            else:
                bit = 1 << d
                b = 3 * (i // 3) + j // 3
                if rows[i] & bit or cols[j] & bit or boxes[b] & bit:
                    return 0
                rows[i] |= bit
                cols[j] |= bit
                boxes[b] |= bit
    found = 0

    def rec(k: int) -> bool:
        nonlocal found
        if k == len(blanks):
            found += 1
            return found >= limit
        # most-constrained blank first keeps the tree small
        best, best_used, best_count = -1, 0, 10
        for t in range(k, len(blanks)):
            i, j = blanks[t]
            used = rows[i] | cols[j] | boxes[3 * (i // 3) + j // 3]
            c = 9 - bin(used & _FULL_UNIT).count("1")
            if c < best_count:
                best, best_used, best_count = t, used, c
                if c <= 1:
                    break
        blanks[k], blanks[best] = blanks[best], blanks[k]
        i, j = blanks[k]
        b = 3 * (i // 3) + j // 3
        stop = False
        for d in range(1, 10):
            bit = 1 << d
            if best_used & bit:
                continue
            rows[i] |= bit
            cols[j] |= bit
            boxes[b] |= bit
            stop = rec(k + 1)
            rows[i] ^= bit
            cols[j] ^= bit
            boxes[b] ^= bit
            if stop:
                break
        blanks[k], blanks[best] = blanks[best], blanks[k]
        return stop

    rec(0)
    return found


# ---------------------------------------------------------------------------
# N-Queens
# ---------------------------------------------------------------------------

def nqueens_valid(board: np.ndarray, clues: np.ndarray | None = None) -> bool:
    """Exactly N pairwise non-attacking queens; every clue queen kept."""
    board = np.asarray(board)
    n = board.shape[0]
    queens = list(zip(*np.nonzero(board)))
    if len(queens) != n:
        return False
    for (r1, c1), (r2, c2) in itertools.combinations(queens, 2):
        if r1 == r2 or c1 == c2 or abs(r1 - r2) == abs(c1 - c2):
            return False
    if clues is not None:
        if np.any((np.asarray(clues) > 0) & (board <= 0)):
            return False
    return True


def nqueens_solutions_backtracking(n: int) -> list[tuple[int, ...]]:
    """All complete placements, one column index per row."""
    out: list[tuple[int, ...]] = []
    cols = [False] * n
    diag1 = [False] * (2 * n - 1)
    diag2 = [False] * (2 * n - 1)
    stack: list[int] = []

    def rec(row: int):
        if row == n:
            out.append(tuple(stack))
            return
        for c in range(n):
            if cols[c] or diag1[row + c] or diag2[row - c + n - 1]:
                continue
            cols[c] = diag1[row + c] = diag2[row - c + n - 1] = True
            stack.append(c)
            rec(row + 1)
            stack.pop()
            cols[c] = diag1[row + c] = diag2[row - c + n - 1] = False

    rec(0)
    return out


def nqueens_solutions_permutations(n: int) -> list[tuple[int, ...]]:
    """Independent enumeration: filter all column permutations for diagonal
    conflicts. Exhaustive, so capped at small n."""
    if n > 9:
        raise ConfigError(f"permutation enumeration is O(n!), refusing n={n} > 9")
    out = []
    for perm in itertools.permutations(range(n)):
        if len({perm[r] + r for r in range(n)}) == n and len({perm[r] - r for r in range(n)}) == n:
            out.append(perm)
    return out


def nqueens_completions(clues: np.ndarray, all_solutions: list[tuple[int, ...]] | None = None) -> list[np.ndarray]:
    """All complete solutions containing every clue queen, as boards."""
    clues = np.asarray(clues)
    n = clues.shape[0]
    if all_solutions is None:
        all_solutions = nqueens_solutions_backtracking(n)
    clue_pos = set(zip(*np.nonzero(clues)))
    out = []
    for sol in all_solutions:
        if all(sol[r] == c for r, c in clue_pos):
            out.append(queens_from_cols(sol, n))
    return out


# ---------------------------------------------------------------------------
# Graph coloring
# ---------------------------------------------------------------------------

def coloring_conflicts(adj: np.ndarray, colors: np.ndarray, n_colors: int = 3) -> int:
    """Edges whose endpoints share a color. A vertex with an out-of-range
    color counts as conflicting on every incident edge."""
    adj = np.asarray(adj)
    colors = np.asarray(colors)
    n = adj.shape[0]
    if colors.shape != (n,):
        raise DataError(f"expected {n} colors, got {colors.shape}")
    invalid = (colors < 0) | (colors >= n_colors)
    iu, ju = np.triu_indices(n, k=1)
    edge = adj[iu, ju] > 0
    bad = invalid[iu] | invalid[ju] | (colors[iu] == colors[ju])
    return int(np.sum(edge & bad))


def canonical_coloring(colors: np.ndarray) -> tuple[int, ...]:
    """Relabel colors in order of first appearance, deduplicating solutions
    that differ only by a color permutation."""
    mapping: dict[int, int] = {}
    out = []
    for c in colors:
        c = int(c)
        if c not in mapping:
            mapping[c] = len(mapping)
        out.append(mapping[c])
    return tuple(out)


def coloring_solutions_exhaustive(adj: np.ndarray, k: int = 3) -> list[tuple[int, ...]]:
    """All canonical proper k-colorings by scanning every assignment."""
    adj = np.asarray(adj)
    n = adj.shape[0]
    if k ** n > ENUMERATION_CAP * 4:
        raise ConfigError(f"exhaustive coloring scan too large for n={n}, k={k}")
    iu, ju = np.triu_indices(n, k=1)
    edges = [(int(i), int(j)) for i, j, e in zip(iu, ju, adj[iu, ju]) if e > 0]
    seen: set[tuple[int, ...]] = set()
    for assign in itertools.product(range(k), repeat=n):
        if all(assign[i] != assign[j] for i, j in edges):
            seen.add(canonical_coloring(np.array(assign)))
    return sorted(seen)


def coloring_solutions_backtracking(adj: np.ndarray, k: int = 3) -> list[tuple[int, ...]]:
    """Independent enumeration by vertex-order backtracking with canonical
    pruning: vertex colors never exceed (max color so far) + 1, which yields
    exactly the canonical forms."""
    adj = np.asarray(adj)
    n = adj.shape[0]
    colors = np.full(n, -1)
    out: list[tuple[int, ...]] = []

    def rec(v: int, used: int):
        if v == n:
            out.append(tuple(int(c) for c in colors))
            return
        limit = min(used + 1, k)
        for c in range(limit):
            if any(adj[v, u] and colors[u] == c for u in range(v)):
                continue
            colors[v] = c
            rec(v + 1, max(used, c + 1))
            colors[v] = -1

    rec(0, 0)
    return sorted(out)


# ---------------------------------------------------------------------------
# Instance-level dispatch
# ---------------------------------------------------------------------------

def enumerate_solutions(spec: TaskSpec, input_tokens: np.ndarray, cap: int = ENUMERATION_CAP) -> list[np.ndarray]:
    """The complete set of valid target token sequences for one instance.
    Exhaustive; guarded with a hard cap."""
    if spec.name == "nqueens":
        n = spec.board_n
        if n > 10:
            raise ConfigError(f"refusing exhaustive enumeration for n={n} > 10")
        clues = decode_nqueens(np.asarray(input_tokens), n)
        return [encode_nqueens(b) for b in nqueens_completions(clues)]
    if spec.name == "coloring":
        n = spec.board_n
        if n > 10:
            raise ConfigError(f"refusing exhaustive enumeration for n={n} > 10")
        adj = decode_adjacency(np.asarray(input_tokens), n)
        return [encode_colors(np.array(c)) for c in coloring_solutions_exhaustive(adj)]
    if spec.name == "sudoku":
        board = decode_sudoku(np.asarray(input_tokens))
        sols = sudoku_completions(board, cap)
        return [board_tokens for board_tokens in ((b + 1).reshape(81) for b in sols)]
    raise ConfigError(f"solution sets are not enumerable for task {spec.name!r}")


def prediction_valid(spec: TaskSpec, input_tokens: np.ndarray | None, pred: np.ndarray) -> bool:
    """Task-level correctness: satisfies every constraint and keeps the
    instance's given clues."""
    pred = np.asarray(pred)
    if spec.name in ("sudoku", "sudoku-uncond"):
        board = decode_sudoku(pred[:81], strict=False)
        if not sudoku_valid(board):
            return False
        if spec.conditional and input_tokens is not None:
            clues = decode_sudoku(np.asarray(input_tokens), strict=False)
            return bool(np.all((clues == 0) | (clues == board)))
        return True
    if spec.name == "nqueens":
        n = spec.board_n
        board = decode_nqueens(pred[: n * n], n)
        clues = decode_nqueens(np.asarray(input_tokens), n)
        return nqueens_valid(board, clues)
    if spec.name == "coloring":
        n = spec.board_n
        adj = decode_adjacency(np.asarray(input_tokens), n)
        colors = decode_colors(pred[:n])
        return bool(np.all(colors >= 0)) and coloring_conflicts(adj, colors) == 0
    raise ConfigError(f"no validity rule for task {spec.name!r}")


def prediction_conflicts(spec: TaskSpec, input_tokens: np.ndarray | None, pred: np.ndarray) -> int | None:
    if spec.name != "coloring":
        return None
    n = spec.board_n
    adj = decode_adjacency(np.asarray(input_tokens), n)
    return coloring_conflicts(adj, decode_colors(np.asarray(pred)[:n]))


def _solution_key(spec: TaskSpec, pred: np.ndarray) -> bytes:
    """Key under which predictions are matched against stored solutions
    (canonical form for colorings, exact tokens otherwise)."""
    pred = np.asarray(pred)
    if spec.name == "coloring":
        colors = decode_colors(pred[: spec.board_n])
        return np.asarray(canonical_coloring(colors), np.int64).tobytes()
    return pred[: spec.target_len].astype(np.int64).tobytes()


def coverage_fraction(spec: TaskSpec, input_tokens: np.ndarray | None, preds: list[np.ndarray],
                      solution_set: list[np.ndarray]) -> float:
    """found / total valid solutions among the sampled predictions."""
    keys = {_solution_key(spec, s) for s in solution_set}
    found = set()
    for p in preds:
        if prediction_valid(spec, input_tokens, p):
            k = _solution_key(spec, p)
            if k in keys:
                found.add(k)
    return len(found) / len(keys) if keys else 0.0


@dataclass
class MetricsReport:
    accuracy: float
    coverage: float | None
    conflict: float | None
    validity: float | None
    unique_valid: int | None
    n_samples: int
    n_inputs: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "coverage": self.coverage,
            "conflict": self.conflict,
            "validity": self.validity,
            "unique_valid": self.unique_valid,
            "n_samples": self.n_samples,
            "n_inputs": self.n_inputs,
        }


def compute_metrics(spec: TaskSpec, instances, predictions: list[list[np.ndarray]],
                    solution_sets: dict[int, list[np.ndarray]] | None = None) -> MetricsReport:
    """Scores width-N predictions per input.

    accuracy: fraction of inputs whose first sample satisfies all
    constraints. coverage: per-input fraction of the full solution set found
    among the N samples, averaged. conflict: mean violated edges of the
    first sample (coloring). validity / unique_valid: fraction of all
    samples that are valid and the count of distinct valid outputs
    (generation tasks)."""
    if len(instances) != len(predictions):
        raise ConfigError("one prediction list per instance required")
    n_samples = len(predictions[0]) if predictions else 0
    for preds in predictions:
        if len(preds) != n_samples:
            raise ConfigError("sample-count mismatch across inputs")
    acc, cov, conf = [], [], []
    valid_flags = []
    unique_valid: set[bytes] = set()
    for inst, preds in zip(instances, predictions):
        x = inst.input_tokens
        acc.append(1.0 if prediction_valid(spec, x, preds[0]) else 0.0)
        c = prediction_conflicts(spec, x, preds[0])
        if c is not None:
            conf.append(c)
        if solution_sets is not None and spec.conditional:
            sset = solution_sets[inst.solution_set_id]
            cov.append(coverage_fraction(spec, x, list(preds), sset))
        for p in preds:
            ok = prediction_valid(spec, x, p)
            valid_flags.append(1.0 if ok else 0.0)
            if ok:
                unique_valid.add(np.asarray(p).astype(np.int64).tobytes())
    return MetricsReport(
        accuracy=100.0 * float(np.mean(acc)) if acc else 0.0,
        coverage=100.0 * float(np.mean(cov)) if cov else None,
        conflict=float(np.mean(conf)) if conf else None,
        validity=100.0 * float(np.mean(valid_flags)) if valid_flags else None,
        unique_valid=len(unique_valid),
        n_samples=n_samples,
        n_inputs=len(instances),
    )
