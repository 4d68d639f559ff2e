"""Token codecs and task descriptors.

Sudoku: 9x9 grid flattened row-major to 81 tokens, vocab 11
        (0=pad, 1=blank, 2-10 = digits 1-9).
N-Queens: NxN board flattened row-major to N^2 tokens, vocab 3
        (0=pad, 1=empty, 2=queen).
Graph coloring: strict upper triangle of the adjacency matrix, row-major,
        n(n-1)/2 tokens, vocab 6 (0=pad, 1=no-edge, 2=edge; outputs use
        3+color for colors 0..2). Targets are n color tokens, padded with
        0 up to the input length for the loss.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from gram.errors import ConfigError, DataError


@dataclass(frozen=True)
class TaskSpec:
    name: str
    seq_len: int
    vocab_size: int
    encoding: str
    conditional: bool = True
    target_len: int = 0  # 0 means same as seq_len
    board_n: int = 0     # board/graph size parameter where applicable

    def __post_init__(self):
        if self.target_len == 0:
            object.__setattr__(self, "target_len", self.seq_len)
        if self.target_len > self.seq_len:
            raise ConfigError("target_len cannot exceed seq_len")

    def to_dict(self) -> dict:
        return asdict(self)


def sudoku_spec(conditional: bool = True) -> TaskSpec:
    return TaskSpec(name="sudoku" if conditional else "sudoku-uncond",
                    seq_len=81, vocab_size=11,
                    encoding="9x9 row-major; 0=pad 1=blank 2-10=digits",
                    conditional=conditional, board_n=9)


def nqueens_spec(n: int) -> TaskSpec:
    return TaskSpec(name="nqueens", seq_len=n * n, vocab_size=3,
                    encoding="NxN row-major; 0=pad 1=empty 2=queen", board_n=n)


def coloring_spec(n: int) -> TaskSpec:
    return TaskSpec(name="coloring", seq_len=n * (n - 1) // 2, vocab_size=6,
                    encoding="strict upper-triangle row-major; 0=pad 1=no-edge 2=edge; colors 3-5",
                    target_len=n, board_n=n)


def spec_from_dict(d: dict) -> TaskSpec:
    return TaskSpec(**d)


# -- Sudoku ------------------------------------------------------------------

def encode_sudoku(board: np.ndarray) -> np.ndarray:
    """board: [9,9] ints, 0 for blank, 1-9 for digits."""
    board = np.asarray(board)
    if board.shape != (9, 9):
        raise DataError(f"expected 9x9 board, got {board.shape}")
    if board.min() < 0 or board.max() > 9:
        raise DataError("sudoku cells must be 0 (blank) or 1-9")
    return (board + 1).reshape(81).astype(np.int64)


def decode_sudoku(tokens: np.ndarray, strict: bool = True) -> np.ndarray:
    """Inverse of encode_sudoku. With strict=False, out-of-domain tokens
    (pad) decode as blanks so model outputs can always be inspected."""
    tokens = np.asarray(tokens)
    if tokens.shape != (81,):
        raise DataError(f"expected 81 tokens, got {tokens.shape}")
    if strict and (tokens.min() < 1 or tokens.max() > 10):
        raise DataError("sudoku tokens must be in [1, 10]")
    board = tokens.reshape(9, 9).astype(np.int64) - 1
    return np.where((board >= 0) & (board <= 9), board, 0)


# -- N-Queens ----------------------------------------------------------------

def encode_nqueens(board: np.ndarray) -> np.ndarray:
    """board: [N,N] with 1 where a queen stands."""
    board = np.asarray(board)
    n = board.shape[0]
    if board.shape != (n, n):
        raise DataError(f"expected square board, got {board.shape}")
    return np.where(board > 0, 2, 1).reshape(n * n).astype(np.int64)


def decode_nqueens(tokens: np.ndarray, n: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape != (n * n,):
        raise DataError(f"expected {n * n} tokens, got {tokens.shape}")
    return (tokens.reshape(n, n) == 2).astype(np.int64)


def queens_from_cols(cols, n: int) -> np.ndarray:
    """Column-per-row representation to a 0/1 board."""
    board = np.zeros((n, n), np.int64)
    board[np.arange(n), list(cols)] = 1
    return board


# -- Graph coloring ----------------------------------------------------------

def encode_adjacency(adj: np.ndarray) -> np.ndarray:
    adj = np.asarray(adj)
    n = adj.shape[0]
    if adj.shape != (n, n) or not np.array_equal(adj, adj.T):
        raise DataError("adjacency must be a symmetric square matrix")
    iu = np.triu_indices(n, k=1)
    return np.where(adj[iu] > 0, 2, 1).astype(np.int64)


def decode_adjacency(tokens: np.ndarray, n: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape != (n * (n - 1) // 2,):
        raise DataError(f"expected {n * (n - 1) // 2} tokens for n={n}, got {tokens.shape}")
    adj = np.zeros((n, n), np.int64)
    iu = np.triu_indices(n, k=1)
    adj[iu] = (tokens == 2).astype(np.int64)
    return adj + adj.T


def encode_colors(colors: np.ndarray) -> np.ndarray:
    colors = np.asarray(colors)
    if colors.min() < 0 or colors.max() > 2:
        raise DataError("colors must be in {0, 1, 2}")
    return (colors + 3).astype(np.int64)


def decode_colors(tokens: np.ndarray) -> np.ndarray:
    """Color ids; tokens outside 3-5 decode to -1 (malformed sentinel)."""
    tokens = np.asarray(tokens)
    colors = tokens.astype(np.int64) - 3
    return np.where((colors >= 0) & (colors <= 2), colors, -1)


def pad_target(target: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Pad a natural-length target with the ignore token up to seq_len."""
    target = np.asarray(target)
    if target.shape != (spec.target_len,):
        raise DataError(f"expected target length {spec.target_len}, got {target.shape}")
    if spec.target_len == spec.seq_len:
        return target.astype(np.int64)
    out = np.zeros(spec.seq_len, np.int64)
    out[: spec.target_len] = target
    return out
