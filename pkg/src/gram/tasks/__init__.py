from gram.encodings import (
    TaskSpec,
    coloring_spec,
    decode_adjacency,
    decode_colors,
    decode_nqueens,
    decode_sudoku,
    encode_adjacency,
    encode_colors,
    encode_nqueens,
    encode_sudoku,
    nqueens_spec,
    pad_target,
    queens_from_cols,
    spec_from_dict,
    sudoku_spec,
)
from gram.tasks.dataset import Dataset, Instance, load_dataset, save_dataset, solution_histogram
from gram.tasks.nqueens import gen_nqueens
from gram.tasks.coloring import gen_graph_coloring
from gram.tasks.sudoku import (
    gen_sudoku_conditional,
    gen_sudoku_unconditional,
    random_complete_board,
    reduce_to_puzzle,
)

__all__ = [
    "TaskSpec", "Dataset", "Instance", "load_dataset", "save_dataset", "solution_histogram",
    "sudoku_spec", "nqueens_spec", "coloring_spec", "spec_from_dict",
    "encode_sudoku", "decode_sudoku", "encode_nqueens", "decode_nqueens",
    "encode_adjacency", "decode_adjacency", "encode_colors", "decode_colors",
    "queens_from_cols", "pad_target",
    "gen_nqueens", "gen_graph_coloring", "gen_sudoku_conditional", "gen_sudoku_unconditional",
    "random_complete_board", "reduce_to_puzzle",
]
