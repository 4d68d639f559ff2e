"""Dataset container and its text serialization.

Main file: one record per line, `input_tokens;target_tokens;solution_set_id`
with tokens as space-separated ints; the input field is empty for
unconditional instances. A `.solutions` sidecar maps each set id to every
valid target (`id;tokens|tokens|...`), and a `.meta.json` sidecar records
the task spec and generator parameters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from gram.errors import DataError
from gram.encodings import TaskSpec, pad_target, spec_from_dict


@dataclass
class Instance:
    input_tokens: np.ndarray | None
    target_tokens: np.ndarray
    solution_set_id: int


@dataclass
class Dataset:
    spec: TaskSpec
    instances: list[Instance]
    solution_sets: dict[int, list[np.ndarray]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instances)

    def model_inputs(self) -> np.ndarray | None:
        """[B, seq_len] input matrix, or None for unconditional data."""
        if not self.spec.conditional:
            return None
        return np.stack([inst.input_tokens for inst in self.instances])

    def model_targets(self) -> np.ndarray:
        """[B, seq_len] target matrix, padded with the ignore token."""
        return np.stack([pad_target(inst.target_tokens, self.spec) for inst in self.instances])

    def unique_input_instances(self) -> list[Instance]:
        """One representative instance per distinct input (evaluation unit)."""
        seen: set = set()
        out = []
        for inst in self.instances:
            key = None if inst.input_tokens is None else inst.input_tokens.tobytes()
            if key in seen:
                continue
            seen.add(key)
            out.append(inst)
        return out


def _fmt_tokens(tokens: np.ndarray | None) -> str:
    if tokens is None:
        return ""
    return " ".join(str(int(t)) for t in tokens)


def _parse_tokens(text: str, lineno: int, what: str) -> np.ndarray | None:
    text = text.strip()
    if not text:
        return None
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"line {lineno}: malformed {what} tokens") from exc


def _check_vocab(tokens: np.ndarray, vocab: int, lineno: int, what: str) -> None:
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise DataError(f"line {lineno}: {what} token outside vocabulary [0, {vocab})")


def save_dataset(ds: Dataset, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for inst in ds.instances:
            f.write(f"{_fmt_tokens(inst.input_tokens)};{_fmt_tokens(inst.target_tokens)};"
                    f"{inst.solution_set_id}\n")
    with open(path + ".solutions", "w") as f:
        for sid in sorted(ds.solution_sets):
            targets = "|".join(_fmt_tokens(t) for t in ds.solution_sets[sid])
            f.write(f"{sid};{targets}\n")
    meta = dict(ds.meta)
    meta["task"] = ds.spec.to_dict()
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)


def load_dataset(path: str) -> Dataset:
    for part in (path, path + ".meta.json", path + ".solutions"):
        if not os.path.exists(part):
            raise DataError(f"dataset file not found: {part}")
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    spec = spec_from_dict(meta["task"])

    instances = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(";")
            if len(parts) != 3:
                raise DataError(f"line {lineno}: expected 3 ';'-separated fields")
            inp = _parse_tokens(parts[0], lineno, "input")
            tgt = _parse_tokens(parts[1], lineno, "target")
            if tgt is None:
                raise DataError(f"line {lineno}: missing target tokens")
            if spec.conditional:
                if inp is None:
                    raise DataError(f"line {lineno}: conditional task requires input tokens")
                if inp.shape != (spec.seq_len,):
                    raise DataError(f"line {lineno}: expected {spec.seq_len} input tokens")
                _check_vocab(inp, spec.vocab_size, lineno, "input")
            elif inp is not None:
                raise DataError(f"line {lineno}: unconditional task forbids input tokens")
            if tgt.shape != (spec.target_len,):
                raise DataError(f"line {lineno}: expected {spec.target_len} target tokens")
            _check_vocab(tgt, spec.vocab_size, lineno, "target")
            try:
                sid = int(parts[2])
            except ValueError as exc:
                raise DataError(f"line {lineno}: malformed solution set id") from exc
            instances.append(Instance(inp, tgt, sid))

    solution_sets: dict[int, list[np.ndarray]] = {}
    with open(path + ".solutions") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            sid_text, _, rest = line.partition(";")
            try:
                sid = int(sid_text)
            except ValueError as exc:
                raise DataError(f"solutions line {lineno}: malformed id") from exc
            targets = []
            for chunk in rest.split("|"):
                tgt = _parse_tokens(chunk, lineno, "solution")
                if tgt is None:
                    raise DataError(f"solutions line {lineno}: empty solution entry")
                _check_vocab(tgt, spec.vocab_size, lineno, "solution")
                targets.append(tgt)
            solution_sets[sid] = targets

    for i, inst in enumerate(instances, 1):
        if inst.solution_set_id not in solution_sets:
            raise DataError(f"line {i}: solution set id {inst.solution_set_id} has no sidecar entry")
    return Dataset(spec=spec, instances=instances, solution_sets=solution_sets, meta=meta)


def solution_histogram(ds: Dataset) -> dict[str, int]:
    """instance count keyed by the instance's solution-set size."""
    hist: dict[str, int] = {}
    for inst in ds.instances:
        k = str(len(ds.solution_sets[inst.solution_set_id]))
        hist[k] = hist.get(k, 0) + 1
    return hist
