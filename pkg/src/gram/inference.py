"""Prior-mode rollouts and inference-time scaling.

Depth scaling runs more supervision steps (optionally cut short by the
learned halting head); width scaling draws N independent trajectories,
trajectory i always on noise stream i, so any width-N result is a prefix of
any wider one and results never depend on scheduling. Candidates are
reduced by majority vote, by highest predicted value, or by a ground-truth
oracle selector used for monotonicity checks.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from gram import oracles
from gram.errors import ConfigError
from gram.model import GramModel, predict_tokens, sample_tokens
from gram.numerics import tensor as T
from gram.numerics.rng import RngStream
from gram.tasks.dataset import Dataset
from gram.encodings import pad_target


@dataclass
class TrajectoryRecord:
    predictions: list[np.ndarray]       # per supervision step, content tokens
    q_values: np.ndarray                # [steps, 2] halt/continue values
    values: np.ndarray                  # [steps] value-head outputs
    halting_step: int                   # 1-based; == steps run
    final_prediction: np.ndarray
    h_means: np.ndarray | None = None   # [steps, D] content-mean high-level state
    per_step_nll: np.ndarray | None = None

    @property
    def final_value(self) -> float:
        return float(self.values[self.halting_step - 1])


@dataclass
class SelectionResult:
    chosen: np.ndarray
    chosen_index: int
    method: str
    scores: list[float]
    candidates: list[np.ndarray]


def rollout(model: GramModel, x_tokens: np.ndarray | None, n_sup_max: int, rng: RngStream,
            act_enabled: bool = False, act_rule: str = "compare", decoder: str = "argmax",
            z0_mode: str = "fixed", collect_h: bool = False,
            target: np.ndarray | None = None) -> TrajectoryRecord:
    """One trajectory from the frozen initial state under the learned prior.
    Halts at the first step whose halt value beats its continue value (or
    sigmoid(halt) > 0.5 under the simplified rule) when act_enabled."""
    if act_rule not in ("compare", "sigmoid"):
        raise ConfigError(f"unknown act rule {act_rule!r}")
    if decoder not in ("argmax", "sampled"):
        raise ConfigError(f"unknown decoder {decoder!r}")
    if z0_mode not in ("fixed", "random"):
        raise ConfigError(f"unknown z0 mode {z0_mode!r}")
    cfg = model.config
    preds: list[np.ndarray] = []
    qs: list[np.ndarray] = []
    vals: list[float] = []
    h_means: list[np.ndarray] = [] if collect_h else None
    nlls: list[float] = [] if target is not None else None
    with T.no_grad():
        if x_tokens is not None:
            x_tokens = np.asarray(x_tokens).reshape(1, -1)
        e_x = model.encode(x_tokens, batch_size=1)
        if z0_mode == "random":
            shape = (cfg.total_len, cfg.d_model)
            z = model.initial_state(1, override=(rng.normal(shape), rng.normal(shape)))
        else:
            z = model.initial_state(1)
        halting_step = n_sup_max
        for n in range(1, n_sup_max + 1):
            z, _ = model.supervision_step(z, e_x, "prior", None, rng, truncate=False)
            logits, q, value = model.decode(z)
            if decoder == "argmax":
                pred = predict_tokens(logits)[0]
            else:
                pred = sample_tokens(logits, rng)[0]
            preds.append(pred)
            qs.append(q.data[0].copy())
            vals.append(float(value.data[0, 0]))
            if collect_h:
                content_h = z.h.data[0, cfg.n_puzzle_tokens:, :]
                h_means.append(content_h.mean(axis=0))
            if target is not None:
                nlls.append(float(T.softmax_cross_entropy(
                    logits, np.asarray(target).reshape(1, -1)).data))
            if act_enabled:
                halt, cont = float(q.data[0, 0]), float(q.data[0, 1])
                stop = halt > cont if act_rule == "compare" else halt > 0.0
                if stop:
                    halting_step = n
                    break
    return TrajectoryRecord(
        predictions=preds,
        q_values=np.array(qs, dtype=np.float32),
        values=np.array(vals, dtype=np.float32),
        halting_step=halting_step,
        final_prediction=preds[halting_step - 1],
        h_means=np.array(h_means, dtype=np.float32) if collect_h else None,
        per_step_nll=np.array(nlls, dtype=np.float32) if target is not None else None,
    )


def sample_width(model: GramModel, x_tokens: np.ndarray | None, n: int, n_sup_max: int,
                 rng: RngStream, threads: int = 1, **rollout_kw) -> list[TrajectoryRecord]:
    """N independent rollouts, trajectory i on stream i. Stream identity,
    not execution order, determines every draw, so serial and threaded runs
    agree exactly."""
    if n < 1:
        raise ConfigError("width must be >= 1")
    streams = [rng.stream(i) for i in range(1, n + 1)]
    run = lambda s: rollout(model, x_tokens, n_sup_max, s, **rollout_kw)
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, streams))
    return [run(s) for s in streams]


def majority_vote(candidates: list[np.ndarray]) -> SelectionResult:
    """Most frequent full-sequence prediction; ties go to the lowest
    trajectory index."""
    if not candidates:
        raise ConfigError("majority_vote needs at least one candidate")
    counts: dict[bytes, int] = {}
    for c in candidates:
        counts[np.asarray(c).tobytes()] = counts.get(np.asarray(c).tobytes(), 0) + 1
    scores = [float(counts[np.asarray(c).tobytes()]) for c in candidates]
    best = int(np.argmax(scores))
    return SelectionResult(chosen=candidates[best], chosen_index=best, method="vote",
                           scores=scores, candidates=list(candidates))


def best_of_n_lprm(candidates: list[np.ndarray], values: list[float]) -> SelectionResult:
    """Candidate with the highest predicted terminal value; ties go to the
    lowest trajectory index."""
    if not candidates:
        raise ConfigError("best_of_n_lprm needs at least one candidate")
    if len(candidates) != len(values):
        raise ConfigError("one value per candidate required")
    best = int(np.argmax(values))
    return SelectionResult(chosen=candidates[best], chosen_index=best, method="lprm",
                           scores=[float(v) for v in values], candidates=list(candidates))


def oracle_select(candidates: list[np.ndarray], is_valid) -> SelectionResult:
    """First candidate the ground-truth checker accepts (index 0 if none).
    Only for monotonicity analysis; never a deployable selector."""
    scores = [1.0 if is_valid(c) else 0.0 for c in candidates]
    best = int(np.argmax(scores))
    return SelectionResult(chosen=candidates[best], chosen_index=best, method="oracle",
                           scores=scores, candidates=list(candidates))


def select(method: str, records: list[TrajectoryRecord], is_valid=None) -> SelectionResult:
    cands = [r.final_prediction for r in records]
    if method == "vote":
        return majority_vote(cands)
    if method == "lprm":
        return best_of_n_lprm(cands, [r.final_value for r in records])
    if method == "oracle":
        if is_valid is None:
            raise ConfigError("oracle selection needs a validity checker")
        return oracle_select(cands, is_valid)
    raise ConfigError(f"unknown selector {method!r}")


def evaluate_dataset(model: GramModel, ds: Dataset, width: int, n_sup_max: int,
                     rng: RngStream, act_enabled: bool = False, threads: int = 1,
                     **rollout_kw) -> tuple[oracles.MetricsReport, list[list[np.ndarray]]]:
    """Width-N sampling over each distinct input, scored by the oracles."""
    insts = ds.unique_input_instances()
    predictions = []
    for i, inst in enumerate(insts):
        recs = sample_width(model, inst.input_tokens, width, n_sup_max,
                            rng.stream("input", i), threads=threads,
                            act_enabled=act_enabled, **rollout_kw)
        predictions.append([r.final_prediction for r in recs])
    report = oracles.compute_metrics(ds.spec, insts, predictions, ds.solution_sets)
    return report, predictions


def depth_width_sweep(model: GramModel, ds: Dataset, depths: list[int], widths: list[int],
                      selector: str, rng: RngStream, threads: int = 1) -> list[dict]:
    """Metrics for every (depth, width) cell. Width subsets are prefixes of
    the same trajectory pool, so oracle-selector accuracy is monotone in
    width by construction."""
    insts = ds.unique_input_instances()
    widths = sorted(widths)
    max_w = widths[-1]
    rows = []
    for depth in depths:
        pools = []
        for i, inst in enumerate(insts):
            pools.append(sample_width(model, inst.input_tokens, max_w, depth,
                                      rng.stream("depth", depth, "input", i), threads=threads))
        for width in widths:
            n_acc, covs, confs = 0, [], []
            for inst, pool in zip(insts, pools):
                subset = pool[:width]
                is_valid = lambda p: oracles.prediction_valid(ds.spec, inst.input_tokens, p)
                sel = select(selector, subset, is_valid)
                if is_valid(sel.chosen):
                    n_acc += 1
                c = oracles.prediction_conflicts(ds.spec, inst.input_tokens, sel.chosen)
                if c is not None:
                    confs.append(c)
                if ds.spec.conditional and ds.solution_sets:
                    covs.append(oracles.coverage_fraction(
                        ds.spec, inst.input_tokens,
                        [r.final_prediction for r in subset],
                        ds.solution_sets[inst.solution_set_id]))
            rows.append({
                "depth": depth,
                "width": width,
                "selector": selector,
                "accuracy": 100.0 * n_acc / len(insts) if insts else 0.0,
                "coverage": 100.0 * float(np.mean(covs)) if covs else "",
                "conflict": float(np.mean(confs)) if confs else "",
                "n_examples": len(insts),
            })
    return rows


SWEEP_FIELDS = ["depth", "width", "selector", "accuracy", "coverage", "conflict", "n_examples"]


def write_sweep_csv(rows: list[dict], path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def dump_trajectories(model: GramModel, ds: Dataset, n: int, n_sup_max: int, path: str,
                      rng: RngStream, act_enabled: bool = False, threads: int = 1) -> int:
    """Per-step content-mean high-level state for every trajectory, one row
    per executed supervision step. Values print with 9 significant digits so
    fp32 round-trips exactly. Returns the row count."""
    d = model.config.d_model
    insts = ds.unique_input_instances()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    n_rows = 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["input_id", "traj_id", "step", "halted", "loss"]
                        + [f"h_{i}" for i in range(d)])
        for i, inst in enumerate(insts):
            target = pad_target(inst.target_tokens, ds.spec) if inst.target_tokens is not None else None
            recs = sample_width(model, inst.input_tokens, n, n_sup_max, rng.stream("input", i),
                                threads=threads, act_enabled=act_enabled,
                                collect_h=True, target=target)
            for tj, rec in enumerate(recs):
                for step in range(1, rec.halting_step + 1):
                    loss = "" if rec.per_step_nll is None else f"{rec.per_step_nll[step - 1]:.9g}"
                    row = [i, tj, step, int(step == rec.halting_step), loss]
                    row += [f"{v:.9g}" for v in rec.h_means[step - 1]]
                    writer.writerow(row)
                    n_rows += 1
    return n_rows


def read_trajectory_csv(path: str) -> list[dict]:
    """Inverse of dump_trajectories' format (values back to float32)."""
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        h_cols = [c for c in reader.fieldnames if c.startswith("h_")]
        for rec in reader:
            out.append({
                "input_id": int(rec["input_id"]),
                "traj_id": int(rec["traj_id"]),
                "step": int(rec["step"]),
                "halted": int(rec["halted"]),
                "loss": np.float32(rec["loss"]) if rec["loss"] else None,
                "h": np.array([np.float32(rec[c]) for c in h_cols], dtype=np.float32),
            })
    return out
