"""Command-line surface.

Subcommands: gen-data, train, eval, sample, sweep, dump. Training reads a
config file (INI-style key=value sections, or the same structure as JSON),
snapshots it into the run directory, and appends deterministic records to
metrics.jsonl, so any run is reproducible from its run directory alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import os
import sys

import numpy as np

from gram import inference, oracles
from gram.errors import ConfigError, DataError, GramError, NumericError
from gram.model import GramModel, ModelConfig
from gram.numerics.rng import RngStream
from gram.tasks import (
    Dataset,
    gen_graph_coloring,
    gen_nqueens,
    gen_sudoku_conditional,
    gen_sudoku_unconditional,
    load_dataset,
    pad_target,
    save_dataset,
    solution_histogram,
)
from gram.trainer import (
    TrainConfig,
    TrainState,
    elbo_probe,
    load_checkpoint,
    save_checkpoint,
    state_from_checkpoint,
    train_step,
    iterate_batches,
)

RUN_FIELDS = {
    "train_data": str,
    "test_data": str,
    "decoder": str,       # argmax | sampled
    "z0_mode": str,       # fixed | random
    "act_rule": str,      # compare | sigmoid
    "act_at_eval": bool,
    "eval_depth": int,    # 0 -> model n_sup
    "save_every": int,    # epochs between periodic checkpoints; 0 disables
}

RUN_DEFAULTS = {
    "test_data": "",
    "decoder": "argmax",
    "z0_mode": "fixed",
    "act_rule": "compare",
    "act_at_eval": False,
    "eval_depth": 0,
    "save_every": 0,
}


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    run: dict

    def to_json(self) -> str:
        return json.dumps({
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "run": self.run,
        }, sort_keys=True, indent=1)


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if typ is int:
        return int(value)
    if typ is float:
        return float(value)
    return value


def _section_to_kwargs(section: dict, cls, where: str) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    types = {f.name: type(f.default) if f.default is not dataclasses.MISSING else str
             for f in dataclasses.fields(cls)}
    out = {}
    for key, value in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        if isinstance(value, str):
            out[key] = _coerce(value, types[key])
        else:
            out[key] = value
    return out


def parse_run_config(path: str) -> RunConfig:
    """INI sections [model] [train] [run], or a JSON object with the same
    three keys. Unknown keys are rejected."""
    with open(path) as f:
        text = f.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        sections = {k: dict(v) for k, v in raw.items()}
    else:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text, source=path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        sections = {name: dict(cp.items(name)) for name in cp.sections()}
    unknown = set(sections) - {"model", "train", "run"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    run_raw = sections.get("run", {})
    run = dict(RUN_DEFAULTS)
    for key, value in run_raw.items():
        if key not in RUN_FIELDS:
            raise ConfigError(f"unknown key {key!r} in [run]")
        run[key] = _coerce(value, RUN_FIELDS[key]) if isinstance(value, str) else value
    if "train_data" not in run:
        raise ConfigError("[run] train_data is required")

    model_kwargs = _section_to_kwargs(sections.get("model", {}), ModelConfig, "model")
    train_kwargs = _section_to_kwargs(sections.get("train", {}), TrainConfig, "train")

    # sequence length and vocabulary come from the dataset unless pinned
    ds_meta_path = run["train_data"] + ".meta.json"
    if os.path.exists(ds_meta_path):
        with open(ds_meta_path) as f:
            task = json.load(f)["task"]
        model_kwargs.setdefault("seq_len", task["seq_len"])
        model_kwargs.setdefault("vocab_size", task["vocab_size"])
        if model_kwargs["seq_len"] != task["seq_len"] or model_kwargs["vocab_size"] != task["vocab_size"]:
            raise ConfigError("model seq_len/vocab_size disagree with the dataset")
    return RunConfig(model=ModelConfig(**model_kwargs), train=TrainConfig(**train_kwargs), run=run)


def _threads(args) -> int:
    if getattr(args, "threads", 0):
        return args.threads
    return int(os.environ.get("GRAM_THREADS", "1"))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.task == "nqueens":
        removals = [int(k) for k in args.remove.split(",")]
        train, test = gen_nqueens(args.n, removals, args.seed,
                                  max_per_solution=args.max_per_solution or None)
    elif args.task == "coloring":
        train, test = gen_graph_coloring(args.n, args.count, args.seed, p=args.p)
    elif args.task == "sudoku":
        train, test = gen_sudoku_conditional(args.count, args.seed)
    elif args.task == "sudoku-uncond":
        ds = gen_sudoku_unconditional(args.count, args.seed)
        ds.meta["solution_histogram"] = solution_histogram(ds)
        save_dataset(ds, os.path.join(args.out, "data.txt"))
        print(f"wrote {len(ds)} instances to {args.out}/data.txt")
        return 0
    else:
        raise ConfigError(f"unknown task {args.task!r}")
    for name, ds in (("train", train), ("test", test)):
        ds.meta["solution_histogram"] = solution_histogram(ds)
        save_dataset(ds, os.path.join(args.out, f"{name}.txt"))
        print(f"wrote {len(ds)} {name} instances "
              f"({len(ds.unique_input_instances())} unique inputs) to {args.out}/{name}.txt")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _eval_record(model: GramModel, ds: Dataset, width: int, depth: int, rng: RngStream,
                 run: dict, threads: int) -> dict:
    report, _ = inference.evaluate_dataset(
        model, ds, width, depth, rng, act_enabled=run["act_at_eval"],
        act_rule=run["act_rule"], decoder=run["decoder"], z0_mode=run["z0_mode"],
        threads=threads)
    return report.to_dict()


def cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    train_ds = load_dataset(cfg.run["train_data"])
    test_ds = load_dataset(cfg.run["test_data"]) if cfg.run["test_data"] else None

    with open(os.path.join(args.out, "config.json"), "w") as f:
        f.write(cfg.to_json())

    if args.resume:
        ckpt = load_checkpoint(args.resume, expected_config=cfg.model)
        state = state_from_checkpoint(ckpt)
    else:
        state = TrainState.create(cfg.model, cfg.train)

    tc = cfg.train
    x_all = train_ds.model_inputs()
    y_all = train_ds.model_targets()
    n = y_all.shape[0]
    probe_ds = test_ds if test_ds is not None else train_ds
    probe_insts = probe_ds.unique_input_instances()[:32]
    probe_y = np.stack([pad_target(i.target_tokens, probe_ds.spec) for i in probe_insts])
    probe_x = None if not probe_ds.spec.conditional else np.stack(
        [i.input_tokens for i in probe_insts])

    depth = cfg.run["eval_depth"] or cfg.model.n_sup
    threads = _threads(args)
    root = RngStream(tc.seed)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    log = open(metrics_path, "a" if args.resume else "w")

    batches_done = 0
    try:
        for epoch in range(tc.epochs):
            erng = root.stream("epoch", epoch)
            for i, idx in enumerate(iterate_batches(n, tc.batch_size, erng.stream("order"))):
                bx = None if x_all is None else x_all[idx]
                bd = train_step(state, bx, y_all[idx], erng.stream("batch", i))
                batches_done += 1
                log.write(json.dumps({
                    "kind": "train", "epoch": epoch, "batch": i, "step": state.step,
                    "nll": bd.nll, "kl_raw": bd.kl_raw, "kl_balanced": bd.kl_balanced,
                    "act_loss": bd.act_loss, "lprm_loss": bd.lprm_loss, "total": bd.total,
                }, sort_keys=True) + "\n")
                if tc.eval_every and batches_done % tc.eval_every == 0:
                    rec = {"kind": "eval", "step": state.step, "epoch": epoch}
                    erep = elbo_probe(state.model, probe_x, probe_y, cfg.model.n_sup,
                                      seed=tc.seed)
                    rec["elbo"] = {"neg_elbo_full": erep.neg_elbo_full,
                                   "surrogate_avg": erep.surrogate_avg,
                                   "gap": erep.gap, "terminal_nll": erep.terminal_nll}
                    if test_ds is not None and args.eval_metrics:
                        ev_rng = RngStream(tc.seed, ("eval", state.step))
                        rec["raw"] = _eval_record(state.model, test_ds, tc.eval_samples,
                                                  depth, ev_rng, cfg.run, threads)
                        rec["ema"] = _eval_record(state.ema_model(), test_ds, tc.eval_samples,
                                                  depth, ev_rng, cfg.run, threads)
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                    log.flush()
            if cfg.run["save_every"] and (epoch + 1) % cfg.run["save_every"] == 0:
                save_checkpoint(os.path.join(args.out, f"ckpt_epoch{epoch + 1}.bin"), state)
    finally:
        log.close()
    save_checkpoint(os.path.join(args.out, "ckpt_final.bin"), state)
    print(f"trained {state.step} optimizer steps; checkpoint at {args.out}/ckpt_final.bin")
    return 0


# ---------------------------------------------------------------------------
# eval / sample / sweep / dump
# ---------------------------------------------------------------------------

def _load_model(args) -> tuple[GramModel, int]:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model(use_ema=not args.raw)
    depth = args.depth or ckpt.model_config.n_sup
    return model, depth


def cmd_eval(args) -> int:
    model, depth = _load_model(args)
    ds = load_dataset(args.data)
    rng = RngStream(args.seed, ("cli-eval",))
    report, _ = inference.evaluate_dataset(
        model, ds, args.width, depth, rng, act_enabled=args.act,
        decoder=args.decoder, threads=_threads(args))
    blob = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    print(blob)
    if args.out:
        with open(args.out, "w") as f:
            f.write(blob + "\n")
    return 0


def cmd_sample(args) -> int:
    model, depth = _load_model(args)
    ds = load_dataset(args.data)
    rng = RngStream(args.seed, ("cli-sample",))
    report, predictions = inference.evaluate_dataset(
        model, ds, args.width, depth, rng, act_enabled=args.act,
        decoder=args.decoder, threads=_threads(args))
    if args.out:
        with open(args.out, "w") as f:
            for i, preds in enumerate(predictions):
                for j, p in enumerate(preds):
                    f.write(f"{i};{j};{' '.join(str(int(t)) for t in p)}\n")
    print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    return 0


def cmd_sweep(args) -> int:
    model, depth = _load_model(args)
    ds = load_dataset(args.data)
    depths = [int(d) for d in args.depths.split(",")] if args.depths else [depth]
    widths = [int(w) for w in args.widths.split(",")]
    rng = RngStream(args.seed, ("cli-sweep",))
    rows = inference.depth_width_sweep(model, ds, depths, widths, args.selector, rng,
                                       threads=_threads(args))
    inference.write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} sweep cells to {args.out}")
    return 0


def cmd_dump(args) -> int:
    model, depth = _load_model(args)
    ds = load_dataset(args.data)
    rng = RngStream(args.seed, ("cli-dump",))
    n_rows = inference.dump_trajectories(model, ds, args.width, depth, args.out, rng,
                                         act_enabled=args.act, threads=_threads(args))
    print(f"wrote {n_rows} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gram",
                                description="train and probe generative recursive reasoners")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a task dataset")
    g.add_argument("task", choices=["nqueens", "coloring", "sudoku", "sudoku-uncond"])
    g.add_argument("--n", type=int, default=6, help="board/graph size")
    g.add_argument("--remove", default="2,3", help="queen removal counts, comma-separated")
    g.add_argument("--count", type=int, default=200, help="instance/graph/board count")
    g.add_argument("--p", type=float, default=None, help="edge probability (coloring)")
    g.add_argument("--max-per-solution", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", default="", help="checkpoint to resume from")
    t.add_argument("--eval-metrics", action="store_true",
                   help="also compute sampling metrics at each eval point")
    t.add_argument("--threads", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    def common(sp, width_default=20):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--width", type=int, default=width_default)
        sp.add_argument("--depth", type=int, default=0, help="supervision steps (0: config)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")
        sp.add_argument("--act", action="store_true", help="enable learned halting")
        sp.add_argument("--decoder", choices=["argmax", "sampled"], default="argmax")
        sp.add_argument("--threads", type=int, default=0)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(e)
    e.add_argument("--out", default="")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="draw width-N predictions per input")
    common(s)
    s.add_argument("--out", default="")
    s.set_defaults(fn=cmd_sample)

    w = sub.add_parser("sweep", help="depth x width metric grid")
    common(w)
    w.add_argument("--depths", default="")
    w.add_argument("--widths", default="1,5,20")
    w.add_argument("--selector", choices=["vote", "lprm", "oracle"], default="vote")
    w.add_argument("--out", required=True)
    w.set_defaults(fn=cmd_sweep)

    d = sub.add_parser("dump", help="dump per-step latent trajectories to CSV")
    common(d, width_default=5)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except GramError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
