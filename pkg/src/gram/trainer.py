"""Deep-supervision training loop, optimizer state, and checkpoints.

Each batch runs n_sup supervision steps; every step does its own backward
pass and optimizer update, and the terminal latent state (detached) seeds
the next step. Halting values regress on bootstrapped targets one step in
arrears (the bootstrap needs the next step's values); the value head
regresses on the final prediction accuracy once it is known, at the last
step. Both heads read detached inputs, so neither loss reaches the core.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from gram.errors import ConfigError, DataError, NumericError
from gram.model import GramModel, ModelConfig, predict_tokens
from gram.numerics import tensor as T
from gram.numerics.rng import RngStream
from gram.numerics.tensor import Tensor
from gram.objective import (
    LossBreakdown,
    StepLossInfo,
    full_trajectory_elbo,
    prediction_correct,
    surrogate_step_loss,
    token_accuracy,
)

CKPT_MAGIC = b"GRAMCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1.0
    grad_clip: float = 1.0
    batch_size: int = 64
    epochs: int = 10
    ema_decay: float = 0.999  # 0.9999 at full scale; too slow for short runs
    beta: float = 0.1
    kl_balance: float = 0.8
    seed: int = 0
    eval_every: int = 0  # batches between eval records; 0 disables
    eval_samples: int = 20
    act_halt_only: bool = False
    use_act_loss: bool = True
    use_lprm_loss: bool = True

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")
        for name in ("lr", "grad_clip", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0.0 <= self.kl_balance <= 1.0:
            raise ConfigError("kl_balance must be in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "TrainConfig":
        return cls(**json.loads(blob))


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adaptive update with decoupled weight decay. Decay applies only to
    matrices (embeddings and linear weights); gains and biases are exempt.
    Parameters whose gradient is None in a step are left untouched."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Ema:
    """Exponential moving average shadow of the parameters."""

    def __init__(self, params: dict[str, Tensor], decay: float):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict[str, Tensor]) -> None:
        d = np.float32(self.decay)
        one_minus = np.float32(1.0 - self.decay)
        for k, p in params.items():
            self.shadow[k] = d * self.shadow[k] + one_minus * p.data

    def as_params(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy()) for k, v in self.shadow.items()}


@dataclass
class TrainState:
    model: GramModel
    optimizer: AdamW
    ema: Ema
    config: TrainConfig
    step: int = 0  # optimizer updates applied

    @classmethod
    def create(cls, model_config: ModelConfig, train_config: TrainConfig) -> "TrainState":
        model = GramModel.create(model_config, train_config.seed)
        opt = AdamW(model.params, train_config.lr, train_config.weight_decay)
        return cls(model=model, optimizer=opt,
                   ema=Ema(model.params, train_config.ema_decay), config=train_config)

    def ema_model(self) -> GramModel:
        return GramModel(self.model.config, self.ema.as_params(), self.model.z0)


def _halt_values(model: GramModel, first: np.ndarray) -> Tensor:
    return T.linear(Tensor(first), model.params["dec.halt.w"], model.params["dec.halt.b"])


def _value_values(model: GramModel, first: np.ndarray) -> Tensor:
    return T.linear(Tensor(first), model.params["dec.value.w"], model.params["dec.value.b"])


def _decode_first(model: GramModel, z) -> np.ndarray:
    """Detached halting/value head input: normalized first position of h."""
    cfg = model.config
    with T.no_grad():
        hn = T.rms_norm(z.h, model.params["dec.norm"])
    return np.ascontiguousarray(hn.data[:, 0, :])


def _sq_err_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = T.sub(pred, Tensor(target.astype(pred.data.dtype)))
    return T.mean_all(T.mul(diff, diff))


def train_step(state: TrainState, batch_x: np.ndarray | None, batch_y: np.ndarray,
               rng: RngStream, ignore_index: int = 0) -> LossBreakdown:
    """One batch: n_sup supervision steps, each with its own backward pass,
    gradient clip, optimizer update, and EMA update."""
    model, cfg, tc = state.model, state.model.config, state.config
    batch_y = np.asarray(batch_y)
    b = batch_y.shape[0]
    z = model.initial_state(b)
    breakdown = LossBreakdown()
    firsts: list[np.ndarray] = []  # per-step detached head inputs
    corrects: list[np.ndarray] = []
    n_sup = cfg.n_sup

    for n in range(n_sup):
        e_x = model.encode(batch_x, batch_size=b)
        y_emb = model.embed_targets(batch_y)
        z_out, records = model.supervision_step(z, e_x, "posterior", y_emb, rng, truncate=True)
        logits, q, value = model.decode(z_out)
        loss, info = surrogate_step_loss(records, logits, batch_y, tc.beta, tc.kl_balance,
                                         ignore_index)

        preds = predict_tokens(logits)
        correct = np.array([prediction_correct(preds[i], batch_y[i], ignore_index)
                            for i in range(b)], dtype=np.float32)
        first = _decode_first(model, z_out)
        firsts.append(first)
        corrects.append(correct)

        act_terms = []
        if tc.use_act_loss:
            q_halt = T.reshape(T.slice_axis(q, 1, 0, 1), (b,))
            act_terms.append(_sq_err_mean(q_halt, correct))
            if not tc.act_halt_only:
                if n > 0:
                    # continue target for the previous step: best value now
                    prev_q = _halt_values(model, firsts[n - 1])
                    cont_target = q.data.max(axis=1)
                    prev_cont = T.reshape(T.slice_axis(prev_q, 1, 1, 2), (b,))
                    act_terms.append(_sq_err_mean(prev_cont, cont_target))
                if n == n_sup - 1:
                    # no next step: continue target equals the halt target
                    q_cont = T.reshape(T.slice_axis(q, 1, 1, 2), (b,))
                    act_terms.append(_sq_err_mean(q_cont, correct))
        act_val = 0.0
        for term in act_terms:
            loss = T.add(loss, term)
            act_val += float(term.data)
        info.act_loss = act_val

        if tc.use_lprm_loss and n == n_sup - 1:
            r = np.array([token_accuracy(preds[i], batch_y[i], ignore_index)
                          for i in range(b)], dtype=np.float32)
            lprm_val = 0.0
            for fprev in firsts:
                v_n = T.reshape(_value_values(model, fprev), (b,))
                term = _sq_err_mean(v_n, r)
                loss = T.add(loss, term)
                lprm_val += float(term.data)
            info.lprm_loss = lprm_val

        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at supervision step {n + 1}: {info}")

        state.optimizer.zero_grad()
        T.backward(loss)
        clip_global_norm(model.params, tc.grad_clip)
        state.optimizer.step()
        state.ema.update(model.params)
        state.step += 1

        breakdown.per_step.append(info)
        breakdown.nll += info.nll / n_sup
        breakdown.kl_raw += info.kl_raw / n_sup
        breakdown.kl_balanced += info.kl_balanced / n_sup
        breakdown.act_loss += info.act_loss / n_sup
        breakdown.lprm_loss += info.lprm_loss / n_sup

        z = z_out.detach()

    breakdown.total = (breakdown.nll + tc.beta * breakdown.kl_balanced
                       + breakdown.act_loss + breakdown.lprm_loss)
    return breakdown


def iterate_batches(n: int, batch_size: int, rng: RngStream):
    """Deterministic shuffled batch index lists covering all n examples."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epochs(state: TrainState, batch_x_all: np.ndarray | None, batch_y_all: np.ndarray,
                 rng: RngStream, epochs: int, on_batch=None) -> list[LossBreakdown]:
    """Convenience loop over shuffled batches. on_batch(epoch, i, breakdown)
    is called after every batch."""
    n = batch_y_all.shape[0]
    history = []
    for epoch in range(epochs):
        erng = rng.stream("epoch", epoch)
        for i, idx in enumerate(iterate_batches(n, state.config.batch_size, erng.stream("order"))):
            bx = None if batch_x_all is None else batch_x_all[idx]
            bd = train_step(state, bx, batch_y_all[idx], erng.stream("batch", i))
            history.append(bd)
            if on_batch is not None:
                on_batch(epoch, i, bd)
    return history


def elbo_probe(model: GramModel, x: np.ndarray | None, y: np.ndarray,
               n_sup: int, seed: int = 7):
    """Full-bound evaluation on a fixed validation batch with frozen noise,
    so successive probes are comparable point-for-point."""
    return full_trajectory_elbo(model, x, y, n_sup, RngStream(seed, ("elbo_probe",)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def config_fingerprint(model_config: ModelConfig) -> str:
    return hashlib.sha256(model_config.to_json().encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    opt_step: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    z0: tuple[np.ndarray, np.ndarray] | None = None
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)

    def model(self, use_ema: bool = False) -> GramModel:
        src = self.ema if use_ema else self.params
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in src.items()}
        return GramModel(self.model_config, params, self.z0)


def save_checkpoint(path, state: TrainState) -> None:
    names = sorted(state.model.params)
    manifest = []
    blobs = []

    def put(kind: str, name: str, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append([kind, name, list(arr.shape)])
        blobs.append(arr.tobytes())

    for k in names:
        put("param", k, state.model.params[k].data)
    put("z0", "h0", state.model.z0[0])
    put("z0", "l0", state.model.z0[1])
    for k in names:
        put("ema", k, state.ema.shadow[k])
    for k in names:
        put("opt_m", k, state.optimizer.m[k])
    for k in names:
        put("opt_v", k, state.optimizer.v[k])

    header = {
        "model_config": json.loads(state.model.config.to_json()),
        "train_config": json.loads(state.config.to_json()),
        "fingerprint": config_fingerprint(state.model.config),
        "step": state.step,
        "opt_step": state.optimizer.step_count,
        "manifest": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        model_config = ModelConfig(**header["model_config"])
        if header["fingerprint"] != config_fingerprint(model_config):
            raise DataError(f"{path}: fingerprint does not match stored config")
        if expected_config is not None and config_fingerprint(expected_config) != header["fingerprint"]:
            raise ConfigError(f"{path}: checkpoint config fingerprint mismatch")
        ckpt = Checkpoint(model_config=model_config,
                          train_config=TrainConfig(**header["train_config"]),
                          step=header["step"], opt_step=header["opt_step"])
        z0 = {}
        for kind, name, shape in header["manifest"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            if len(raw) != 4 * n:
                raise DataError(f"{path}: truncated tensor data for {kind}:{name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            if kind == "param":
                ckpt.params[name] = arr
            elif kind == "z0":
                z0[name] = arr
            elif kind == "ema":
                ckpt.ema[name] = arr
            elif kind == "opt_m":
                ckpt.opt_m[name] = arr
            elif kind == "opt_v":
                ckpt.opt_v[name] = arr
            else:
                raise DataError(f"{path}: unknown manifest kind {kind}")
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after manifest data")
    ckpt.z0 = (z0["h0"], z0["l0"])
    return ckpt


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
    model = GramModel(ckpt.model_config, params, ckpt.z0)
    tc = ckpt.train_config
    opt = AdamW(model.params, tc.lr, tc.weight_decay)
    opt.step_count = ckpt.opt_step
    opt.m = {k: v.copy() for k, v in ckpt.opt_m.items()}
    opt.v = {k: v.copy() for k, v in ckpt.opt_v.items()}
    ema = Ema(model.params, tc.ema_decay)
    ema.shadow = {k: v.copy() for k, v in ckpt.ema.items()}
    return TrainState(model=model, optimizer=opt, ema=ema, config=tc, step=ckpt.step)
