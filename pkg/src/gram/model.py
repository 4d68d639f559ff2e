"""The recursive reasoning network.

A latent state z = (h, l) of per-position vectors is evolved by repeated
transitions: K position-coupled refinements of the low-level component l
(with the input embedding injected every iteration), then one update of the
high-level component h. The high-level update is stochastic: a deterministic
proposal u is computed from (h, l), a residual perturbation eps is sampled
from a learned diagonal Gaussian conditioned on u (and, in posterior mode,
on the target), and h becomes u + eps. The decoder reads only h.

T transitions form one supervision step; the decoder is applied and a loss
attached after each step. With truncation on, gradients flow only through
the final transition of a step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from gram.errors import ConfigError, DataError
from gram.numerics import tensor as T
from gram.numerics.layers import (
    AttentionBlockParams,
    AttentionParams,
    SwigluBlockParams,
    SwigluParams,
    attention_block,
    rope_tables,
    swiglu_block,
    swiglu_mlp,
)
from gram.numerics.rng import RngStream
from gram.numerics.tensor import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0

GUIDANCE_KINDS = ("full", "none", "stochastic-only", "guide-only")
CORE_KINDS = ("attention", "swiglu")
MODES = ("prior", "posterior", "deterministic")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    seq_len: int = 36
    vocab_size: int = 3
    n_puzzle_tokens: int = 16
    k_low_steps: int = 2
    t_high_steps: int = 2
    n_sup: int = 8
    core_kind: str = "attention"
    n_heads: int = 4
    ffn_dim: int = 0  # 0 means "same as d_model"
    n_layers: int = 2
    guidance: str = "full"
    use_rope: bool = True

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", self.d_model)
        if self.k_low_steps < 1 or self.t_high_steps < 1 or self.n_sup < 1:
            raise ConfigError("k_low_steps, t_high_steps and n_sup must all be >= 1")
        if self.core_kind not in CORE_KINDS:
            raise ConfigError(f"unknown core_kind {self.core_kind!r}")
        if self.guidance not in GUIDANCE_KINDS:
            raise ConfigError(f"unknown guidance {self.guidance!r}")
        if self.core_kind == "attention" and self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2 or self.seq_len < 1 or self.n_puzzle_tokens < 1:
            raise ConfigError("vocab_size, seq_len and n_puzzle_tokens must be positive")

    @property
    def total_len(self) -> int:
        return self.seq_len + self.n_puzzle_tokens

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


@dataclass
class LatentState:
    h: Tensor
    l: Tensor

    def __post_init__(self):
        if self.h.shape != self.l.shape:
            raise ConfigError(f"latent components must share shape, got {self.h.shape} vs {self.l.shape}")

    def detach(self) -> "LatentState":
        return LatentState(self.h.detach(), self.l.detach())


@dataclass
class TransitionRecord:
    """Everything one transition produced that a loss might need."""
    mode: str
    u: Tensor
    eps: Tensor | None = None
    mu_q: Tensor | None = None
    logvar_q: Tensor | None = None
    mu_p: Tensor | None = None
    logvar_p: Tensor | None = None


def _normal(rng: RngStream, shape, std: float) -> np.ndarray:
    return (rng.normal(shape, dtype=np.float32) * np.float32(std)).astype(np.float32)


def _head_params(rng: RngStream, d_in: int, d_hidden: int, d_out: int, zero_out: bool):
    wd = np.zeros((d_hidden, d_out), np.float32) if zero_out else _normal(rng, (d_hidden, d_out), d_hidden ** -0.5)
    return {
        "norm": T.parameter(np.ones(d_in, np.float32)),
        "wg": T.parameter(_normal(rng, (d_in, d_hidden), d_in ** -0.5)),
        "wu": T.parameter(_normal(rng, (d_in, d_hidden), d_in ** -0.5)),
        "wd": T.parameter(wd),
    }


def init_params(config: ModelConfig, rng: RngStream) -> dict[str, Tensor]:
    """Build all learnable parameters. Guidance-head output weights start at
    zero so the untrained noise distribution is exactly standard normal and
    the initial prior/posterior divergence is zero."""
    d, f, v = config.d_model, config.ffn_dim, config.vocab_size
    params: dict[str, Tensor] = {}
    params["embed.token"] = T.parameter(_normal(rng, (v, d), d ** -0.5))
    params["embed.puzzle"] = T.parameter(_normal(rng, (config.n_puzzle_tokens, d), d ** -0.5))
    params["embed.empty"] = T.parameter(_normal(rng, (d,), d ** -0.5))

    for core in ("fL", "fH"):
        for i in range(config.n_layers):
            if config.core_kind == "attention":
                params[f"{core}.{i}.attn.norm"] = T.parameter(np.ones(d, np.float32))
                params[f"{core}.{i}.attn.wqkv"] = T.parameter(_normal(rng, (d, 3 * d), d ** -0.5))
                params[f"{core}.{i}.attn.wo"] = T.parameter(_normal(rng, (d, d), d ** -0.5))
                sub = ("mlp",)
            else:
                sub = ("m1", "m2")
            for name in sub:
                params[f"{core}.{i}.{name}.norm"] = T.parameter(np.ones(d, np.float32))
                params[f"{core}.{i}.{name}.wg"] = T.parameter(_normal(rng, (d, f), d ** -0.5))
                params[f"{core}.{i}.{name}.wu"] = T.parameter(_normal(rng, (d, f), d ** -0.5))
                params[f"{core}.{i}.{name}.wd"] = T.parameter(_normal(rng, (f, d), f ** -0.5))

    for head, d_in in (("prior.mu", d), ("prior.logvar", d), ("post.mu", 2 * d), ("post.logvar", 2 * d)):
        for k, t in _head_params(rng, d_in, f, d, zero_out=True).items():
            params[f"{head}.{k}"] = t

    params["dec.norm"] = T.parameter(np.ones(d, np.float32))
    params["dec.lm.w"] = T.parameter(_normal(rng, (d, v), d ** -0.5))
    params["dec.lm.b"] = T.parameter(np.zeros(v, np.float32))
    params["dec.halt.w"] = T.parameter(_normal(rng, (d, 2), d ** -0.5))
    params["dec.halt.b"] = T.parameter(np.zeros(2, np.float32))
    params["dec.value.w"] = T.parameter(_normal(rng, (d, 1), d ** -0.5))
    params["dec.value.b"] = T.parameter(np.zeros(1, np.float32))
    return params


def init_state(config: ModelConfig, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Initial latent (h0, l0), standard normal, sampled once and then frozen
    inside the checkpoint for the lifetime of the model."""
    shape = (config.total_len, config.d_model)
    return rng.normal(shape, dtype=np.float32), rng.normal(shape, dtype=np.float32)


def param_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


class GramModel:
    """Parameter container plus the forward operations of the network."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 z0: tuple[np.ndarray, np.ndarray]):
        self.config = config
        self.params = params
        self.z0 = z0
        self.dtype = params["embed.token"].data.dtype
        if config.core_kind == "attention" and config.use_rope:
            self._rope = rope_tables(config.total_len, config.d_model // config.n_heads,
                                     dtype=self.dtype)
        else:
            self._rope = (None, None)
        self._bundles = {core: self._build_core(core) for core in ("fL", "fH")}
        self._heads = {
            name: SwigluParams(params[f"{name}.wg"], params[f"{name}.wu"], params[f"{name}.wd"])
            for name in ("prior.mu", "prior.logvar", "post.mu", "post.logvar")
        }

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "GramModel":
        root = RngStream(seed)
        return cls(config, init_params(config, root.stream("params")),
                   init_state(config, root.stream("z0")))

    def _build_core(self, core: str):
        p, blocks = self.params, []

        def mlp_block(name: str) -> SwigluBlockParams:
            return SwigluBlockParams(
                p[f"{core}.{name}.norm"],
                SwigluParams(p[f"{core}.{name}.wg"], p[f"{core}.{name}.wu"],
                             p[f"{core}.{name}.wd"]))

        for i in range(self.config.n_layers):
            if self.config.core_kind == "attention":
                attn = AttentionParams(p[f"{core}.{i}.attn.norm"], p[f"{core}.{i}.attn.wqkv"],
                                       p[f"{core}.{i}.attn.wo"])
                blocks.append(("layer", AttentionBlockParams(attn, mlp_block(f"{i}.mlp"))))
            else:
                blocks.append(("mlp", mlp_block(f"{i}.m1")))
                blocks.append(("mlp", mlp_block(f"{i}.m2")))
        return blocks

    def _core(self, core: str, x: Tensor) -> Tensor:
        cos, sin = self._rope
        for kind, bp in self._bundles[core]:
            if kind == "layer":
                x = attention_block(x, bp, self.config.n_heads, cos, sin)
            else:
                x = swiglu_block(x, bp)
        return x

    # -- encoder -----------------------------------------------------------

    def encode(self, tokens: np.ndarray | None, batch_size: int | None = None) -> Tensor:
        """Token embeddings scaled by sqrt(D) with the learned puzzle tokens
        prepended. tokens=None selects the empty-conditioning embedding,
        broadcast over all content positions (unconditional mode)."""
        cfg = self.config
        if tokens is None:
            if batch_size is None:
                raise ConfigError("encode(None) needs an explicit batch_size")
            b = batch_size
            table = T.reshape(self.params["embed.empty"], (1, cfg.d_model))
            content = T.embedding(table, np.zeros((b, cfg.seq_len), dtype=np.int64))
        else:
            tokens = np.asarray(tokens)
            if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
                raise ConfigError(f"expected token shape [B, {cfg.seq_len}], got {tokens.shape}")
            if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
                raise DataError(f"token ids out of range [0, {cfg.vocab_size})")
            b = tokens.shape[0]
            content = T.embedding(self.params["embed.token"], tokens)
        puzzle_ids = np.broadcast_to(np.arange(cfg.n_puzzle_tokens), (b, cfg.n_puzzle_tokens))
        puzzle = T.embedding(self.params["embed.puzzle"], puzzle_ids)
        return T.scale(T.concat(puzzle, content, axis=1), cfg.d_model ** 0.5)

    def embed_targets(self, y: np.ndarray) -> Tensor:
        """Target embedding used to condition the posterior noise heads:
        token embeddings at content positions, zeros at puzzle positions."""
        cfg = self.config
        y = np.asarray(y)
        if y.min() < 0 or y.max() >= cfg.vocab_size:
            raise DataError(f"target ids out of range [0, {cfg.vocab_size})")
        content = T.scale(T.embedding(self.params["embed.token"], y), cfg.d_model ** 0.5)
        zeros = Tensor(np.zeros((y.shape[0], cfg.n_puzzle_tokens, cfg.d_model), self.dtype))
        return T.concat(zeros, content, axis=1)

    def initial_state(self, batch_size: int, override: tuple | None = None) -> LatentState:
        h0, l0 = override if override is not None else self.z0
        tile = lambda a: Tensor(np.broadcast_to(a.astype(self.dtype, copy=False),
                                                (batch_size,) + a.shape).copy())
        return LatentState(tile(h0), tile(l0))

    # -- recursive core ----------------------------------------------------

    def low_level_refine(self, h_prev: Tensor, l_prev: Tensor, e_x: Tensor) -> Tensor:
        """K deterministic refinements l <- f_L(l + h + e_x), with the
        high-level component held fixed and the input injected every time."""
        inject = T.add(h_prev, e_x)
        l = l_prev
        for _ in range(self.config.k_low_steps):
            l = self._core("fL", T.add(l, inject))
        return l

    def _guidance_head(self, name: str, x: Tensor) -> Tensor:
        normed = T.rms_norm(x, self.params[f"{name}.norm"])
        return swiglu_mlp(normed, self._heads[name])

    def _noise_params(self, which: str, u: Tensor, y_embed: Tensor | None):
        """(mu, logvar) for the selected head family, with ablation masks."""
        cfg = self.config
        if which == "prior":
            inp, prefix = u, "prior"
        else:
            if y_embed is None:
                raise ConfigError("posterior head requires a target embedding")
            inp, prefix = T.concat_last(u, y_embed), "post"
        if cfg.guidance == "stochastic-only":
            mu = Tensor(np.zeros(u.shape, u.data.dtype))
        else:
            mu = self._guidance_head(f"{prefix}.mu", inp)
        if cfg.guidance == "guide-only":
            logvar = Tensor(np.full(u.shape, LOGVAR_MIN, u.data.dtype))
        else:
            logvar = T.clamp(self._guidance_head(f"{prefix}.logvar", inp), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def high_level_update(self, h_prev: Tensor, l_t: Tensor, mode: str,
                          y_embed: Tensor | None = None,
                          rng: RngStream | None = None) -> tuple[Tensor, TransitionRecord]:
        """u = f_H(h, l); h' = u + eps with eps from the selected noise head.
        Deterministic mode (and the guidance-free ablation) set eps = 0."""
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        u = self._core("fH", T.add(h_prev, l_t))
        if mode == "deterministic" or self.config.guidance == "none":
            return u, TransitionRecord(mode=mode, u=u)
        if rng is None:
            raise ConfigError(f"{mode} mode draws noise and needs an rng stream")
        rec = TransitionRecord(mode=mode, u=u)
        if mode == "posterior":
            rec.mu_q, rec.logvar_q = self._noise_params("posterior", u, y_embed)
            rec.mu_p, rec.logvar_p = self._noise_params("prior", u, None)
            rec.eps = T.gaussian_reparam(rec.mu_q, rec.logvar_q, rng)
        else:
            rec.mu_p, rec.logvar_p = self._noise_params("prior", u, None)
            rec.eps = T.gaussian_reparam(rec.mu_p, rec.logvar_p, rng)
        return T.add(u, rec.eps), rec

    def latent_transition(self, z_prev: LatentState, e_x: Tensor, mode: str,
                          y_embed: Tensor | None = None,
                          rng: RngStream | None = None) -> tuple[LatentState, TransitionRecord]:
        l_t = self.low_level_refine(z_prev.h, z_prev.l, e_x)
        h_t, rec = self.high_level_update(z_prev.h, l_t, mode, y_embed, rng)
        return LatentState(h_t, l_t), rec

    def supervision_step(self, z_in: LatentState, e_x: Tensor, mode: str,
                         y_embed: Tensor | None = None, rng: RngStream | None = None,
                         truncate: bool = True) -> tuple[LatentState, list[TransitionRecord]]:
        """T transitions. With truncate, a stop-gradient marker sits after
        transition T-1, so the step loss reaches parameters only through the
        final transition; for T=1 truncation is a no-op."""
        t_steps = self.config.t_high_steps
        z, records = z_in, []
        for t in range(t_steps):
            final = t == t_steps - 1
            if truncate and not final:
                with T.no_grad():
                    z, rec = self.latent_transition(z, e_x, mode, y_embed, rng)
            else:
                if truncate and t_steps > 1 and final:
                    z = z.detach()
                z, rec = self.latent_transition(z, e_x, mode, y_embed, rng)
            records.append(rec)
        return z, records

    # -- decoder -----------------------------------------------------------

    def decode(self, z: LatentState) -> tuple[Tensor, Tensor, Tensor]:
        """(content logits [B,L,V], halt values [B,2], value [B,1]), all read
        from h. Halt/value heads see a detached input: their training losses
        must not reach the recursive core."""
        cfg = self.config
        hn = T.rms_norm(z.h, self.params["dec.norm"])
        content = T.slice_axis(hn, 1, cfg.n_puzzle_tokens, cfg.total_len)
        logits = T.linear(content, self.params["dec.lm.w"], self.params["dec.lm.b"])
        first = T.reshape(T.slice_axis(hn, 1, 0, 1), (hn.shape[0], cfg.d_model)).detach()
        q = T.linear(first, self.params["dec.halt.w"], self.params["dec.halt.b"])
        value = T.linear(first, self.params["dec.value.w"], self.params["dec.value.b"])
        return logits, q, value


def predict_tokens(logits: Tensor) -> np.ndarray:
    """Greedy per-position prediction."""
    return np.argmax(logits.data, axis=-1)


def sample_tokens(logits: Tensor, rng: RngStream) -> np.ndarray:
    """Per-position sampling from the output softmax (stochastic-decoder
    ablation)."""
    x = logits.data.astype(np.float64)
    x -= x.max(axis=-1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=-1, keepdims=True)
    cum = np.cumsum(p, axis=-1)
    draws = rng.uniform(x.shape[:-1])[..., None]
    return (cum < draws).sum(axis=-1)
