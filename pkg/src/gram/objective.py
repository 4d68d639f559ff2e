"""Training objectives.

The per-step loss is a truncated surrogate for the trajectory-level bound:
reconstruction NLL at the step's terminal state plus the noise-space KL of
the step's final transition only. The full bound (terminal NLL plus KL at
every transition) is evaluated gradient-free for monitoring; the difference
between the two is exactly the sum of the KL terms the surrogate omits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gram.errors import ConfigError, DataError
from gram.model import GramModel, TransitionRecord, predict_tokens
from gram.numerics import tensor as T
from gram.numerics.rng import RngStream
from gram.numerics.tensor import Tensor


def kl_diag_gaussian(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over all
    axes (dimensions and positions)."""
    dlv = T.sub(logvar_q, logvar_p)
    diff = T.sub(mu_q, mu_p)
    t1 = T.exp(dlv)
    t2 = T.mul(T.mul(diff, diff), T.exp(T.neg(logvar_p)))
    density = T.add(T.sub(T.add(t1, t2), dlv), Tensor(np.asarray(-1.0, mu_q.data.dtype)))
    return T.scale(T.sum_all(density), 0.5)


def kl_balanced(mu_q: Tensor, logvar_q: Tensor, mu_p: Tensor, logvar_p: Tensor,
                alpha: float = 0.8) -> Tensor:
    """Value identical (bitwise) to kl_diag_gaussian; gradient split
    alpha : (1 - alpha) between the prior side (posterior frozen) and the
    posterior side (prior frozen)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"kl balance alpha must be in [0, 1], got {alpha}")
    raw = kl_diag_gaussian(mu_q, logvar_q, mu_p, logvar_p)
    to_prior = kl_diag_gaussian(mu_q.detach(), logvar_q.detach(), mu_p, logvar_p)
    to_post = kl_diag_gaussian(mu_q, logvar_q, mu_p.detach(), logvar_p.detach())
    blend = T.add(T.scale(to_prior, alpha), T.scale(to_post, 1.0 - alpha))
    return T.graft(raw, blend)


@dataclass
class StepLossInfo:
    nll: float
    kl_raw: float
    kl_balanced: float
    beta: float
    act_loss: float = 0.0
    lprm_loss: float = 0.0

    @property
    def total(self) -> float:
        return self.nll + self.beta * self.kl_balanced + self.act_loss + self.lprm_loss


@dataclass
class LossBreakdown:
    nll: float = 0.0
    kl_raw: float = 0.0
    kl_balanced: float = 0.0
    act_loss: float = 0.0
    lprm_loss: float = 0.0
    total: float = 0.0
    per_step: list = field(default_factory=list)


def _kl_norm(rec: TransitionRecord) -> int:
    """Positions across which the KL sum is averaged (batch x sequence)."""
    return int(np.prod(rec.mu_q.shape[:-1]))


def surrogate_step_loss(records: list[TransitionRecord], logits: Tensor, targets: np.ndarray,
                        beta: float, alpha: float = 0.8,
                        ignore_index: int = 0) -> tuple[Tensor, StepLossInfo]:
    """Reconstruction NLL plus beta times the balanced KL of the step's
    final transition. Records must come from a posterior-mode step."""
    final = records[-1]
    if final.mode == "prior":
        raise ConfigError("training loss needs posterior-mode records, got prior")
    nll = T.softmax_cross_entropy(logits, targets, ignore_index)
    if final.mu_q is None:
        info = StepLossInfo(nll=float(nll.data), kl_raw=0.0, kl_balanced=0.0, beta=beta)
        return nll, info
    norm = _kl_norm(final)
    raw = kl_diag_gaussian(final.mu_q, final.logvar_q, final.mu_p, final.logvar_p)
    balanced = kl_balanced(final.mu_q, final.logvar_q, final.mu_p, final.logvar_p, alpha)
    loss = T.add(nll, T.scale(balanced, beta / norm))
    info = StepLossInfo(nll=float(nll.data),
                        kl_raw=float(raw.data) / norm,
                        kl_balanced=float(balanced.data) / norm,
                        beta=beta)
    return loss, info


# ---------------------------------------------------------------------------
# Halting (adaptive computation) loss
# ---------------------------------------------------------------------------

def act_targets(q_table: np.ndarray, correct: np.ndarray) -> np.ndarray:
    """Regression targets for the two halting values.

    halt target at step n is 1 if the step-n prediction was correct;
    continue target at step n is max of the step-(n+1) values, bootstrapped
    without gradient; at the last step it equals the halt target."""
    q_table = np.asarray(q_table, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    n = q_table.shape[0]
    if q_table.shape != (n, 2) or correct.shape != (n,):
        raise ConfigError(f"expected q_table [N,2] and correct [N], got {q_table.shape}, {correct.shape}")
    targets = np.empty((n, 2), dtype=np.float64)
    targets[:, 0] = correct
    targets[n - 1, 1] = correct[n - 1]
    for i in range(n - 2, -1, -1):
        targets[i, 1] = max(q_table[i + 1, 0], q_table[i + 1, 1])
    return targets


def prediction_correct(prediction: np.ndarray, target: np.ndarray, ignore_index: int = 0) -> bool:
    """Exact match over all supervised (non-ignored) positions."""
    target = np.asarray(target)
    mask = target != ignore_index
    return bool(np.all(prediction[mask] == target[mask]))


def act_loss(q_values: np.ndarray, predictions: list[np.ndarray], y: np.ndarray,
             ignore_index: int = 0, halt_only: bool = False) -> float:
    """Squared-error halting loss against bootstrapped targets for one
    trajectory's per-step values."""
    q_values = np.asarray(q_values, dtype=np.float64)
    correct = np.array([prediction_correct(p, y, ignore_index) for p in predictions], dtype=np.float64)
    targets = act_targets(q_values, correct)
    sq = (q_values - targets) ** 2
    if halt_only:
        return float(sq[:, 0].sum())
    return float(sq.sum())


def token_accuracy(prediction: np.ndarray, target: np.ndarray, ignore_index: int = 0) -> float:
    target = np.asarray(target)
    mask = target != ignore_index
    if not mask.any():
        return 0.0
    return float((prediction[mask] == target[mask]).mean())


def lprm_loss(values: np.ndarray, r: float) -> float:
    """Sum of squared errors of per-step value predictions against the final
    prediction accuracy r in [0, 1]."""
    if not 0.0 <= r <= 1.0:
        raise DataError(f"reward target must be in [0, 1], got {r}")
    values = np.asarray(values, dtype=np.float64)
    return float(((values - r) ** 2).sum())


# ---------------------------------------------------------------------------
# Full trajectory bound (evaluation only)
# ---------------------------------------------------------------------------

@dataclass
class ElboReport:
    neg_elbo_full: float
    surrogate_avg: float
    surrogate_terminal_proxy: float
    gap: float
    terminal_nll: float
    kl_per_transition: list[float]
    nll_per_step: list[float]
    t_high: int


def full_trajectory_elbo(model: GramModel, x: np.ndarray | None, y: np.ndarray,
                         n_sup: int, rng: RngStream, ignore_index: int = 0) -> ElboReport:
    """One gradient-free posterior rollout of n_sup * T transitions.

    neg_elbo_full = terminal NLL + sum of every transition's KL;
    surrogate_terminal_proxy keeps only each step's final-transition KL, so
    gap (the omitted non-final KLs) satisfies full = proxy + gap on the same
    noise draws. surrogate_avg is the per-step surrogate averaged over steps.
    """
    y = np.asarray(y)
    b = y.shape[0]
    t_high = model.config.t_high_steps
    kls: list[float] = []
    nll_steps: list[float] = []
    with T.no_grad():
        e_x = model.encode(x, batch_size=b)
        y_emb = model.embed_targets(y)
        z = model.initial_state(b)
        for _ in range(n_sup):
            z, records = model.supervision_step(z, e_x, "posterior", y_emb, rng, truncate=False)
            for rec in records:
                if rec.mu_q is None:
                    kls.append(0.0)
                else:
                    kls.append(float(kl_diag_gaussian(rec.mu_q, rec.logvar_q,
                                                      rec.mu_p, rec.logvar_p).data) / _kl_norm(rec))
            logits, _, _ = model.decode(z)
            nll_steps.append(float(T.softmax_cross_entropy(logits, y, ignore_index).data))
    terminal_nll = nll_steps[-1]
    finals = kls[t_high - 1::t_high]
    non_finals = [k for i, k in enumerate(kls) if (i + 1) % t_high != 0]
    full = terminal_nll + sum(kls)
    proxy = terminal_nll + sum(finals)
    gap = sum(non_finals)
    surrogate_avg = float(np.mean([nll_steps[i] + finals[i] for i in range(n_sup)]))
    return ElboReport(neg_elbo_full=full, surrogate_avg=surrogate_avg,
                      surrogate_terminal_proxy=proxy, gap=gap, terminal_nll=terminal_nll,
                      kl_per_transition=kls, nll_per_step=nll_steps, t_high=t_high)
