"""Supervised and unsupervised losses used to craft adversarial features.

* ``ctc_loss``: supervised CTC negative log-likelihood.
* ``ot_loss``: entropic optimal-transport distance between the clean and the
  perturbed per-frame predictions under a cosine ground cost.
* ``kl_loss``: KL divergence alternative to ``ot_loss``.
* ``mixed_loss``: ``ctc + beta * unsupervised``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .data import ctc_min_frames


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    reg: float = 0.05
    max_iters: int = 100
    tol: float = 1e-6
    # "unrolled": backpropagate through the Sinkhorn sweeps, so the gradient is
    # that of the returned transport cost. "envelope": hold the plan fixed and
    # differentiate the cost matrix only (cheaper, biased by the entropy term).
    grad: str = "unrolled"

    def __post_init__(self):
        if self.reg <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise LossError("sinkhorn needs reg > 0, max_iters >= 1 and tol > 0")
        if self.grad not in ("unrolled", "envelope"):
            raise LossError(f"unknown sinkhorn grad mode {self.grad!r}")


@dataclass
class TransportProblem:
    cost: torch.Tensor
    row_marginal: torch.Tensor
    col_marginal: torch.Tensor
    entropic_reg: float = 0.05
    max_iters: int = 100
    tol: float = 1e-6

    @classmethod
    def uniform(cls, cost, **kw) -> "TransportProblem":
        cost = torch.as_tensor(cost, dtype=torch.float64)
        ta, tb = cost.shape
        return cls(cost, torch.full((ta,), 1.0 / ta, dtype=cost.dtype),
                   torch.full((tb,), 1.0 / tb, dtype=cost.dtype), **kw)


@dataclass
class TransportPlan:
    plan: torch.Tensor
    objective: float
    iterations_used: int
    converged: bool
    history: list[float] = field(default_factory=list)
    dual_history: list[float] = field(default_factory=list)


@dataclass
class LossValue:
    value: torch.Tensor
    components: dict[str, torch.Tensor]
    beta: float


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def ctc_loss(log_probs, labels, label_lengths, out_lengths, blank=None,
             reduction="mean", ids=None):
    """CTC negative log-likelihood of ``labels`` under ``log_probs``.

    Args:
        log_probs: ``[batch, time, classes]`` per-frame log-probabilities.
        labels: ``[batch, max_label]`` padded label indices.
        label_lengths, out_lengths: valid label / frame counts per example.
        blank: blank class index, defaults to the last class.
        reduction: ``"mean"`` (batch mean of raw NLL) or ``"none"``.

    Raises:
        LossError: an example needs more frames than it has.
    """
    if blank is None:
        blank = log_probs.shape[-1] - 1
    for i in range(labels.shape[0]):
        lab = labels[i, : int(label_lengths[i])].tolist()
        if ctc_min_frames(lab) > int(out_lengths[i]):
            name = ids[i] if ids else f"#{i}"
            raise LossError(
                f"example {name}: label of length {len(lab)} cannot align to "
                f"{int(out_lengths[i])} output frames"
            )
    nll = F.ctc_loss(
        log_probs.transpose(0, 1), labels, out_lengths, label_lengths,
        blank=blank, reduction="none", zero_infinity=False,
    )
    if reduction == "none":
        return nll
    return nll.mean()


# ---------------------------------------------------------------------------
# Optimal transport
# ---------------------------------------------------------------------------

def cosine_cost(pred_clean, pred_adv):
    """Pairwise ``1 - cos`` between rows, ``[..., Ta, K] x [..., Tb, K] -> [..., Ta, Tb]``."""
    if pred_clean.shape[-1] != pred_adv.shape[-1]:
        raise LossError(
            f"class dimension mismatch: {pred_clean.shape[-1]} vs {pred_adv.shape[-1]}"
        )
    dot = pred_clean @ pred_adv.transpose(-1, -2)
    norms = pred_clean.norm(dim=-1)[..., :, None] * pred_adv.norm(dim=-1)[..., None, :]
    return (1.0 - dot / (norms + 1e-12)).clamp(0.0, 2.0)


def sinkhorn_log(cost, log_a, log_b, reg, max_iters, tol, track=False, differentiable=False):
    """Batched log-domain Sinkhorn.

    ``cost`` is ``[B, Ta, Tb]``; ``log_a``/``log_b`` hold log-marginals with
    ``-inf`` on padded entries. Returns ``(plan, iterations, converged, history)``
    where ``converged`` requires the row-marginal violation of every problem to
    fall below ``tol`` (column marginals are exact after each sweep). The
    returned plan is the last iterate rounded onto the marginals.

    With ``track`` the history holds, per sweep, the transport cost ``<P, C>``
    and the dual objective ``<f, a> + <g, b> - reg * sum(P)``. Each half-sweep
    maximizes the dual exactly over one potential, so the dual never
    decreases; the transport cost itself carries no such guarantee.
    Unless ``differentiable`` is set the cost is detached first.
    """
    if not differentiable:
        cost = cost.detach()
    f = torch.zeros_like(log_a)
    g = torch.where(torch.isfinite(log_b), torch.zeros_like(log_b), log_b)
    a = log_a.exp()
    history = []
    converged, it = False, 0
    for it in range(1, max_iters + 1):
        f = reg * log_a - reg * torch.logsumexp((g[:, None, :] - cost) / reg, dim=2)
        g = reg * log_b - reg * torch.logsumexp((f[:, :, None] - cost) / reg, dim=1)
        log_plan = (f[:, :, None] + g[:, None, :] - cost) / reg
        plan = log_plan.exp()
        if track:
            fa = torch.where(torch.isfinite(f), f * a, torch.zeros_like(f)).sum(1)
            gb = torch.where(torch.isfinite(g), g * log_b.exp(), torch.zeros_like(g)).sum(1)
            dual = fa + gb - reg * plan.sum(dim=(1, 2))
            history.append(((plan * cost).sum(dim=(1, 2)).tolist(), dual.tolist()))
        if (plan.detach().sum(dim=2) - a).abs().max() < tol:
            converged = True
            break
    return round_to_marginals(plan, a, log_b.exp()), it, converged, history


def _shrink(target, current):
    # min(1, target / current), with empty (padded) entries left alone
    safe = torch.where(current > 0, current, torch.ones_like(current))
    return torch.where(current > 0, (target / safe).clamp(max=1.0), torch.ones_like(current))


def round_to_marginals(plan, a, b):
    """Move an approximate plan onto the transport polytope of ``(a, b)``.

    Rows and then columns that carry too much mass are scaled down, and the
    missing mass is added back as a rank-one correction (Altschuler, Weed and
    Rigollet, 2017). The result meets both marginals exactly and differs from
    the input by at most twice the marginal violation in L1, so its transport
    cost is a true upper bound on the exact optimum.
    """
    plan = plan * _shrink(a, plan.sum(dim=2))[:, :, None]
    plan = plan * _shrink(b, plan.sum(dim=1))[:, None, :]
    err_a = a - plan.sum(dim=2)
    err_b = b - plan.sum(dim=1)
    scale = err_a.sum(dim=1).clamp(min=torch.finfo(plan.dtype).tiny)
    return plan + err_a[:, :, None] * err_b[:, None, :] / scale[:, None, None]


def sinkhorn_ot(problem: TransportProblem, track: bool = False) -> TransportPlan:
    """Entropic OT plan for a single problem; the objective omits the entropy term."""
    cost = torch.as_tensor(problem.cost)
    if not torch.isfinite(cost).all():
        raise LossError("cost matrix has non-finite entries")
    dtype = cost.dtype if cost.is_floating_point() else torch.float64
    cost = cost.to(dtype)
    log_a = torch.as_tensor(problem.row_marginal, dtype=dtype).log()
    log_b = torch.as_tensor(problem.col_marginal, dtype=dtype).log()
    plan, it, ok, hist = sinkhorn_log(
        cost[None], log_a[None], log_b[None], problem.entropic_reg,
        problem.max_iters, problem.tol, track=track,
    )
    plan = plan[0]
    return TransportPlan(plan, float((plan * cost).sum()), it, ok,
                         [h[0][0] for h in hist], [h[1][0] for h in hist])


def _log_uniform(lengths, size, dtype):
    t = torch.arange(size)
    valid = t[None, :] < lengths[:, None]
    return torch.where(valid, -torch.log(lengths.to(dtype))[:, None],
                       torch.tensor(float("-inf"), dtype=dtype))


def _as_batch(pred, lengths):
    if pred.dim() == 2:
        pred = pred[None]
    if lengths is None:
        lengths = torch.full((pred.shape[0],), pred.shape[1], dtype=torch.long)
    return pred, lengths


def ot_loss(pred_clean, pred_adv, lengths_clean=None, lengths_adv=None,
            config: SinkhornConfig = SinkhornConfig(), stats: dict | None = None):
    """Batch mean of per-utterance entropic OT cost between frame predictions.

    Predictions are per-frame log-probabilities ``[B, T, K]`` (or ``[T, K]``).
    Each utterance gets uniform marginals over its valid frames and a cosine
    cost between the frame probability vectors. ``config.grad`` picks between
    backpropagating through the Sinkhorn sweeps and holding the plan fixed.
    ``stats`` (optional dict) accumulates ``sinkhorn_calls`` and
    ``sinkhorn_unconverged`` counters.
    """
    pred_clean, lengths_clean = _as_batch(pred_clean, lengths_clean)
    pred_adv, lengths_adv = _as_batch(pred_adv, lengths_adv)
    cost = cosine_cost(pred_clean.exp(), pred_adv.exp())
    if not torch.isfinite(cost).all():
        raise LossError("cost matrix has non-finite entries")
    valid = (torch.arange(cost.shape[1])[None, :, None] < lengths_clean[:, None, None]) & \
            (torch.arange(cost.shape[2])[None, None, :] < lengths_adv[:, None, None])
    cost = cost * valid
    log_a = _log_uniform(lengths_clean, cost.shape[1], cost.dtype)
    log_b = _log_uniform(lengths_adv, cost.shape[2], cost.dtype)
    unrolled = config.grad == "unrolled"
    with torch.set_grad_enabled(unrolled and torch.is_grad_enabled()):
        plan, _, converged, _ = sinkhorn_log(cost, log_a, log_b, config.reg, config.max_iters,
                                             config.tol, differentiable=unrolled)
    if stats is not None:
        stats["sinkhorn_calls"] = stats.get("sinkhorn_calls", 0) + 1
        stats["sinkhorn_unconverged"] = stats.get("sinkhorn_unconverged", 0) + int(not converged)
    return (plan * cost).sum(dim=(1, 2)).mean()


def kl_loss(pred_clean, pred_adv, lengths=None):
    """Batch mean of the per-utterance frame-averaged ``KL(clean || adv)``."""
    if pred_clean.shape != pred_adv.shape:
        raise LossError(f"shape mismatch: {tuple(pred_clean.shape)} vs {tuple(pred_adv.shape)}")
    pred_clean, lengths = _as_batch(pred_clean, lengths)
    pred_adv, _ = _as_batch(pred_adv, lengths)
    log_p = F.log_softmax(pred_clean, dim=-1)
    log_q = F.log_softmax(pred_adv, dim=-1)
    per_frame = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    valid = torch.arange(per_frame.shape[1])[None, :] < lengths[:, None]
    per_utt = (per_frame * valid).sum(dim=1) / lengths.to(per_frame.dtype)
    return per_utt.mean()


def unsupervised_loss(kind, out_clean, out_adv, config=SinkhornConfig(), stats=None):
    if kind == "ot":
        return ot_loss(out_clean.log_probs, out_adv.log_probs, out_clean.out_lengths,
                       out_adv.out_lengths, config, stats)
    if kind == "kl":
        return kl_loss(out_clean.log_probs, out_adv.log_probs, out_adv.out_lengths)
    raise LossError(f"unknown unsupervised loss kind {kind!r}")


def mixed_loss(batch, out_adv, out_clean, beta=1.0, unsup_kind="ot",
               config: SinkhornConfig = SinkhornConfig(), stats=None) -> LossValue:
    """``ctc(adv) + beta * unsup(clean, adv)`` with its components."""
    if beta < 0:
        raise LossError("beta must be non-negative")
    ctc = ctc_loss(out_adv.log_probs, batch.label_indices, batch.label_lengths,
                   out_adv.out_lengths, ids=batch.ids)
    unsup = unsupervised_loss(unsup_kind, out_clean, out_adv, config, stats)
    return LossValue(ctc + beta * unsup, {"ctc": ctc, unsup_kind: unsup}, beta)

