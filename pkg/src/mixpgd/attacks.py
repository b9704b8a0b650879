"""L-infinity attacks on the model-input feature tensor.

Every generator returns a :class:`Perturbation` whose ``delta`` lies in the
``epsilon`` box and is zero on padded frames. Attacks switch the model to eval
mode for their gradient queries, restore the previous mode afterwards and
never touch parameters.
"""
from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import torch

from .losses import SinkhornConfig, ctc_loss, mixed_loss, unsupervised_loss

FAMILIES = ("fgsm", "mifgsm", "pgd", "feature_scattering", "mixpgd")
# std of the Gaussian start used by mixPGD (x' = x + 1e-4 * N(0, I))
GAUSSIAN_INIT_STD = 1e-4


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    family: str = "pgd"
    epsilon: float = 4e-5
    step_size: float | None = None   # None -> epsilon / 4 (epsilon for fgsm)
    n_steps: int = 20
    beta: float = 1.0
    unsup_kind: str = "ot"
    momentum_decay: float = 1.0
    random_init: bool = True
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise AttackError("epsilon must be non-negative")
        if self.family == "fgsm" and self.n_steps != 1:
            object.__setattr__(self, "n_steps", 1)
        if self.n_steps < 0:
            raise AttackError("n_steps must be non-negative")
        if self.step_size is None:
            default = self.epsilon if self.family == "fgsm" else self.epsilon / 4
            object.__setattr__(self, "step_size", default)
        if self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0):
            raise AttackError("step_size must be positive")
        if self.family != "fgsm" and self.step_size > self.epsilon:
            raise AttackError(
                f"step_size {self.step_size} exceeds epsilon {self.epsilon}; every step would saturate"
            )
        if self.unsup_kind not in ("ot", "kl"):
            raise AttackError(f"unknown unsup_kind {self.unsup_kind!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        short = {"fgsm": "FGSM", "mifgsm": "MIFGSM", "pgd": "PGD",
                 "feature_scattering": "FS", "mixpgd": "MIXPGD"}[self.family]
        return short if self.family in ("fgsm", "mifgsm") else f"{short}{self.n_steps}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("name")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class Perturbation:
    delta: torch.Tensor
    epsilon_used: float
    grad_queries: int = 0
    stats: dict = field(default_factory=dict)

    def check(self, feature_lengths: torch.Tensor) -> None:
        """Assert the budget and padding invariants."""
        if self.delta.abs().max() > self.epsilon_used + 1e-9:
            raise AttackError("perturbation exceeds its budget")
        t = torch.arange(self.delta.shape[-1])
        pad = t[None, :] >= feature_lengths[:, None]
        if (self.delta * pad[:, None, :]).abs().max() > 0:
            raise AttackError("perturbation is non-zero on padding")


@contextmanager
def eval_mode(model):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def _padding_mask(batch):
    return batch.time_mask()[:, None, :].to(batch.features.dtype)


def _generator(cfg, generator):
    if generator is not None:
        return generator
    return torch.Generator().manual_seed(int(cfg.seed))


def initial_delta(batch, cfg: AttackConfig, kind: str, generator=None) -> torch.Tensor:
    """Starting perturbation: ``"zero"``, ``"uniform"`` in the box or ``"gaussian"``."""
    x = batch.features
    mask = _padding_mask(batch)
    if kind == "zero" or cfg.epsilon == 0 and kind == "uniform":
        return torch.zeros_like(x)
    gen = _generator(cfg, generator)
    if kind == "uniform":
        noise = torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2 - 1
        return noise * cfg.epsilon * mask
    if kind == "gaussian":
        return GAUSSIAN_INIT_STD * torch.randn(x.shape, generator=gen, dtype=x.dtype) * mask
    raise AttackError(f"unknown init {kind!r}")


def sign_ascent(model, batch, loss_fn, delta, cfg: AttackConfig, momentum_decay=None,
                stats=None) -> Perturbation:
    """Run ``cfg.n_steps`` projected sign-gradient ascent steps from ``delta``.

    ``loss_fn`` maps a model output to a scalar. With ``momentum_decay`` the
    step follows the sign of an accumulated, per-example L1-normalized
    gradient (momentum iterative FGSM).
    """
    x0 = batch.features.detach()
    mask = _padding_mask(batch)
    eps, step = cfg.epsilon, cfg.step_size
    momentum = torch.zeros_like(x0) if momentum_decay is not None else None
    queries = 0
    with eval_mode(model):
        for _ in range(cfg.n_steps):
            x = (x0 + delta).requires_grad_(True)
            loss = loss_fn(model(x, batch.feature_lengths))
            (grad,) = torch.autograd.grad(loss, x)
            queries += 1
            if momentum is not None:
                l1 = grad.abs().sum(dim=(1, 2), keepdim=True)
                momentum = momentum_decay * momentum + grad / (l1 + 1e-12)
                grad = momentum
            delta = (delta.detach() + step * grad.sign()).clamp(-eps, eps) * mask
    delta = delta.detach().clamp(-eps, eps) * mask
    return Perturbation(delta, eps, queries, dict(stats or {}))


def _ctc_objective(batch):
    def loss_fn(out):
        return ctc_loss(out.log_probs, batch.label_indices, batch.label_lengths,
                        out.out_lengths, ids=batch.ids)
    return loss_fn


def _clean_output(model, batch):
    with torch.no_grad(), eval_mode(model):
        return model(batch.features, batch.feature_lengths)


def fgsm(model, batch, cfg: AttackConfig, generator=None) -> Perturbation:
    """Single step ``epsilon * sign(grad CTC)`` from the clean input."""
    delta = initial_delta(batch, cfg, "zero")
    one_step = AttackConfig("fgsm", cfg.epsilon, cfg.epsilon, 1, seed=cfg.seed)
    return sign_ascent(model, batch, _ctc_objective(batch), delta, one_step)


def mifgsm(model, batch, cfg: AttackConfig, generator=None) -> Perturbation:
    delta = initial_delta(batch, cfg, "zero")
    return sign_ascent(model, batch, _ctc_objective(batch), delta, cfg,
                       momentum_decay=cfg.momentum_decay)


def pgd(model, batch, cfg: AttackConfig, generator=None, init=None) -> Perturbation:
    """PGD-k on the CTC loss.

    ``init`` overrides the start (``"zero"``, ``"uniform"``, ``"gaussian"``);
    by default it is uniform in the box when ``cfg.random_init`` is set.
    """
    init = init or ("uniform" if cfg.random_init else "zero")
    delta = initial_delta(batch, cfg, init, generator)
    return sign_ascent(model, batch, _ctc_objective(batch), delta, cfg)


def feature_scattering(model, batch, cfg: AttackConfig, generator=None,
                       sinkhorn: SinkhornConfig = SinkhornConfig()) -> Perturbation:
    """Label-free ascent on the OT (or KL) distance to the clean predictions."""
    out_clean = _clean_output(model, batch)
    stats: dict = {}

    def loss_fn(out):
        return unsupervised_loss(cfg.unsup_kind, out_clean, out, sinkhorn, stats)

    delta = initial_delta(batch, cfg, "uniform" if cfg.random_init else "zero", generator)
    result = sign_ascent(model, batch, loss_fn, delta, cfg)
    result.stats = stats
    return result


def mixpgd(model, batch, cfg: AttackConfig, generator=None,
           sinkhorn: SinkhornConfig = SinkhornConfig()) -> Perturbation:
    """Hybrid PGD on ``CTC(adv) + beta * unsup(clean, adv)``.

    Starts from ``x + 1e-4 * N(0, I)``; the clean predictions are computed once
    from the unperturbed input and held fixed.
    """
    out_clean = _clean_output(model, batch)
    stats: dict = {}

    def loss_fn(out):
        return mixed_loss(batch, out, out_clean, cfg.beta, cfg.unsup_kind, sinkhorn, stats).value

    delta = initial_delta(batch, cfg, "gaussian", generator)
    result = sign_ascent(model, batch, loss_fn, delta, cfg)
    result.stats = stats
    return result


_DISPATCH = {
    "fgsm": fgsm,
    "mifgsm": mifgsm,
    "pgd": pgd,
    "feature_scattering": feature_scattering,
    "mixpgd": mixpgd,
}


def run_attack(model, batch, cfg: AttackConfig, generator=None,
               sinkhorn: SinkhornConfig = SinkhornConfig()) -> Perturbation:
    fn = _DISPATCH[cfg.family]
    if cfg.family in ("feature_scattering", "mixpgd"):
        return fn(model, batch, cfg, generator, sinkhorn=sinkhorn)
    return fn(model, batch, cfg, generator)
