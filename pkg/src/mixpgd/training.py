"""Standard and adversarial training loops.

Each batch: craft a perturbation with the regime's generator (model frozen,
eval mode), then take one AdamW step on the CTC loss of the perturbed batch.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .attacks import AttackConfig, Perturbation, run_attack
from .data import Alphabet, AudioExample, featurize_corpus, iter_batches
from .losses import SinkhornConfig, ctc_loss
from .model import Checkpoint, ModelConfig, SpeechRecognizer, greedy_decode, parameter_hash, save_checkpoint

logger = logging.getLogger(__name__)

REGIMES = ("standard", "fgsm_adv", "pgd_adv", "feature_scattering", "mixpgd")


class TrainingDiverged(RuntimeError):
    def __init__(self, batch_id, epoch, step, checkpoint_path=None):
        self.batch_id, self.epoch, self.step = batch_id, epoch, step
        self.checkpoint_path = checkpoint_path
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step} (batch {batch_id}); "
            f"last checkpoint: {checkpoint_path}"
        )


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "mixpgd"
    epochs: int = 25                 # outer iterations T_o
    inner_iters: int = 4             # T_i
    epsilon: float = 4e-5
    eta1: float | None = None        # attack step; None -> epsilon / 4
    eta2: float = 5e-4               # peak learning rate
    batch_size: int = 10
    beta: float = 1.0
    unsup_kind: str = "ot"
    seed: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    mix_clean: bool = False
    random_init: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.epochs < 1 or self.inner_iters < 1 or self.batch_size < 1:
            raise ValueError("epochs, inner_iters and batch_size must be >= 1")
        if self.eta2 <= 0:
            raise ValueError("eta2 must be positive")
        if self.eta1 is None:
            object.__setattr__(self, "eta1", self.epsilon / 4)

    def attack_config(self) -> AttackConfig | None:
        """Generator used for the inner maximization of this regime."""
        common = dict(epsilon=self.epsilon, seed=self.seed)
        if self.regime == "standard":
            return None
        if self.regime == "fgsm_adv":
            return AttackConfig("fgsm", n_steps=1, **common)
        family = {"pgd_adv": "pgd", "feature_scattering": "feature_scattering",
                  "mixpgd": "mixpgd"}[self.regime]
        return AttackConfig(family, step_size=self.eta1, n_steps=self.inner_iters,
                            beta=self.beta, unsup_kind=self.unsup_kind,
                            random_init=self.random_init, **common)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    @property
    def lr_trace(self):
        return [r["lr"] for r in self.records]


def one_cycle_lr(step, total_steps, peak, pct_start=0.3, div_factor=25.0,
                 final_div_factor=1e4):
    """Cosine one-cycle schedule; ``step`` counts from 0 and hits ``peak`` exactly."""
    initial = peak / div_factor
    final = initial / final_div_factor
    top = max(0, round(pct_start * (total_steps - 1)))
    if step <= top:
        if top == 0:
            return peak
        return peak + (initial - peak) * (1 + math.cos(math.pi * step / top)) / 2
    span = max(1, total_steps - 1 - top)
    return final + (peak - final) * (1 + math.cos(math.pi * (step - top) / span)) / 2


def inner_maximization(model, batch, cfg: TrainConfig, generator=None,
                       sinkhorn: SinkhornConfig = SinkhornConfig()) -> Perturbation:
    attack = cfg.attack_config()
    if attack is None:
        return Perturbation(torch.zeros_like(batch.features), 0.0, 0)
    return run_attack(model, batch, attack, generator=generator, sinkhorn=sinkhorn)


def _batch_ctc(model, batch):
    out = model(batch.features, batch.feature_lengths)
    return ctc_loss(out.log_probs, batch.label_indices, batch.label_lengths,
                    out.out_lengths, ids=batch.ids)


def clean_wer(model, examples, alphabet, batch_size=10) -> float:
    from .evaluation import error_rates

    hyps, refs = [], []
    model.eval()
    with torch.no_grad():
        for batch in iter_batches(examples, batch_size, alphabet):
            hyps += greedy_decode(model(batch.features, batch.feature_lengths), alphabet)
            refs += batch.transcripts
    return error_rates(refs, hyps).wer


def train(cfg: TrainConfig, examples: Sequence[AudioExample], model_config: ModelConfig,
          alphabet: Alphabet | None = None, dev_examples=None, out_dir=None,
          sinkhorn: SinkhornConfig = SinkhornConfig(), meta: dict | None = None,
          check_purity: bool = False):
    """Train a recognizer under ``cfg.regime``.

    Args:
        examples: training corpus; features are computed if missing.
        dev_examples: optional corpus scored (clean WER) after every epoch to
            pick the ``best`` checkpoint.
        out_dir: where per-epoch, ``best`` and ``last`` checkpoints and
            ``train_log.jsonl`` go; nothing is written when ``None``.
        check_purity: hash parameters around every inner maximization and
            fail if they changed.

    Returns:
        ``(checkpoint, log)`` for the final parameters.
    """
    if not examples:
        raise ValueError("training corpus is empty")
    alphabet = alphabet or Alphabet()
    model_config.check_alphabet(alphabet)
    examples = featurize_corpus(examples)
    dev_examples = featurize_corpus(dev_examples) if dev_examples else None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    meta.update(train_config=asdict(cfg), code_version=__version__)

    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    log = TrainLog()
    best_wer, last_path = math.inf, None

    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = SpeechRecognizer(model_config)
        shuffle_gen = torch.Generator().manual_seed(cfg.seed + 1)
        attack_gen = torch.Generator().manual_seed(cfg.seed + 2)
        opt = torch.optim.AdamW(model.parameters(), lr=cfg.eta2 / cfg.div_factor,
                                weight_decay=cfg.weight_decay)

        def snapshot(epoch):
            return Checkpoint.from_model(
                model, alphabet, regime=cfg.regime, epoch=epoch,
                meta=dict(meta, parameter_hash=parameter_hash(model)),
                optimizer_state=opt.state_dict(), rng_state=torch.get_rng_state(),
            )

        global_step = 0
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(examples), generator=shuffle_gen).tolist()
            for step, batch in enumerate(iter_batches(examples, cfg.batch_size, alphabet, order)):
                t0 = time.perf_counter()
                lr = one_cycle_lr(global_step, total_steps, cfg.eta2, cfg.pct_start,
                                  cfg.div_factor, cfg.final_div_factor)
                for group in opt.param_groups:
                    group["lr"] = lr
                before = parameter_hash(model) if check_purity else None
                pert = inner_maximization(model, batch, cfg, attack_gen, sinkhorn)
                if check_purity and parameter_hash(model) != before:
                    raise RuntimeError("inner maximization modified model parameters")

                model.train()
                adv_batch = batch.with_features(batch.features + pert.delta)
                loss = _batch_ctc(model, adv_batch)
                if cfg.mix_clean and cfg.regime != "standard":
                    loss = loss + _batch_ctc(model, batch)
                if not torch.isfinite(loss):
                    if out_dir is not None:
                        last_path = out_dir / "last.ckpt"
                        save_checkpoint(snapshot(epoch), last_path)
                    raise TrainingDiverged(",".join(batch.ids), epoch, step, last_path)
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()

                if cfg.regime == "standard":
                    clean = float(loss.detach())
                else:
                    with torch.no_grad():
                        model.eval()
                        clean = float(_batch_ctc(model, batch))
                log.records.append({
                    "epoch": epoch, "step": step, "clean_loss": clean,
                    "adv_loss": float(loss.detach()), "lr": lr, "grad_queries": pert.grad_queries,
                    "wall_time": time.perf_counter() - t0,
                })
                global_step += 1

            dev_wer = clean_wer(model, dev_examples, alphabet, cfg.batch_size) if dev_examples else None
            if out_dir is not None:
                ckpt = snapshot(epoch)
                save_checkpoint(ckpt, out_dir / f"epoch{epoch:03d}.ckpt")
                save_checkpoint(ckpt, out_dir / "last.ckpt")
                last_path = out_dir / "last.ckpt"
                if dev_wer is not None and dev_wer < best_wer:
                    save_checkpoint(ckpt, out_dir / "best.ckpt")
            if dev_wer is not None:
                best_wer = min(best_wer, dev_wer)
            logger.info("%s epoch %d: loss %.4f dev_wer %s", cfg.regime, epoch,
                        log.records[-1]["adv_loss"], dev_wer)

        model.eval()
        final = snapshot(cfg.epochs - 1)

    if out_dir is not None:
        if not (out_dir / "best.ckpt").exists():
            save_checkpoint(final, out_dir / "best.ckpt")
        log.write_jsonl(out_dir / "train_log.jsonl")
    log.summary = {
        "epochs_run": cfg.epochs,
        "best_dev_wer": None if best_wer == math.inf else best_wer,
        "checkpoint_path": str(last_path) if last_path else None,
        "parameter_hash": final.meta["parameter_hash"],
    }
    return final, log
