"""Error-rate metrics and robustness evaluation harnesses."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch

from . import __version__
from .attacks import AttackConfig, run_attack
from .data import Alphabet, featurize_corpus, iter_batches
from .losses import SinkhornConfig
from .model import Checkpoint, SpeechRecognizer, greedy_decode

logger = logging.getLogger(__name__)

CLEAN_HASH = hashlib.sha256(b'{"family": "clean"}').hexdigest()[:12]


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class ErrorRates:
    cer: float
    wer: float
    n_examples: int
    total_ref_chars: int
    total_ref_words: int


def error_rates(refs: Sequence[str], hyps: Sequence[str]) -> ErrorRates:
    """Corpus-level CER/WER in percent (summed edits over summed reference length)."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    char_err = word_err = n_chars = n_words = 0
    for ref, hyp in zip(refs, hyps):
        char_err += edit_distance(ref, hyp)
        word_err += edit_distance(ref.split(), hyp.split())
        n_chars += len(ref)
        n_words += len(ref.split())
    if n_chars == 0 or n_words == 0:
        raise ValueError("references are empty")
    return ErrorRates(100.0 * char_err / n_chars, 100.0 * word_err / n_words,
                      len(refs), n_chars, n_words)


@dataclass
class EvalRow:
    model_id: str
    regime: str
    attack_config_hash: str
    attack_name: str
    epsilon: float
    steps: int
    cer: float | None
    wer: float | None
    status: str = "ok"


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, row: EvalRow):
        key = (row.model_id, row.attack_config_hash)
        if any((r.model_id, r.attack_config_hash) == key for r in self.rows):
            raise ValueError(f"duplicate row for model {row.model_id} attack {row.attack_name}")
        self.rows.append(row)

    def extend(self, other: "EvalReport"):
        for row in other.rows:
            self.add(row)
        return self

    def get(self, model_id, attack_name) -> EvalRow:
        for r in self.rows:
            if r.model_id == model_id and r.attack_name == attack_name:
                return r
        raise KeyError((model_id, attack_name))

    def to_dict(self):
        return {"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id", "regime", "attack", "epsilon", "steps", "cer", "wer"])
            for r in self.rows:
                w.writerow([r.model_id, r.regime, r.attack_name, r.epsilon, r.steps, r.cer, r.wer])

    @classmethod
    def read_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls([EvalRow(**r) for r in d["rows"]], d["metadata"])

    def format_table(self, metric_cols=("cer", "wer")) -> str:
        """Attack conditions down, models across, CER/WER per model."""
        models = list(dict.fromkeys(r.model_id for r in self.rows))
        attacks = list(dict.fromkeys(r.attack_name for r in self.rows))
        head = f"{'':<16}" + "".join(f"{m + ' ' + c.upper():>22}" for m in models for c in metric_cols)
        lines = [head]
        for a in attacks:
            cells = []
            for m in models:
                row = next((r for r in self.rows if r.model_id == m and r.attack_name == a), None)
                for c in metric_cols:
                    v = None if row is None else getattr(row, c)
                    cells.append(f"{'-' if v is None else f'{v:.2f}':>22}")
            lines.append(f"{a:<16}" + "".join(cells))
        return "\n".join(lines)


def whitebox_suite(epsilon: float, seed: int = 0, mifgsm_steps: int = 10):
    """FGSM, MIFGSM, PGD20 and PGD100, all with step epsilon / 4."""
    step = epsilon / 4
    return [
        AttackConfig("fgsm", epsilon, epsilon, 1, seed=seed),
        AttackConfig("mifgsm", epsilon, step, mifgsm_steps, momentum_decay=1.0, seed=seed),
        AttackConfig("pgd", epsilon, step, 20, seed=seed),
        AttackConfig("pgd", epsilon, step, 100, seed=seed),
    ]


def transfer_suite(epsilon: float, seed: int = 0, mifgsm_steps: int = 10):
    """FGSM, MIFGSM and PGD50 crafted on a surrogate."""
    step = epsilon / 4
    return [
        AttackConfig("fgsm", epsilon, epsilon, 1, seed=seed),
        AttackConfig("mifgsm", epsilon, step, mifgsm_steps, momentum_decay=1.0, seed=seed),
        AttackConfig("pgd", epsilon, step, 50, seed=seed),
    ]


def _as_model(m) -> tuple[SpeechRecognizer, str, Alphabet]:
    if isinstance(m, Checkpoint):
        return m.build_model(), m.regime, m.alphabet
    return m, "unknown", Alphabet()


def _metadata(corpus, seed, **extra):
    ids = ",".join(ex.id for ex in corpus)
    return {
        "corpus_id": hashlib.sha256(ids.encode()).hexdigest()[:12],
        "seed": seed,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "code_version": __version__,
        **extra,
    }


def _run_rows(target, source, corpus, attack_configs, alphabet, batch_size, sinkhorn,
              model_id, regime, include_clean, name_prefix=""):
    rows = []
    conditions = ([None] if include_clean else []) + list(attack_configs)
    for cfg in conditions:
        name = "clean" if cfg is None else name_prefix + cfg.label
        try:
            gen = None if cfg is None else torch.Generator().manual_seed(int(cfg.seed))
            hyps, refs = [], []
            for batch in iter_batches(corpus, batch_size, alphabet):
                x = batch.features
                if cfg is not None:
                    x = x + run_attack(source, batch, cfg, generator=gen, sinkhorn=sinkhorn).delta
                with torch.no_grad():
                    out = target(x, batch.feature_lengths)
                hyps += greedy_decode(out, alphabet)
                refs += batch.transcripts
            er = error_rates(refs, hyps)
            cer, wer, status = er.cer, er.wer, "ok"
        except Exception as err:  # a failed attack only voids its own row
            logger.warning("attack %s failed: %s", name, err)
            cer = wer = None
            status = f"failed: {err}"
        rows.append(EvalRow(
            model_id=model_id, regime=regime,
            attack_config_hash=CLEAN_HASH if cfg is None else cfg.config_hash(),
            attack_name=name, epsilon=0.0 if cfg is None else cfg.epsilon,
            steps=0 if cfg is None else cfg.n_steps, cer=cer, wer=wer, status=status,
        ))
    return rows


def evaluate_whitebox(checkpoint, corpus, attack_configs, model_id=None, batch_size=10,
                      sinkhorn: SinkhornConfig = SinkhornConfig(), seed: int = 0) -> EvalReport:
    """Clean row plus one row per attack, each crafted on the evaluated model."""
    model, regime, alphabet = _as_model(checkpoint)
    model.eval()
    corpus = featurize_corpus(corpus)
    model_id = model_id or regime
    report = EvalReport(metadata=_metadata(corpus, seed, mode="whitebox"))
    for row in _run_rows(model, model, corpus, attack_configs, alphabet, batch_size,
                         sinkhorn, model_id, regime, include_clean=True):
        report.add(row)
    return report


def evaluate_transfer(target_checkpoint, surrogate_checkpoint, corpus, attack_configs,
                      model_id=None, batch_size=10, sinkhorn: SinkhornConfig = SinkhornConfig(),
                      seed: int = 0) -> EvalReport:
    """Perturbations crafted on the surrogate, decoded by the target."""
    target, regime, alphabet = _as_model(target_checkpoint)
    surrogate, _, _ = _as_model(surrogate_checkpoint)
    if target.config.n_mels != surrogate.config.n_mels:
        raise ValueError(
            f"surrogate expects {surrogate.config.n_mels} mel bins, target {target.config.n_mels}"
        )
    target.eval()
    surrogate.eval()
    corpus = featurize_corpus(corpus)
    model_id = model_id or regime
    report = EvalReport(metadata=_metadata(corpus, seed, mode="transfer"))
    for row in _run_rows(target, surrogate, corpus, attack_configs, alphabet, batch_size,
                         sinkhorn, model_id, regime, include_clean=False):
        report.add(row)
    return report


def ablation_unsup(train_corpus, eval_corpus, base_config, model_config, attack_configs=None,
                   sinkhorn: SinkhornConfig = SinkhornConfig(), alphabet=None):
    """Train mixPGD once with OT and once with KL, then run the white-box suite on each.

    Returns ``(report, {"ot": checkpoint, "kl": checkpoint})``.
    """
    from .training import train

    attack_configs = attack_configs or whitebox_suite(base_config.epsilon, base_config.seed)
    report = EvalReport(metadata=_metadata(eval_corpus, base_config.seed, mode="ablation"))
    ckpts = {}
    for kind in ("ot", "kl"):
        cfg = replace(base_config, regime="mixpgd", unsup_kind=kind)
        ckpt, _ = train(cfg, train_corpus, model_config, alphabet, sinkhorn=sinkhorn)
        ckpts[kind] = ckpt
        report.extend(evaluate_whitebox(ckpt, eval_corpus, attack_configs,
                                        model_id=f"mixpgd-{kind}", sinkhorn=sinkhorn,
                                        seed=base_config.seed))
    return report, ckpts
