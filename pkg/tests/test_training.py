import math

import pytest
import torch

from mixpgd.attacks import AttackConfig, mixpgd
from mixpgd.losses import SinkhornConfig
from mixpgd.model import SpeechRecognizer, load_checkpoint, parameter_hash
from mixpgd.training import (REGIMES, TrainConfig, TrainingDiverged, inner_maximization,
                             one_cycle_lr, train)

from conftest import TINY_MODEL

FAST_OT = SinkhornConfig(reg=0.05, max_iters=30, tol=1e-4)


def _cfg(regime, **kw):
    base = dict(regime=regime, epochs=3, inner_iters=2, epsilon=0.1, eta2=5e-3, batch_size=3)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule ---------------------------------------------------------------

@pytest.mark.parametrize("total", [1, 2, 7, 30, 101])
def test_one_cycle_hits_peak_and_anneals(total):
    lrs = [one_cycle_lr(s, total, 5e-4) for s in range(total)]
    assert max(lrs) == pytest.approx(5e-4, abs=1e-9)
    top = lrs.index(max(lrs))
    assert all(a <= b + 1e-15 for a, b in zip(lrs[:top], lrs[1:top + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[top:], lrs[top + 1:]))
    if total > 2:
        assert lrs[0] == pytest.approx(5e-4 / 25)
        assert lrs[-1] == pytest.approx(5e-4 / 25 / 1e4)


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.eta2 == 5e-4 and cfg.batch_size == 10 and cfg.inner_iters == 4
    assert cfg.eta1 == pytest.approx(cfg.epsilon / 4)
    # four steps of epsilon / 4 exactly span the budget
    assert cfg.inner_iters * cfg.eta1 == pytest.approx(cfg.epsilon)
    with pytest.raises(ValueError):
        TrainConfig(regime="trades")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# -- inner maximization -----------------------------------------------------

def test_inner_standard_is_zero(tiny_model, tiny_batch):
    pert = inner_maximization(tiny_model, tiny_batch, _cfg("standard"))
    assert torch.count_nonzero(pert.delta) == 0 and pert.grad_queries == 0


def test_inner_fgsm_ignores_inner_iters(tiny_model, tiny_batch):
    pert = inner_maximization(tiny_model, tiny_batch, _cfg("fgsm_adv", inner_iters=7))
    assert pert.grad_queries == 1


def test_inner_mixpgd_delegates(tiny_model, tiny_batch):
    cfg = _cfg("mixpgd", inner_iters=4, seed=5)
    a = inner_maximization(tiny_model, tiny_batch, cfg, torch.Generator().manual_seed(11), FAST_OT)
    direct = AttackConfig("mixpgd", 0.1, step_size=0.025, n_steps=4, seed=5)
    b = mixpgd(tiny_model, tiny_batch, direct, torch.Generator().manual_seed(11), FAST_OT)
    assert torch.equal(a.delta, b.delta)
    # T_i steps of epsilon / 4 reach the boundary but never cross it
    assert float(a.delta.abs().max()) == pytest.approx(0.1)


# -- full loop --------------------------------------------------------------

@pytest.mark.parametrize("regime", REGIMES)
def test_every_regime_trains(regime, tiny_corpus, tmp_path):
    cfg = _cfg(regime, epochs=4)
    ckpt, log = train(cfg, tiny_corpus, TINY_MODEL, out_dir=tmp_path, sinkhorn=FAST_OT,
                      check_purity=True)
    steps = math.ceil(len(tiny_corpus) / cfg.batch_size)
    assert len(log.records) == cfg.epochs * steps
    expected_queries = {"standard": 0, "fgsm_adv": 1}.get(regime, cfg.inner_iters)
    assert all(r["grad_queries"] == expected_queries for r in log.records)
    first = sum(r["clean_loss"] for r in log.records[:steps])
    last = sum(r["clean_loss"] for r in log.records[-steps:])
    assert last < first
    assert max(log.lr_trace) == pytest.approx(cfg.eta2, abs=1e-9)
    assert ckpt.regime == regime
    for name in ("last.ckpt", "best.ckpt", "epoch000.ckpt", "epoch003.ckpt", "train_log.jsonl"):
        assert (tmp_path / name).exists()
    assert load_checkpoint(tmp_path / "last.ckpt").meta["parameter_hash"] == log.summary["parameter_hash"]


def test_same_seed_same_parameters(tiny_corpus):
    cfg = _cfg("mixpgd", epochs=2)
    a, _ = train(cfg, tiny_corpus, TINY_MODEL, sinkhorn=FAST_OT)
    b, _ = train(cfg, tiny_corpus, TINY_MODEL, sinkhorn=FAST_OT)
    c, _ = train(_cfg("mixpgd", epochs=2, seed=1), tiny_corpus, TINY_MODEL, sinkhorn=FAST_OT)
    assert a.meta["parameter_hash"] == b.meta["parameter_hash"]
    assert a.meta["parameter_hash"] != c.meta["parameter_hash"]
    assert parameter_hash(a.build_model()) == a.meta["parameter_hash"]


def test_training_leaves_global_rng_alone(tiny_corpus):
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    train(_cfg("standard", epochs=1), tiny_corpus, TINY_MODEL)
    assert torch.equal(torch.rand(3), expected)


def test_mix_clean_changes_objective(tiny_corpus):
    a, _ = train(_cfg("pgd_adv", epochs=1), tiny_corpus, TINY_MODEL)
    b, _ = train(_cfg("pgd_adv", epochs=1, mix_clean=True), tiny_corpus, TINY_MODEL)
    assert a.meta["parameter_hash"] != b.meta["parameter_hash"]


def test_dev_set_selects_best(tiny_corpus, tmp_path):
    _, log = train(_cfg("standard"), tiny_corpus[:4], TINY_MODEL, dev_examples=tiny_corpus[4:],
                   out_dir=tmp_path)
    assert log.summary["best_dev_wer"] is not None
    assert (tmp_path / "best.ckpt").exists()


def test_divergence_reports_batch(tiny_corpus, tmp_path, monkeypatch):
    import mixpgd.training as training

    calls = {"n": 0}
    real = training._batch_ctc

    def flaky(model, batch):
        calls["n"] += 1
        loss = real(model, batch)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(training, "_batch_ctc", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(_cfg("standard"), tiny_corpus, TINY_MODEL, out_dir=tmp_path)
    assert info.value.epoch == 1 and info.value.step == 0
    assert info.value.batch_id
    assert info.value.checkpoint_path is not None and info.value.checkpoint_path.exists()


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train(_cfg("standard"), [], TINY_MODEL)
