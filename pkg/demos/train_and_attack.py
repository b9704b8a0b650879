"""Train a standard and a mixPGD recognizer on the tone corpus, then attack both.

Run with ``python demos/train_and_attack.py``. Takes a few minutes on one CPU.
The model is the reduced desk profile, so absolute error rates mean little;
the interesting number is how much each model degrades under attack.
"""
import dataclasses

import torch

from mixpgd import config as cfgmod
from mixpgd.attacks import AttackConfig, run_attack
from mixpgd.data import Alphabet, featurize_corpus, make_batch, synth_toy_corpus
from mixpgd.evaluation import evaluate_whitebox
from mixpgd.training import train

run = cfgmod.desk_config(seed=0)
alphabet = Alphabet()

# each character is a two-tone chord, so the "speech" is easy to synthesize
train_set = featurize_corpus(synth_toy_corpus(run.data.toy_seed, run.data.toy_size), run.data.mel)
eval_set = featurize_corpus(synth_toy_corpus(run.data.eval_toy_seed, 10), run.data.mel)
print("first training transcript:", repr(train_set[0].transcript))
print("feature shape [mel, frames]:", train_set[0].features.shape)

checkpoints = {}
for regime in ("standard", "mixpgd"):
    cfg = dataclasses.replace(run.train, regime=regime)
    ckpt, log = train(cfg, train_set, run.model, sinkhorn=run.sinkhorn)
    checkpoints[regime] = ckpt
    print(f"{regime:<9} final clean loss {log.records[-1]['clean_loss']:.3f}")

# a single batch attacked by hand: the perturbation stays inside the budget
# and leaves padded frames untouched
batch = make_batch(eval_set[:4], alphabet)
model = checkpoints["standard"].build_model()
pert = run_attack(model, batch, AttackConfig("pgd", run.train.epsilon, n_steps=20, seed=0))
print(f"\nmax |delta| = {float(pert.delta.abs().max()):.4f} (budget {run.train.epsilon})")
print("gradient queries:", pert.grad_queries)

suite = [AttackConfig("fgsm", run.train.epsilon),
         AttackConfig("pgd", run.train.epsilon, n_steps=20, seed=0)]
for regime, ckpt in checkpoints.items():
    report = evaluate_whitebox(ckpt, eval_set, suite, model_id=regime, sinkhorn=run.sinkhorn)
    print()
    print(report.format_table())
