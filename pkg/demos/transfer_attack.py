"""Black-box transfer: craft perturbations on a small surrogate, replay them on a target.

Run with ``python demos/transfer_attack.py``.
"""
import dataclasses

from mixpgd import config as cfgmod
from mixpgd.attacks import AttackConfig
from mixpgd.data import featurize_corpus, synth_toy_corpus
from mixpgd.evaluation import evaluate_transfer, evaluate_whitebox
from mixpgd.training import train

run = cfgmod.desk_config(seed=1)
train_set = featurize_corpus(synth_toy_corpus(run.data.toy_seed, run.data.toy_size), run.data.mel)
eval_set = featurize_corpus(synth_toy_corpus(run.data.eval_toy_seed, 10), run.data.mel)

target, _ = train(run.train, train_set, run.model)

# the surrogate has half the width and its own seed, and never sees the target's weights
small = dataclasses.replace(run.model, rnn_hidden=run.model.rnn_hidden // 2,
                            cnn_channels=run.model.cnn_channels // 2)
surrogate, _ = train(dataclasses.replace(run.train, seed=run.train.seed + 1000), train_set, small)

suite = [AttackConfig("fgsm", run.train.epsilon),
         AttackConfig("pgd", run.train.epsilon, n_steps=20, seed=0)]
print("white-box (attack crafted on the target itself):")
print(evaluate_whitebox(target, eval_set, suite, model_id="target").format_table())
print("\ntransfer (attack crafted on the surrogate):")
print(evaluate_transfer(target, surrogate, eval_set, suite, model_id="target").format_table())
