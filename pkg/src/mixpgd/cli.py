"""Command-line entry point: ``mixpgd {train,attack,evaluate,repro,synth-data}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import config as cfgmod
from .attacks import run_attack
from .data import Alphabet, featurize_corpus, iter_batches, load_manifest, synth_toy_corpus, write_wav
from .evaluation import (EvalReport, evaluate_transfer, evaluate_whitebox, transfer_suite,
                         whitebox_suite)
from .model import CheckpointError, load_checkpoint
from .training import REGIMES, TrainingDiverged, train

log = logging.getLogger("mixpgd")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

# Published desk-irreproducible reference values (WER %, LibriSpeech 100 h).
REFERENCE_TABLE1_WER = {
    "standard": {"clean": 28.78, "FGSM": 48.70, "MIFGSM": 57.29, "PGD20": 69.69, "PGD100": 75.61},
    "fgsm_adv": {"clean": 33.70, "FGSM": 40.23, "MIFGSM": 39.75, "PGD20": 40.29, "PGD100": 40.45},
    "pgd_adv": {"clean": 33.16, "FGSM": 39.20, "MIFGSM": 39.54, "PGD20": 39.59, "PGD100": 41.02},
    "feature_scattering": {"clean": 30.01, "FGSM": 39.08, "MIFGSM": 41.02, "PGD20": 45.34, "PGD100": 47.60},
    "mixpgd": {"clean": 29.02, "FGSM": 35.07, "MIFGSM": 35.15, "PGD20": 35.29, "PGD100": 35.39},
}
REFERENCE_TABLE2_WER = {
    "standard": {"FGSM": 38.93, "MIFGSM": 41.44, "PGD50": 46.43},
    "fgsm_adv": {"FGSM": 33.93, "MIFGSM": 33.95, "PGD50": 34.05},
    "pgd_adv": {"FGSM": 33.25, "MIFGSM": 33.28, "PGD50": 33.32},
    "feature_scattering": {"FGSM": 57.50, "MIFGSM": 58.16, "PGD50": 58.71},
    "mixpgd": {"FGSM": 29.26, "MIFGSM": 29.36, "PGD50": 29.38},
}
REFERENCE_TABLE3_WER = {
    "kl": {"FGSM": 39.59, "MIFGSM": 39.76, "PGD20": 40.13, "PGD100": 40.35},
    "ot": {"FGSM": 35.07, "MIFGSM": 35.15, "PGD20": 35.29, "PGD100": 35.39},
}
REFERENCE_LABEL = "published reference (not desk-reproducible)"


class UsageError(Exception):
    pass


def set_determinism():
    if os.environ.get("MIXPGD_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _prepare_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"run directory {path} is not empty; pass --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args, base=None):
    return cfgmod.load(getattr(args, "config", None), getattr(args, "set", None), base=base)


def _corpora(run):
    d = run.data
    if d.manifest:
        train_set, rejects = load_manifest(d.manifest)
        if rejects:
            log.warning("%d manifest rows rejected: %s", len(rejects), rejects)
    else:
        train_set = synth_toy_corpus(d.toy_seed, d.toy_size)
    if d.eval_manifest:
        eval_set, _ = load_manifest(d.eval_manifest)
    else:
        eval_set = synth_toy_corpus(d.eval_toy_seed, d.eval_toy_size)
    return featurize_corpus(train_set, d.mel), featurize_corpus(eval_set, d.mel)


def _corpus_from_arg(spec, run):
    """``toy:SEED:N`` or a manifest path."""
    if spec is None:
        return _corpora(run)[1]
    if spec.startswith("toy:"):
        _, seed, n = spec.split(":")
        return featurize_corpus(synth_toy_corpus(int(seed), int(n)), run.data.mel)
    examples, _ = load_manifest(spec)
    return featurize_corpus(examples, run.data.mel)


def _provenance(run):
    return {"config_hash": run.config_hash, "seed": run.train.seed, "code_version": __version__}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = _load_config(args)
    if args.regime:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, regime=args.regime))
    out = _prepare_dir(args.out or Path(run.output.dir) / run.train.regime, args.force or run.output.force)
    run.dump(out / "config.json")
    train_set, eval_set = _corpora(run)
    ckpt, tlog = train(run.train, train_set, run.model, dev_examples=eval_set, out_dir=out,
                       sinkhorn=run.sinkhorn, meta=_provenance(run))
    summary = dict(tlog.summary, **_provenance(run))
    (out / "run.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_attack(args) -> int:
    run = _load_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    corpus = _corpus_from_arg(args.corpus, run)
    out = _prepare_dir(args.out, args.force)
    gen = torch.Generator().manual_seed(run.attack.seed)
    arrays = {}
    for k, batch in enumerate(iter_batches(corpus, run.eval.batch_size, ckpt.alphabet)):
        pert = run_attack(model, batch, run.attack, generator=gen, sinkhorn=run.sinkhorn)
        arrays[f"features_{k}"] = batch.features.numpy()
        arrays[f"delta_{k}"] = pert.delta.numpy()
        arrays[f"lengths_{k}"] = batch.feature_lengths.numpy()
    np.savez_compressed(out / "perturbations.npz", **arrays)
    meta = dict(_provenance(run), attack=run.attack.to_dict(),
                attack_config_hash=run.attack.config_hash(), checkpoint=str(args.checkpoint))
    (out / "attack.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote {out / 'perturbations.npz'}")
    return EXIT_OK


def _attack_list(args, run):
    if args.attacks:
        raw = cfgmod.read_raw(args.attacks)
        return cfgmod.from_dict({"attacks": raw.get("attacks", [])}).attacks
    if run.attacks:
        return run.attacks
    eps = run.attack.epsilon
    if args.surrogate:
        return transfer_suite(eps, run.attack.seed, run.eval.mifgsm_steps)
    return whitebox_suite(eps, run.attack.seed, run.eval.mifgsm_steps)


def cmd_evaluate(args) -> int:
    run = _load_config(args)
    for p in args.checkpoint:
        if not Path(p).is_file():
            raise UsageError(f"checkpoint not found: {p}")
    attacks = _attack_list(args, run)
    corpus = _corpus_from_arg(args.corpus, run)
    out = _prepare_dir(args.out, args.force)
    report = EvalReport(metadata=_provenance(run))
    surrogate = load_checkpoint(args.surrogate) if args.surrogate else None
    for p in args.checkpoint:
        ckpt = load_checkpoint(p)
        model_id = f"{ckpt.regime}:{Path(p).parent.name}/{Path(p).stem}"
        if surrogate is not None:
            part = evaluate_transfer(ckpt, surrogate, corpus, attacks, model_id=model_id,
                                     batch_size=run.eval.batch_size, sinkhorn=run.sinkhorn)
        else:
            part = evaluate_whitebox(ckpt, corpus, attacks, model_id=model_id,
                                     batch_size=run.eval.batch_size, sinkhorn=run.sinkhorn)
        report.metadata.update({k: v for k, v in part.metadata.items() if k != "timestamp"})
        report.extend(part)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    print(report.format_table())
    print(f"config_hash={run.config_hash} seed={run.attack.seed}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = _prepare_dir(args.out, args.force)
    examples = synth_toy_corpus(args.seed, args.n)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "audio_path", "transcript"])
        for ex in examples:
            name = f"{ex.id}.wav"
            write_wav(out / name, ex.waveform)
            w.writerow([ex.id, name, ex.transcript])
    print(f"wrote {len(examples)} utterances to {out / 'manifest.csv'}")
    return EXIT_OK


def _print_table(title, measured, reference, columns, run):
    prov = f"[config_hash={run.config_hash} seed={run.train.seed}]"
    print(f"\n{title}  {prov}")
    print(f"{'':<20}" + "".join(f"{c:>10}" for c in columns))
    for name, values in measured.items():
        cells = "".join(f"{values.get(c, float('nan')):>10.2f}" for c in columns)
        print(f"{name:<20}{cells}  {prov}")
    print(f"-- {REFERENCE_LABEL} --")
    for name, values in reference.items():
        print(f"{name:<20}" + "".join(f"{values.get(c, float('nan')):>10.2f}" for c in columns))


def cmd_repro(args) -> int:
    run = cfgmod.desk_config(args.seed, args.set) if args.config is None else _load_config(args)
    out = _prepare_dir(args.out or Path(run.output.dir) / f"repro-table{args.table}", args.force)
    run.dump(out / "config.json")
    train_set, eval_set = _corpora(run)
    eps, seed = run.train.epsilon, run.train.seed

    def fit(regime, **kw):
        tc = dataclasses.replace(run.train, regime=regime, **kw)
        tag = regime + ("-" + kw["unsup_kind"] if "unsup_kind" in kw else "")
        ckpt, _ = train(tc, train_set, run.model, out_dir=out / tag, sinkhorn=run.sinkhorn,
                        meta=_provenance(run))
        return ckpt

    report = EvalReport(metadata=_provenance(run))
    if args.table == 1:
        suite = whitebox_suite(eps, seed, run.eval.mifgsm_steps)
        measured = {}
        for regime in REGIMES:
            part = evaluate_whitebox(fit(regime), eval_set, suite, model_id=regime,
                                     sinkhorn=run.sinkhorn, seed=seed)
            report.extend(part)
            measured[regime] = {r.attack_name: r.wer for r in part.rows}
        cols = ["clean", "FGSM", "MIFGSM", "PGD20", "PGD100"]
        _print_table("Table 1 (desk scale, WER %)", measured, REFERENCE_TABLE1_WER, cols, run)
    elif args.table == 2:
        suite = transfer_suite(eps, seed, run.eval.mifgsm_steps)
        sur_model = dataclasses.replace(
            run.model,
            rnn_hidden=run.eval.surrogate_rnn_hidden or max(1, run.model.rnn_hidden // 2),
            cnn_channels=run.eval.surrogate_cnn_channels or max(1, run.model.cnn_channels // 2),
        )
        sur_cfg = dataclasses.replace(run.train, regime="standard",
                                      seed=seed + run.eval.surrogate_seed_offset)
        surrogate, _ = train(sur_cfg, train_set, sur_model, out_dir=out / "surrogate",
                             meta=_provenance(run))
        measured = {}
        for regime in REGIMES:
            part = evaluate_transfer(fit(regime), surrogate, eval_set, suite, model_id=regime,
                                     sinkhorn=run.sinkhorn, seed=seed)
            report.extend(part)
            measured[regime] = {r.attack_name: r.wer for r in part.rows}
        _print_table("Table 2 (desk scale, transfer WER %)", measured, REFERENCE_TABLE2_WER,
                     ["FGSM", "MIFGSM", "PGD50"], run)
    else:
        suite = whitebox_suite(eps, seed, run.eval.mifgsm_steps)
        measured = {}
        for kind in ("kl", "ot"):
            part = evaluate_whitebox(fit("mixpgd", unsup_kind=kind), eval_set, suite,
                                     model_id=f"mixpgd-{kind}", sinkhorn=run.sinkhorn, seed=seed)
            report.extend(part)
            measured[kind] = {r.attack_name: r.wer for r in part.rows}
        _print_table("Table 3 (desk scale, WER %)", measured, REFERENCE_TABLE3_WER,
                     ["FGSM", "MIFGSM", "PGD20", "PGD100"], run)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixpgd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML or JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=5")
        sp.add_argument("--force", action="store_true", help="reuse a non-empty run directory")

    sp = sub.add_parser("train", help="train one regime")
    common(sp, config_required=True)
    sp.add_argument("--regime", choices=REGIMES)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="save perturbed features for inspection")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", help="manifest path or toy:SEED:N")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("evaluate", help="white-box or transfer evaluation")
    common(sp)
    sp.add_argument("--checkpoint", required=True, action="append")
    sp.add_argument("--corpus", help="manifest path or toy:SEED:N")
    sp.add_argument("--attacks", help="config file holding an `attacks:` list")
    sp.add_argument("--surrogate", help="surrogate checkpoint for transfer attacks")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("repro", help="desk-scale run of one results table")
    common(sp)
    sp.add_argument("--table", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_repro)

    sp = sub.add_parser("synth-data", help="write the tone corpus as WAV + manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_determinism()
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - surfaced as a runtime failure code
        log.exception("runtime failure")
        print(f"runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
