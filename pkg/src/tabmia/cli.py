"""``tabmia`` command line.

Config precedence: built-in defaults < ``--config`` file < command-line flags
(``--seed``, ``--workers``, ``--out``). Verbosity comes from ``TABMIA_LOG``
(e.g. ``INFO``; default ``WARNING``).

Exit codes:
    0  success
    2  bad command-line usage
    3  invalid configuration
    4  missing input file
    5  schema or data violation
    6  insufficient models or population
    7  numerical failure (non-finite loss, divergence)
    1  anything else

On failure a single JSON object ``{"error", "message", "exit_code"}`` is
written to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import attack as atk
from . import challenge as ch
from . import evaluation as ev
from .config import ConfigError, RunConfig, bundled_config_path, derive_seed
from .diffusion import build_schedule, load_denoiser, sample
from .numerics import NonFiniteError
from .tabular import (
    EncoderStats,
    InsufficientPopulation,
    SchemaError,
    TableSchema,
    decode_rows,
    encode_rows,
    read_csv,
    write_csv,
)

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_SCHEMA, EXIT_INSUFFICIENT, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5, 6, 7

log = logging.getLogger("tabmia")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, (InsufficientPopulation, atk.InsufficientModels)):
        return EXIT_INSUFFICIENT
    if isinstance(exc, (SchemaError, atk.DegenerateLabels, ev.SingleClassError)):
        return EXIT_SCHEMA
    if isinstance(exc, (NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_OTHER


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _ctx_files(root: Path):
    schema = TableSchema.load(root / "schema.json")
    with open(root / "encoder.json") as fh:
        stats = EncoderStats.from_dict(json.load(fh))
    return schema, stats


def cmd_gen_data(args):
    cfg = _load_config(args)
    ctx = ch.prepare_population(cfg, Path(cfg.out))
    print(json.dumps({"population": str(Path(cfg.out) / "population.csv"), "rows": len(ctx.rows)}))


def cmd_train_target(args):
    cfg = _load_config(args)
    inst = ch.train_target(cfg, Path(cfg.out), args.model_id)
    print(json.dumps({"checkpoint": str(inst.checkpoint)}))


def cmd_synth(args):
    root = Path(args.data_dir)
    schema, stats = _ctx_files(root)
    ckpt = Path(args.checkpoint)
    params, meta = load_denoiser(ckpt, ckpt.with_name("meta.json") if args.meta is None else args.meta)
    sched = build_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
    seed = args.seed if args.seed is not None else derive_seed(meta.get("seed", 0), "cli-synth")
    X = sample(params, sched, args.n, seed)
    out = Path(args.out)
    write_csv(out, schema, decode_rows(schema, stats, X))
    print(json.dumps({"synth": str(out), "rows": args.n, "seed": seed}))


def _time_and_noise(cfg: RunConfig, d: int, track: str):
    seed = derive_seed(cfg.master_seed, "attack", track)
    return atk.make_noise_set(cfg.attack.n_eps, d, derive_seed(seed, "noise_set")), atk.TimeSet(cfg.attack.timesteps)


def cmd_extract_features(args):
    cfg = _load_config(args)
    root = Path(cfg.out)
    schema, stats = _ctx_files(root)
    ckpt = Path(args.checkpoint)
    params, meta = load_denoiser(ckpt, ckpt.with_name("meta.json"))
    sched = build_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
    ids, rows = read_csv(args.records, schema)
    X = encode_rows(schema, stats, rows)
    if ids is None:
        ids = [str(i) for i in range(len(rows))]
    labels = None
    if args.labels:
        truth = ev.read_ground_truth(args.labels)
        labels = [truth[r] for r in ids]
    noise_set, time_set = _time_and_noise(cfg, schema.encoded_dim, args.track)
    fm = atk.extract_features(params, X, noise_set, time_set, sched, ids, args.model_id or meta.get("model_id", ""), labels)
    atk.save_features(fm, args.features_out)
    print(json.dumps({"features": args.features_out, "rows": fm.values.shape[0], "width": fm.width}))


def cmd_train_attack(args):
    cfg = _load_config(args)
    train = atk.FeatureMatrix.concat([atk.load_features(p) for p in args.train])
    val = atk.FeatureMatrix.concat([atk.load_features(p) for p in args.val])
    a = cfg.attack
    seed = derive_seed(derive_seed(cfg.master_seed, "attack", args.track), "classifier")
    clf = atk.train_attack_classifier(train, val, a.hidden_widths, a.lrs, a.epochs, seed, a.eval_every)
    clf.save(args.classifier_out)
    print(json.dumps({"classifier": args.classifier_out, "selected": clf.selected_hparams}))


def cmd_infer(args):
    clf = atk.AttackClassifier.load(args.classifier)
    records = []
    for p in args.features:
        records.extend(atk.score_records(clf, atk.load_features(p)))
    ch.write_scores(args.scores_out, records)
    print(json.dumps({"scores": args.scores_out, "rows": len(records)}))


def cmd_evaluate(args):
    scores = ev.read_scores(args.scores)
    gt = Path(args.ground_truth)
    if not gt.is_dir():
        raise FileNotFoundError(f"ground-truth directory {gt} not found")
    truth = {p.stem: ev.read_ground_truth(p) for p in sorted(gt.glob("*.csv"))}
    tab = ev.join_scores(scores, truth)
    levels = [float(x) for x in args.fpr]
    reports = [ev.metric_report("pooled", tab.scores, tab.labels, levels)]
    curves = {"pooled": ev.compute_roc(tab.scores, tab.labels)}
    for mid in sorted(set(tab.model_ids)):
        sub = tab.subset([mid])
        reports.append(ev.metric_report(mid, sub.scores, sub.labels, levels))
    ev.emit_report(reports, curves, args.out or ".", {"pooled": ["pooled"]})
    print(json.dumps({"metrics": str(Path(args.out or ".") / "metrics.json"), "auc": reports[0].auc}))


def cmd_run_challenge(args):
    cfg = _load_config(args)
    arts = ch.run_challenge(cfg, Path(cfg.out), cfg.workers)
    print(json.dumps({"out": str(arts.root), "tracks": arts.views}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabmia",
        description="Membership-inference audits for diffusion tabular synthesizers.",
        epilog="exit codes: 0 ok, 2 usage, 3 config, 4 missing file, 5 schema/data, "
               "6 insufficient models/population, 7 numerical failure, 1 other",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help=f"run config JSON (bundled tiny: {bundled_config_path()})")
        p.add_argument("--seed", type=int, help="override master seed")
        p.add_argument("--workers", type=int, help="parallel model workers")
        p.add_argument("--out", help="experiment/output directory")
        return p

    p = common(sub.add_parser("gen-data", help="generate population, schema and encoder"))
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train-target", help="train one fleet model"))
    p.add_argument("--model-id", required=True)
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("synth", help="sample a synthetic table from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--meta")
    p.add_argument("--data-dir", required=True, help="directory holding schema.json and encoder.json")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("extract-features", help="loss-grid features for a record CSV"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--labels", help="ground-truth CSV (record_id,is_member)")
    p.add_argument("--model-id")
    p.add_argument("--track", default="white_box", choices=["white_box", "black_box"])
    p.add_argument("--features-out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = common(sub.add_parser("train-attack", help="train the membership classifier"))
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--val", nargs="+", required=True)
    p.add_argument("--track", default="white_box", choices=["white_box", "black_box"])
    p.add_argument("--classifier-out", required=True)
    p.set_defaults(func=cmd_train_attack)

    p = sub.add_parser("infer", help="score feature files with a trained classifier")
    p.add_argument("--classifier", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--scores-out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="AUC and TPR@FPR of a scores file")
    p.add_argument("--scores", required=True)
    p.add_argument("--ground-truth", required=True, help="directory of <model_id>.csv label files")
    p.add_argument("--fpr", nargs="+", default=["0.10"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("run-challenge", help="full experiment: fleet, attacks, metrics"))
    p.set_defaults(func=cmd_run_challenge)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TABMIA_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
