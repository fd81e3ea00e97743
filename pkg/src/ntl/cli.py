"""Command-line entry point: ``ntl synth|train|calibrate|eval|analyze|predict``.

Every command accepts ``--config FILE.json`` whose keys are option names
(dashes or underscores); explicit flags override the file. The effective
configuration is written to ``<out>/config.json``.

Exit codes: 0 success, 2 configuration or validation error, 3 training
failure, 4 data mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import load_bundle, save_bundle, train_all
from .calibration import calibrate_bundle, calibration_sweep
from .data import (
    FormatError,
    ParseReport,
    PositionNoise,
    SynthConfig,
    build_vocab,
    label_matrix,
    load_annotations,
    load_features,
    load_tags,
    preprocess_tags,
    split_by_user,
    synth_generate,
    write_corpus,
)
from .em import TrainConfig
from .metrics import (
    VocabularyMismatch,
    annotation_metrics,
    compare_pi,
    empirical_tag_likelihoods,
    enumerate_queries,
    index_accuracy_curve,
    predict_topk,
    prob_matrix,
    retrieval_metrics,
    tag_prediction_metrics,
    write_tsv,
    z_classification_metrics,
)
from .model import InputError

log = logging.getLogger("ntl")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_DATA = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def derive_seed(root: int, component: str) -> int:
    """Independent 63-bit seed for one component of a run."""
    h = hashlib.blake2b(f"{root}/{component}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def _floats(text):
    vals = [float(v) for v in str(text).split(",") if v.strip()]
    return vals[0] if len(vals) == 1 else vals


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _threads(args):
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("NTL_THREADS", "1") or 1))


def _outdir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise CommandError(f"cannot write to {out}: {e}", EXIT_CONFIG) from None
    return out


def _echo_config(out: Path, args):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _read_split(path):
    split = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) >= 2 and parts[0] != "image_id":
                split[parts[0]] = parts[1]
    return split


def _restrict(ids, args):
    if not getattr(args, "split", None):
        return list(ids)
    split = _read_split(args.split)
    return [i for i in ids if split.get(i) == args.subset]


def _features_for(store, ids):
    keep = [i for i in ids if i in store]
    if len(keep) < len(ids):
        log.warning("%d images have no feature vector and are skipped", len(ids) - len(keep))
    return keep, store.matrix(keep) if keep else np.zeros((0, store.dim))


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        minibatch_size=args.minibatch_size,
        num_minibatches=args.minibatches,
        eta=args.eta,
        learning_rate=args.lr,
        lr_decay=args.lr_decay,
        lr_decay_steps=args.lr_decay_steps,
        weight_decay=args.weight_decay,
        gamma_mode=args.gamma_mode,
        seed=derive_seed(args.seed, "train"),
        robust=args.robust,
        pi_floor=args.pi_floor,
        pi_ceiling=args.pi_ceiling,
        gamma_floor=args.gamma_floor,
        log_every=args.log_every,
    )


# ----------------------------------------------------------------- commands


def cmd_synth(args):
    try:
        cfg = SynthConfig(
            num_tags=args.tags,
            dim=args.dim,
            num_images=args.images,
            pi_star=args.pi,
            gamma_star=args.gamma,
            prevalence=args.prevalence,
            weight_scale=args.weight_scale,
            num_users=args.users,
            position_noise=PositionNoise(args.position_noise) if args.position_noise else None,
            seed=args.seed,
            param_seed=args.param_seed,
        )
    except ValueError as e:
        raise CommandError(str(e)) from None
    out = _outdir(args.out)
    corpus = synth_generate(cfg)
    paths = write_corpus(out, corpus)
    _echo_config(out, args)
    for p in paths.values():
        print(p)


def cmd_train(args):
    cfg = _train_config(args)
    out = _outdir(args.out)
    store = load_features(args.features)
    report = ParseReport()
    images = preprocess_tags(load_tags(args.tags, report), max_tags=args.max_tags, lemmatize=args.lemmatize)
    if args.split:
        split = _read_split(args.split)
        train = [im for im in images if split.get(im.image_id) == "train"]
        test = [im for im in images if split.get(im.image_id) == "test"]
    elif args.test_fraction > 0:
        try:
            train, test = split_by_user(images, args.test_fraction, derive_seed(args.seed, "split"))
        except ValueError as e:
            raise CommandError(str(e)) from None
    else:
        train, test = images, []
    vocab = build_vocab(train, args.min_count)
    tags = vocab.tags[: args.max_vocab] if args.max_vocab else vocab.tags
    if not tags:
        raise CommandError("empty vocabulary; lower --min-count", EXIT_DATA)
    ids, X = _features_for(store, [im.image_id for im in train])
    by_id = {im.image_id: im for im in train}
    Y = label_matrix([by_id[i] for i in ids], tags)

    bundle = train_all(X, Y, tags, cfg, threads=_threads(args))
    bundle.config = {
        "train": cfg.to_dict(),
        "preprocess": {"max_tags": args.max_tags, "lemmatize": args.lemmatize},
    }
    if bundle.failures and args.strict:
        for t, msg in bundle.failures.items():
            print(f"{t}\t{msg}", file=sys.stderr)
        raise CommandError(f"{len(bundle.failures)} tags failed to train", EXIT_TRAIN)
    if not bundle.models:
        raise CommandError("no tag could be trained", EXIT_TRAIN)

    save_bundle(out / "bundle.bin", bundle)
    with open(out / "split.tsv", "w", encoding="utf-8") as fh:
        fh.write("image_id\tsplit\n")
        for name, part in (("train", train), ("test", test)):
            for im in part:
                fh.write(f"{im.image_id}\t{name}\n")
    write_tsv(out / "vocab.tsv", [{"tag": t, "count": c} for t, c in zip(vocab.tags, vocab.counts)])
    learned = cfg.robust and cfg.gamma_mode == "learned"
    rows, trace_rows = [], []
    for j, t in enumerate(tags):
        if t not in bundle:
            continue
        m = bundle[t]
        row = {"tag": t, "n_positive": int(Y[:, j].sum()), "pi": m.pi}
        if learned:
            row["gamma"] = m.gamma
        tr = bundle.traces.get(t, [])
        row["final_loss"] = tr[-1]["loss"] if tr else None
        rows.append(row)
        for rec in tr:
            r = {"tag": t, "minibatch": rec["minibatch"], "loss": rec["loss"], "pi": rec["pi"]}
            if learned:
                r["gamma"] = rec["gamma"]
            trace_rows.append(r)
    write_tsv(out / "train_log.tsv", rows)
    write_tsv(out / "loss_trace.tsv", trace_rows)
    (out / "failures.json").write_text(json.dumps(
        {"failed_tags": bundle.failures, "parse_report": report.to_dict()}, indent=2, sort_keys=True) + "\n")
    _echo_config(out, args)
    print(out / "bundle.bin")


def _annotated_inputs(args):
    store = load_features(args.features)
    ann = load_annotations(args.annotations)
    ids = _restrict(ann.image_ids, args)
    ids, X = _features_for(store, ids)
    return ann.select(ids), X


def cmd_calibrate(args):
    out = _outdir(args.out)
    bundle = load_bundle(args.bundle)
    ann, X = _annotated_inputs(args)
    if not set(bundle.vocab) & set(ann.tags):
        raise VocabularyMismatch(bundle.vocab)
    seed = derive_seed(args.seed, "calibrate")
    n = len(ann)
    if n == 0:
        raise CommandError("no annotated images with features", EXIT_DATA)
    if args.sweep:
        perm = np.random.default_rng(derive_seed(args.seed, "holdout")).permutation(n)
        n_hold = int(round(args.holdout_fraction * n))
        hold, pool = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
        sizes = _ints(args.sweep)
        if not hold.size or max(sizes) > pool.size:
            raise CommandError(
                f"sweep needs a non-empty held-out set and sizes <= {pool.size} calibration images")
        eval_ann = ann.subset(hold)
        shared = [t for t in bundle.vocab if t in set(ann.tags)]
        sub = bundle.with_models({t: bundle[t] for t in shared})

        def evaluate(cal):
            cal_sub = cal.with_models({t: cal[t] for t in shared})
            m = annotation_metrics(cal_sub, X[hold], eval_ann, k=args.k).metrics
            return {"precision": m["precision"], "recall": m["recall"], "f_score": m["f_score"]}

        base = evaluate(sub)
        bundles, curve = calibration_sweep(
            bundle, X[pool], ann.labels[pool], ann.tags, sizes, seed=seed, evaluate=evaluate)
        curve.insert(0, {"subset_size": 0, "clamped": 0, **base})
        for size, b in bundles.items():
            save_bundle(out / f"bundle_calibrated_{size}.bin", b)
        write_tsv(out / "calibration_sweep.tsv", curve)
        print(out / "calibration_sweep.tsv")
    else:
        size = args.subset_size or n
        if size > n:
            raise CommandError(f"--subset-size {size} exceeds the {n} calibration images")
        cal, rep = calibrate_bundle(bundle, X, ann.labels, ann.tags, subset_size=size, seed=seed)
        save_bundle(out / "bundle_calibrated.bin", cal)
        (out / "calibration_report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        print(out / "bundle_calibrated.bin")
    _echo_config(out, args)


def cmd_eval(args):
    out = _outdir(args.out)
    bundle = load_bundle(args.bundle)
    if args.protocol == "tag_prediction":
        if not args.tags:
            raise CommandError("--tags is required for tag_prediction")
        store = load_features(args.features)
        pre = bundle.config.get("preprocess", {})
        images = preprocess_tags(load_tags(args.tags), max_tags=pre.get("max_tags", 20),
                                 lemmatize=pre.get("lemmatize", True))
        keep = set(_restrict([im.image_id for im in images], args))
        images = [im for im in images if im.image_id in keep and im.image_id in store]
        if not images:
            raise CommandError("no test images", EXIT_DATA)
        X = store.matrix([im.image_id for im in images])
        report = tag_prediction_metrics(bundle, X, images, k=args.k, mode=args.mode)
    else:
        if not args.annotations:
            raise CommandError(f"--annotations is required for {args.protocol}")
        ann, X = _annotated_inputs(args)
        if len(ann) == 0:
            raise CommandError("no annotated test images", EXIT_DATA)
        if args.protocol == "annotation":
            report = annotation_metrics(bundle, X, ann, k=args.k)
        elif args.protocol == "classification":
            report = z_classification_metrics(bundle, X, ann, threshold=args.threshold)
        else:
            missing = [t for t in bundle.vocab if t not in set(ann.tags)]
            if missing:
                raise VocabularyMismatch(missing)
            queries = enumerate_queries(ann, args.max_arity)
            if not queries:
                raise CommandError("empty query list: no tag has a relevant test image", EXIT_DATA)
            report = retrieval_metrics(bundle, X, ann, queries, k=args.k)
    paths = report.write(out)
    _echo_config(out, args)
    print(json.dumps(report.metrics, sort_keys=True))
    for p in paths:
        print(p)


def cmd_analyze(args):
    out = _outdir(args.out)
    pre_max = args.max_tags
    images = preprocess_tags(load_tags(args.tags), max_tags=pre_max, lemmatize=args.lemmatize)
    ann = load_annotations(args.annotations)
    lik = empirical_tag_likelihoods(images, ann)
    lik.write(out, "tag_likelihoods")
    curve = index_accuracy_curve(images, ann, cutoff=args.cutoff)
    curve.write(out, "index_accuracy")
    print(json.dumps(lik.metrics, sort_keys=True))
    if args.bundle:
        bundle = load_bundle(args.bundle)
        ps = {r["tag"]: r["p_supply"] for r in lik.per_tag}
        try:
            cmp = compare_pi(bundle, ps)
        except ValueError as e:
            raise CommandError(str(e), EXIT_DATA) from None
        cmp.write(out, "compare_pi")
        print(json.dumps(cmp.metrics, sort_keys=True))
    _echo_config(out, args)


def cmd_predict(args):
    bundle = load_bundle(args.bundle)
    if args.input and not args.input.endswith(".tsv") and args.input != "-":
        store = load_features(args.input)
        records = list(zip(store.ids, store.vectors.astype(np.float64)))
    else:
        fh = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
        records = []
        for line in fh:
            parts = line.strip().split("\t")
            if not parts or not parts[0]:
                continue
            try:
                records.append((parts[0], np.array([float(v) for v in parts[1:]])))
            except ValueError:
                raise CommandError(f"bad feature record for {parts[0]!r}") from None
    for image_id, x in records:
        if x.shape[0] != bundle.dim:
            raise CommandError(
                f"record {image_id!r} has {x.shape[0]} values, bundle expects {bundle.dim}", EXIT_DATA)
        top = predict_topk(bundle, x, k=args.k, mode=args.mode)
        p = prob_matrix(bundle, x[None, :], args.mode)[0]
        col = {t: j for j, t in enumerate(bundle.vocab)}
        print("\t".join([image_id] + [f"{t}:{p[col[t]]:.6f}" for t in top]))


# ----------------------------------------------------------------- parser


def _add_train_flags(p):
    d = TrainConfig()
    g = p.add_argument_group("training")
    g.add_argument("--minibatch-size", type=int, default=d.minibatch_size)
    g.add_argument("--minibatches", type=int, default=d.num_minibatches)
    g.add_argument("--eta", type=float, default=d.eta, help="step size of the sufficient-statistic averages")
    g.add_argument("--lr", type=float, default=d.learning_rate)
    g.add_argument("--lr-decay", choices=["constant", "inverse_time"], default=d.lr_decay)
    g.add_argument("--lr-decay-steps", type=float, default=d.lr_decay_steps)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--gamma-mode", choices=["fixed_one", "learned"], default=d.gamma_mode)
    g.add_argument("--robust", type=_bool, default=True, help="false trains plain logistic regression")
    g.add_argument("--pi-floor", type=float, default=d.pi_floor)
    g.add_argument("--pi-ceiling", type=float, default=d.pi_ceiling)
    g.add_argument("--gamma-floor", type=float, default=d.gamma_floor)
    g.add_argument("--log-every", type=int, default=d.log_every)


def _add_split_flags(p):
    p.add_argument("--split", help="split.tsv written by `train`")
    p.add_argument("--subset", default="test", help="split name to keep when --split is given")


def build_parser():
    parser = argparse.ArgumentParser(prog="ntl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ntl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--seed", type=int, default=0, help="root seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads (env NTL_THREADS)")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic noisy-tag corpus")
    p.add_argument("--tags", type=int, default=20)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--images", type=int, default=50000)
    p.add_argument("--pi", type=_floats, default=0.4, help="scalar or comma list per tag")
    p.add_argument("--gamma", type=_floats, default=1.0)
    p.add_argument("--prevalence", type=_floats, default=0.2)
    p.add_argument("--weight-scale", type=float, default=1.0)
    p.add_argument("--users", type=int, default=0)
    p.add_argument("--position-noise", type=float, default=0.0, help="shift pushing spurious tags later")
    p.add_argument("--param-seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "train one robust model per tag")
    p.add_argument("--features", required=True)
    p.add_argument("--tags", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-vocab", type=int, default=0)
    p.add_argument("--max-tags", type=int, default=20)
    p.add_argument("--lemmatize", type=_bool, default=True)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--split", help="explicit image_id<TAB>train|test file")
    p.add_argument("--strict", action="store_true", help="exit 3 if any tag fails")
    _add_train_flags(p)

    p = command("calibrate", cmd_calibrate, "fit per-tag intercepts on curated labels")
    p.add_argument("--bundle", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--subset-size", type=int, default=0, help="0 uses every image")
    p.add_argument("--sweep", help="comma list of subset sizes")
    p.add_argument("--holdout-fraction", type=float, default=0.5, help="held-out share for --sweep scoring")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_split_flags(p)

    p = command("eval", cmd_eval, "evaluate a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--protocol", required=True,
                   choices=["tag_prediction", "annotation", "retrieval", "classification"])
    p.add_argument("--tags", help="tags TSV (tag_prediction)")
    p.add_argument("--annotations", help="annotations TSV (annotation, retrieval, classification)")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--mode", choices=["y", "z"], default="y", help="tag_prediction ranking")
    p.add_argument("--max-arity", type=int, default=3)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    _add_split_flags(p)

    p = command("analyze", cmd_analyze, "tagging likelihoods and tag-position accuracy")
    p.add_argument("--tags", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--bundle", help="also correlate learned pi with empirical supply rates")
    p.add_argument("--cutoff", type=int, default=20)
    p.add_argument("--max-tags", type=int, default=10**9, help="positions beyond this are dropped")
    p.add_argument("--lemmatize", type=_bool, default=True)
    p.add_argument("--out", required=True)

    p = command("predict", cmd_predict, "annotate feature records")
    p.add_argument("--bundle", required=True)
    p.add_argument("--input", help="feature file (.bin or .tsv) or - for TSV on stdin")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--mode", choices=["y", "z"], default="z")
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from --config, so explicit flags still win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CommandError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(cfg, dict):
        raise CommandError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for k, v in cfg.items():
        dest = k.replace("-", "_")
        if dest not in known or dest in ("config", "func"):
            raise CommandError(f"unknown config key {k!r} for {args.command}")
        defaults[dest] = v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except CommandError as e:
        print(f"ntl: error: {e}", file=sys.stderr)
        return e.code
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CommandError as e:
        print(f"ntl: error: {e}", file=sys.stderr)
        return e.code
    except VocabularyMismatch as e:
        print(f"ntl: error: vocabulary mismatch, {e}", file=sys.stderr)
        return EXIT_DATA
    except (InputError, ValueError) as e:
        print(f"ntl: error: {e}", file=sys.stderr)
        return EXIT_DATA if isinstance(e, FormatError) else EXIT_CONFIG
    except BrokenPipeError:
        # reader closed stdout early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_OK
    except OSError as e:
        print(f"ntl: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
