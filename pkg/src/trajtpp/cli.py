"""Command-line pipeline: synth -> prep -> train -> backtest -> embed -> downstream."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .analytics import (
    AnalyticsError,
    backtest_confusion,
    confusion_csv_rows,
    fit_elasticnet_cv,
    fit_linear,
    gain_curve,
    holdout_by_group,
    paired_permutation,
    propensity_match,
    stratified_folds,
    weighted_guess,
)
from .checkpoint import CheckpointError
from .data import BucketSpec, DataError, Vocabulary, build_sequences, fit_buckets, read_events_csv, split_patients
from .embeddings import EmbeddingError, embed_cohort, read_embeddings, write_embeddings
from .model import ConceptEmbeddingMap, TPPModel
from .synth import CohortSpec, SpecError, gen_cohort, write_cohort
from .training import TrainConfig, TrainingError, backtest, evaluate_nll, rollout_batch, train

log = logging.getLogger("trajtpp")

DOMAIN_ERRORS = (
    DataError,
    SpecError,
    AnalyticsError,
    EmbeddingError,
    TrainingError,
    CheckpointError,
    FileNotFoundError,
    FloatingPointError,
    ValueError,
    KeyError,
)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# plumbing


def substream(root, name):
    """Deterministic child seed for a named module stream."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])


def digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def read_table(path):
    """CSV with header -> list of dicts (strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return reader.fieldnames or [], rows


def _fmt(x):
    return repr(float(x))


def _input_paths(args):
    out = []
    for key, val in sorted(vars(args).items()):
        if key in ("out", "config", "run") or not isinstance(val, str):
            continue
        p = Path(val)
        if p.is_file():
            out.append(p)
        elif p.is_dir() and key in ("prep",):
            out.extend(sorted(q for q in p.iterdir() if q.is_file() and q.name != "provenance.json"))
    return out


def write_provenance(out, args, seeds):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    write_json(
        Path(out) / "provenance.json",
        {
            "command": args.command,
            "config": config,
            "seed": args.seed,
            "substreams": seeds,
            "version": __version__,
            "inputs": {str(p): digest(p) for p in _input_paths(args)},
        },
    )


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _load_vocab(args):
    return Vocabulary.load(_need(args.vocab, "vocabulary"))


def _load_prep(prep):
    d = Path(_need(prep, "prep directory"))
    buckets = BucketSpec.from_json(json.loads((d / "buckets.json").read_text(encoding="utf-8")))
    splits = json.loads((d / "splits.json").read_text(encoding="utf-8"))
    params = json.loads((d / "prep.json").read_text(encoding="utf-8"))
    return buckets, splits, params


def _sequences(args, vocab, keep="earliest", before=None):
    buckets, splits, params = _load_prep(args.prep)
    rows = read_events_csv(_need(args.events, "events file"))
    if before is not None:
        rows = [r for r in rows if r.patient_id in before and r.interval < before[r.patient_id]]
    seqs, _ = build_sequences(rows, vocab, params["min_len"], params["max_len"], buckets, keep=keep)
    return seqs, splits


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    out = _out_dir(args)
    overrides = {}
    if args.spec:
        overrides = json.loads(Path(_need(args.spec, "cohort spec")).read_text(encoding="utf-8"))
    seed = substream(args.seed, "synth")
    spec = CohortSpec(**{**overrides, "n_patients": args.n_patients, "seed": seed})
    rows, records = gen_cohort(spec)
    write_cohort(out, spec, rows, records)
    write_provenance(out, args, {"synth": seed})
    print(f"wrote {len(records)} patients to {out}")


def cmd_prep(args):
    out = _out_dir(args)
    vocab = _load_vocab(args)
    rows = read_events_csv(_need(args.events, "events file"))
    buckets = fit_buckets(rows, vocab)
    seqs, report = build_sequences(rows, vocab, args.min_len, args.max_len, buckets)
    ratios = tuple(float(x) for x in args.split.split(","))
    if len(ratios) != 3:
        raise UsageError("--split needs three comma-separated ratios")
    seed = substream(args.seed, "split")
    tr, va, te = split_patients([s.patient_id for s in seqs], ratios, seed)
    write_json(out / "buckets.json", buckets.to_json())
    write_json(out / "splits.json", {"train": tr, "val": va, "test": te})
    write_json(out / "prep.json", {"min_len": args.min_len, "max_len": args.max_len, "vocab_hash": vocab.digest()})
    write_csv(out / "exclusions.csv", [["patient_id", "reason"], *sorted(report.excluded.items())])
    write_json(
        out / "prep_report.json",
        {
            "n_input": report.n_input,
            "retained": report.retained,
            "excluded": len(report.excluded),
            "malformed_rows": report.malformed_rows,
            "unknown_concepts": dict(sorted(report.unknown_concepts.items())),
        },
    )
    write_provenance(out, args, {"split": seed})
    print(f"retained {report.retained} of {report.n_input} patients")


def _concept_map(args):
    if args.concept_map and args.topics:
        return ConceptEmbeddingMap.load(_need(args.concept_map, "concept map"), _need(args.topics, "topic vectors"))
    if args.concept_map or args.topics:
        raise UsageError("--concept-map and --topics must be given together")
    return None


def cmd_train(args):
    out = _out_dir(args)
    vocab = _load_vocab(args)
    seqs, splits = _sequences(args, vocab)
    by = {s.patient_id: s for s in seqs}
    tr = [by[i] for i in splits["train"] if i in by]
    va = [by[i] for i in splits["val"] if i in by]
    if args.train_limit:
        tr = tr[: args.train_limit]
    seed = substream(args.seed, "train")
    overrides = {k: getattr(args, k) for k in ("d_model", "layers", "heads") if getattr(args, k) is not None}
    model = TPPModel.for_vocab(vocab, _concept_map(args), init_seed=seed % (1 << 31), **overrides)
    cfg = TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr,
        max_epochs=args.epochs,
        mc_samples=args.mc_samples,
        patience=args.patience,
        seed=seed,
    )
    res = train(model, tr, va, cfg, eval_backtest=not args.no_backtest)
    res.model.save(out / "model.ptpp", {"best_epoch": res.best_epoch, "vocab_tokens": vocab.tokens})
    (out / "epoch_log.csv").write_text(res.log_csv(), encoding="utf-8")
    best = res.log[res.best_epoch]
    write_json(out / "metrics.json", {"best_epoch": res.best_epoch, "val_nll": best["val_nll"], "n_train": len(tr), "n_val": len(va)})
    write_provenance(out, args, {"train": seed})
    print(f"best epoch {res.best_epoch}, val NLL {best['val_nll']:.4f}")


def _load_model(args, vocab):
    model, meta = TPPModel.load(_need(args.model, "model checkpoint"))
    if model.vocab_digest and model.vocab_digest != vocab.digest():
        raise DataError("model was trained with a different vocabulary")
    return model


def cmd_backtest(args):
    out = _out_dir(args)
    vocab = _load_vocab(args)
    model = _load_model(args, vocab)
    seqs, splits = _sequences(args, vocab)
    by = {s.patient_id: s for s in seqs}
    test = [by[i] for i in splits[args.split] if i in by]
    seed = substream(args.seed, "backtest")
    rolls, truths, _, rep = backtest(model, test, args.k, seed)
    names = vocab.tokens
    pred = [[names[t] for t in r.types] for r in rolls]
    true = [[names[t] for t in tt] for tt in truths]
    interest = args.types.split(",") if args.types else None
    write_csv(out / "confusion.csv", confusion_csv_rows(backtest_confusion(pred, true, interest)))
    counts = np.zeros(vocab.n_indicative)
    for tt in truths:
        for t in tt:
            counts[t - vocab.first_indicative] += 1
    guess = weighted_guess(counts / counts.sum(), len(truths), args.k, substream(args.seed, "guess"))
    gpred = [[vocab.indicative[g] for g in row] for row in guess]
    write_csv(out / "confusion_guess.csv", confusion_csv_rows(backtest_confusion(gpred, true, interest)))
    tot, n = evaluate_nll(model, [s.truncated(s.length) for s in test], seed=seed) if test else (float("nan"), 1)
    write_json(
        out / "metrics.json",
        {"nll": tot / max(n, 1), "rmse": rep.rmse, "accuracy": rep.accuracy, "diff_ratio": rep.diff_ratio, "n": len(rolls)},
    )
    write_provenance(out, args, {"backtest": seed, "guess": substream(args.seed, "guess")})
    print(f"backtested {len(rolls)} patients: accuracy {rep.accuracy:.3f}, diff-ratio {rep.diff_ratio:.3f}")


def _read_cohort(path):
    cols, rows = read_table(_need(path, "cohort file"))
    if "patient_id" not in cols:
        raise DataError(f"{path}: missing patient_id column")
    return cols, rows


def cmd_embed(args):
    out = _out_dir(args)
    vocab = _load_vocab(args)
    model = _load_model(args, vocab)
    before = None
    index = {}
    if args.cohort:
        _, rows = _read_cohort(args.cohort)
        index = {r["patient_id"]: int(r["index_interval"]) for r in rows}
        before = index
    seqs, _ = _sequences(args, vocab, keep="latest", before=before)
    if not seqs:
        raise DataError("no patients left to embed")
    seed = substream(args.seed, "embed")
    grids = []
    for start in range(0, len(seqs), args.batch_size):
        chunk = seqs[start : start + args.batch_size]
        grids += [r.grid for r in rollout_batch(model, chunk, args.k, [seed, start])]
    X, extrema = embed_cohort(grids, vocab)
    ids = [s.patient_id for s in seqs]
    ivs = [index.get(s.patient_id, int(s.times[s.length - 1]) + 1) for s in seqs]
    write_embeddings(out / "embeddings.csv", ids, ivs, X, vocab, extrema)
    write_provenance(out, args, {"embed": seed})
    print(f"embedded {len(ids)} patients into {X.shape[1]} named dimensions")


def _join(args, col):
    ids, _, names, X = read_embeddings(_need(args.embeddings, "embeddings file"))
    cols, rows = _read_cohort(args.cohort)
    if col not in cols:
        raise DataError(f"{args.cohort}: no column {col!r}")
    by = {r["patient_id"]: r for r in rows}
    keep = [i for i, pid in enumerate(ids) if pid in by]
    if not keep:
        raise DataError("no overlap between embeddings and cohort")
    recs = [by[ids[i]] for i in keep]
    y = np.array([float(r[col]) for r in recs])
    groups = None
    if args.group_col:
        if args.group_col not in cols:
            raise DataError(f"{args.cohort}: no column {args.group_col!r}")
        groups = np.array([int(r[args.group_col]) for r in recs])
    return [ids[i] for i in keep], names, X[keep], y, groups


def cmd_fit_outcome(args):
    out = _out_dir(args)
    ids, names, X, y, groups = _join(args, args.outcome)
    seed = substream(args.seed, "fit")
    y = y.astype(int)
    if groups is None:
        groups = stratified_folds(y, 6, seed)
    per, mean = holdout_by_group(X, y, groups, "logistic", seed)
    enet = fit_elasticnet_cv(X, y, l1_ratio=args.l1_ratio, seed=seed, groups=groups)
    write_json(
        out / "metrics.json",
        {"outcome": args.outcome, "metric": "auroc", "per_fold": {str(k): v for k, v in per.items()}, "mean": mean, "n": len(y), "prevalence": float(y.mean())},
    )
    rows = [["feature", "avg_weight", "n_selected", "n_repeats"]]
    rows += [[n, _fmt(w), int(c), enet.n_repeats] for n, w, c in zip(names, enet.coef, enet.selection_counts)]
    write_csv(out / "coefficients.csv", rows)
    write_provenance(out, args, {"fit": seed})
    print(f"{args.outcome}: mean held-out AUROC {mean:.3f}")


def cmd_fit_cost(args):
    out = _out_dir(args)
    ids, names, X, y, groups = _join(args, args.cost)
    if groups is None:
        groups = np.arange(len(y)) % 6
    per, mean = holdout_by_group(X, y, groups, "linear")
    pred = np.zeros(len(y))
    for g in np.unique(groups):
        fit = fit_linear(X[groups != g], y[groups != g])
        pred[groups == g] = fit.predict(X[groups == g])
    write_json(out / "metrics.json", {"cost": args.cost, "metric": "r2", "per_fold": {str(k): v for k, v in per.items()}, "mean": mean, "n": len(y)})
    write_csv(out / "predictions.csv", [["patient_id", "score"], *([pid, _fmt(p)] for pid, p in zip(ids, pred))])
    write_provenance(out, args, {})
    print(f"{args.cost}: mean held-out R^2 {mean:.3f}")


def cmd_match(args):
    out = _out_dir(args)
    cols, rows = _read_cohort(args.cohort)
    covs = args.covariates.split(",")
    for c in covs + [args.treated]:
        if c not in cols:
            raise DataError(f"{args.cohort}: no column {c!r}")
    X = np.array([[float(r[c]) for c in covs] for r in rows])
    t = np.array([int(r[args.treated]) for r in rows])
    seed = substream(args.seed, "match")
    res = propensity_match(X, t, covs, seed)
    ids = [r["patient_id"] for r in rows]
    rep = [["covariate", "smd_before", "smd_after", "flag"]]
    rep += [[c, _fmt(res.smd_before[c]), _fmt(res.smd_after[c]), int(c in res.flagged)] for c in covs]
    write_csv(out / "match_report.csv", rep)
    write_csv(out / "matched_pairs.csv", [["treated_id", "control_id"], *([ids[a], ids[b]] for a, b in res.pairs)])
    write_provenance(out, args, {"match": seed})
    print(f"matched {len(res.pairs)} pairs; flagged: {','.join(res.flagged) or 'none'}")


def _read_scores(path, col):
    cols, rows = read_table(_need(path, "score file"))
    if not cols or cols[0] != "patient_id":
        raise DataError(f"{path}: first column must be patient_id")
    col = col or cols[-1]
    if col not in cols:
        raise DataError(f"{path}: no column {col!r}")
    out = {}
    for line, r in enumerate(rows, start=2):
        try:
            out[r["patient_id"]] = float(r[col])
        except (TypeError, ValueError):
            raise DataError(f"{path}:{line}: non-numeric {col!r}") from None
    return out


def cmd_gain(args):
    out = _out_dir(args)
    a = _read_scores(args.scores, args.score_col)
    b = _read_scores(args.scores_b, args.score_col) if args.scores_b else None
    c = _read_scores(args.costs, args.cost_col)
    # the cost table may hold more patients than were scored
    ids = sorted(a)
    if b is not None and set(ids) != set(b):
        raise DataError("the two score files cover different patients")
    missing = [i for i in ids if i not in c]
    if missing:
        raise DataError(f"{len(missing)} scored patients have no cost (first: {missing[0]})")
    sa = np.array([a[i] for i in ids])
    cc = np.array([c[i] for i in ids])
    ga = gain_curve(sa, cc, ids)
    rows = [["fraction_patients", "capture_a"] + (["capture_b"] if b is not None else [])]
    result = {"auc_a": ga.auc, "n": len(ids)}
    if b is not None:
        sb = np.array([b[i] for i in ids])
        gb = gain_curve(sb, cc, ids)
        seed = substream(args.seed, "perm")
        d, p = paired_permutation(sa, sb, cc, args.iters, seed)
        result.update({"auc_b": gb.auc, "observed_d": d, "p": p, "iters": args.iters, "seed": seed})
        for x, ya, yb in zip(ga.x, ga.y, gb.y):
            rows.append([_fmt(x), _fmt(ya), _fmt(yb)])
    else:
        for x, ya in zip(ga.x, ga.y):
            rows.append([_fmt(x), _fmt(ya)])
    write_csv(out / "gain_curve.csv", rows)
    write_json(out / "perm_test.json", result)
    write_provenance(out, args, {"perm": substream(args.seed, "perm")})
    msg = f"gain AUC {ga.auc:.4f}"
    if b is not None:
        msg += f" vs {result['auc_b']:.4f}, p = {result['p']:.4g}"
    print(msg)


def cmd_plot_data(args):
    """Long-format CSV series for every figure-style artifact found in the run directories."""
    out = _out_dir(args)
    written = []
    for run in args.run:
        d = Path(_need(run, "run directory"))
        tag = d.name
        if (d / "epoch_log.csv").exists():
            cols, rows = read_table(d / "epoch_log.csv")
            series = [["epoch", "metric", "value"]]
            series += [[r["epoch"], m, r[m]] for r in rows for m in cols[1:]]
            written.append(_series(out, f"{tag}_training_curves.csv", series))
        if (d / "gain_curve.csv").exists():
            cols, rows = read_table(d / "gain_curve.csv")
            series = [["fraction_patients", "ranking", "capture"]]
            series += [[r[cols[0]], c, r[c]] for r in rows for c in cols[1:]]
            written.append(_series(out, f"{tag}_gain.csv", series))
        if (d / "match_report.csv").exists():
            _, rows = read_table(d / "match_report.csv")
            series = [["covariate", "stage", "smd"]]
            series += [[r["covariate"], s, r[f"smd_{s}"]] for r in rows for s in ("before", "after")]
            written.append(_series(out, f"{tag}_smd.csv", series))
        if (d / "metrics.json").exists():
            m = json.loads((d / "metrics.json").read_text(encoding="utf-8"))
            if "per_fold" in m:
                series = [["fold", "metric", "value"]]
                series += [[k, m["metric"], _fmt(v)] for k, v in m["per_fold"].items()]
                written.append(_series(out, f"{tag}_folds.csv", series))
        if (d / "embeddings.csv").exists():
            _, _, names, X = read_embeddings(d / "embeddings.csv")
            series = [["concept", "mean", "sd"]]
            series += [[n, _fmt(mu), _fmt(sd)] for n, mu, sd in zip(names, X.mean(axis=0), X.std(axis=0))]
            written.append(_series(out, f"{tag}_embedding_profile.csv", series))
        if (d / "confusion.csv").exists():
            _, rows = read_table(d / "confusion.csv")
            series = [["event_type", "metric", "value"]]
            series += [[r["event_type"], m, r[m]] for r in rows for m in ("precision", "recall")]
            written.append(_series(out, f"{tag}_confusion.csv", series))
    if not written:
        raise DataError("no plottable artifacts found")
    write_provenance(out, args, {})
    print(f"wrote {len(written)} series")


def _series(out, name, rows):
    write_csv(out / name, rows)
    return name


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="UTF-8 JSON file of option values; flags override it")
    common.add_argument("--seed", type=int, default=0, help="root seed for every named substream")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker cap (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="trajtpp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic cohort")
    s.add_argument("--n-patients", type=int, default=1000)
    s.add_argument("--spec", help="JSON with cohort generator fields")

    s = add("prep", cmd_prep, "fit buckets and split patients")
    s.add_argument("--events", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--min-len", type=int, default=32)
    s.add_argument("--max-len", type=int, default=64)
    s.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test ratios")

    def data_args(s):
        s.add_argument("--events", required=True)
        s.add_argument("--vocab", required=True)
        s.add_argument("--prep", required=True, help="directory written by prep")

    s = add("train", cmd_train, "train the point-process model")
    data_args(s)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--mc-samples", type=int, default=10)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--train-limit", type=int, default=0, help="use at most this many training patients")
    s.add_argument("--d-model", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--concept-map", help="CSV concept,topic")
    s.add_argument("--topics", help="CSV topic,v1..vD")
    s.add_argument("--no-backtest", action="store_true", help="skip per-epoch rollout metrics")

    s = add("backtest", cmd_backtest, "roll out the last k events and score them")
    data_args(s)
    s.add_argument("--model", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("-k", type=int, default=6)
    s.add_argument("--types", help="comma-separated types of interest; others fold into 'None'")

    s = add("embed", cmd_embed, "patient embeddings from k-step rollouts")
    data_args(s)
    s.add_argument("--model", required=True)
    s.add_argument("--cohort", help="cohort CSV; history is cut at each index_interval")
    s.add_argument("-k", type=int, default=6)
    s.add_argument("--batch-size", type=int, default=512)

    s = add("fit-outcome", cmd_fit_outcome, "hold-out logistic AUROC and elastic-net weights")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--outcome", required=True)
    s.add_argument("--group-col", default="cohort")
    s.add_argument("--l1-ratio", type=float, default=0.75)

    s = add("fit-cost", cmd_fit_cost, "hold-out linear cost model R^2")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--cost", required=True)
    s.add_argument("--group-col", default="cohort")

    s = add("match", cmd_match, "1:1 propensity matching with SMD report")
    s.add_argument("--cohort", required=True)
    s.add_argument("--covariates", default="cov_age,cov_male,cov_race_b,cov_race_c,cov_bmi")
    s.add_argument("--treated", default="treated")

    s = add("gain", cmd_gain, "cost-capture curve and paired permutation test")
    s.add_argument("--scores", required=True)
    s.add_argument("--scores-b")
    s.add_argument("--costs", required=True)
    s.add_argument("--score-col")
    s.add_argument("--cost-col")
    s.add_argument("--iters", type=int, default=10_000)

    s = add("plot-data", cmd_plot_data, "CSV series for figure-style outputs")
    s.add_argument("--run", nargs="+", required=True, help="run directories to collect")
    return p


def _explicit_dests(parser, argv):
    """Option dests given on the command line (so they win over the config file)."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[argv[0]] if argv and argv[0] in sub.choices else None
    if sp is None:
        return set()
    given = set()
    for action in sp._actions:
        for opt in action.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv[1:]):
                given.add(action.dest)
    return given


def apply_config(parser, args, argv):
    if not args.config:
        return args
    cfg = json.loads(Path(_need(args.config, "config file")).read_text(encoding="utf-8"))
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    explicit = _explicit_dests(parser, argv)
    known = set(vars(args)) - {"func", "command", "config"}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if dest not in explicit:
            setattr(args, dest, val)
    return args


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = apply_config(parser, args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"trajtpp: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"trajtpp: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"trajtpp: error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"trajtpp: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
