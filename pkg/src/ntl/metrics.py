"""Tag prediction, annotation and retrieval metrics, and tagging-behaviour analyses."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from .bundle import ModelBundle

PROTOCOLS = ("tag_prediction", "annotation", "retrieval", "analysis", "classification")
QUERY_SCORING = "sum_log_prob_z"


class VocabularyMismatch(ValueError):
    def __init__(self, unmatched):
        self.unmatched = sorted(unmatched)
        super().__init__(f"{len(self.unmatched)} unmatched tags: {', '.join(self.unmatched[:20])}")


def harmonic(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class EvalReport:
    protocol: str
    metrics: dict = field(default_factory=dict)
    per_tag: list = field(default_factory=list)
    per_query: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def tables(self) -> dict:
        out = {}
        if self.per_tag:
            out["per_tag"] = self.per_tag
        if self.per_query:
            out["per_query"] = self.per_query
        for name, rows in self.curves.items():
            out[f"curve_{name}"] = rows
        return out

    def write(self, out_dir, stem=None) -> list:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.protocol
        paths = [out / f"{stem}.json"]
        paths[0].write_text(self.to_json() + "\n", encoding="utf-8")
        for name, rows in self.tables().items():
            p = out / f"{stem}_{name}.tsv"
            write_tsv(p, rows)
            paths.append(p)
        return paths


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_tsv(path, rows):
    cols = list(rows[0]) if rows else []
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(_cell(r.get(c)) for c in cols) + "\n")


# ----------------------------------------------------------------- prediction


def score_matrix(bundle: ModelBundle, X, tags=None):
    W, off, _, _ = bundle.params(tags)
    return np.asarray(X, dtype=np.float64) @ W.T + off


def prob_matrix(bundle: ModelBundle, X, mode="z", tags=None):
    """(n, T) probabilities: ``P(z=1|x)`` for mode ``z``, ``P(y=1|x)`` for mode ``y``."""
    S = score_matrix(bundle, X, tags)
    if mode == "z":
        return expit(S)
    if mode == "y":
        _, _, pi, gamma = bundle.params(tags)
        return pi * expit(S) + (1.0 - gamma) * expit(-S)
    raise ValueError(f"mode must be 'y' or 'z', got {mode!r}")


def topk_indices(P, k):
    """Column indices of the ``k`` largest entries per row; ties go to the lower index."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    return np.argsort(-P, axis=1, kind="stable")[:, : min(k, P.shape[1])]


def predict_topk(bundle: ModelBundle, x, k=5, mode="z"):
    if k < 1:
        raise ValueError("k must be >= 1")
    vocab = bundle.vocab
    idx = topk_indices(prob_matrix(bundle, np.atleast_2d(x), mode), k)[0]
    return [vocab[j] for j in idx]


# ----------------------------------------------------------------- protocols


def tag_prediction_metrics(bundle: ModelBundle, X, images, k=5, mode="y") -> EvalReport:
    """Precision/recall at ``k`` per image against the uploader's tags, averaged over images."""
    if len(images) == 0:
        raise ValueError("empty test set")
    vocab = bundle.vocab
    top = topk_indices(prob_matrix(bundle, X, mode), k)
    vset = set(vocab)
    precs, recs, skipped = [], [], 0
    for i, im in enumerate(images):
        truth = set(im.tags) & vset
        hits = sum(1 for j in top[i] if vocab[j] in truth)
        precs.append(hits / k)
        if truth:
            recs.append(hits / len(truth))
        else:
            skipped += 1
    p = float(np.mean(precs))
    r = float(np.mean(recs)) if recs else 0.0
    return EvalReport(
        "tag_prediction",
        metrics={
            "precision": p,
            "recall": r,
            "f_score": harmonic(p, r),
            "k": k,
            "mode": mode,
            "n_images": len(images),
            "n_images_without_vocab_tags": skipped,
        },
    )


def _columns(bundle, ann):
    missing = [t for t in bundle.vocab if t not in set(ann.tags)]
    if missing:
        raise VocabularyMismatch(missing)
    col = {t: j for j, t in enumerate(ann.tags)}
    return [col[t] for t in bundle.vocab]


def annotation_metrics(bundle: ModelBundle, X, ann, k=5) -> EvalReport:
    """Per-tag precision ``Nc/Np`` and recall ``Nc/Ng`` of top-``k`` ``z`` predictions."""
    if len(ann) == 0:
        raise ValueError("empty test set")
    cols = _columns(bundle, ann)
    Z = ann.labels[:, cols].astype(bool)
    n, T = Z.shape
    top = topk_indices(prob_matrix(bundle, X, "z"), k)
    pred = np.zeros((n, T), dtype=bool)
    pred[np.arange(n)[:, None], top] = True
    n_pred = pred.sum(0)
    n_correct = (pred & Z).sum(0)
    n_true = Z.sum(0)
    rows, precs, recs, fs = [], [], [], []
    for j, t in enumerate(bundle.vocab):
        flags = []
        if n_pred[j]:
            p = n_correct[j] / n_pred[j]
        else:
            p = 0.0
            flags.append("undefined->0")
        if n_true[j]:
            r = n_correct[j] / n_true[j]
            recs.append(r)
            fs.append(harmonic(p, r))
        else:
            r = None
            flags.append("no_ground_truth")
        precs.append(p)
        rows.append({
            "tag": t, "n_predicted": int(n_pred[j]), "n_correct": int(n_correct[j]),
            "n_true": int(n_true[j]), "precision": float(p),
            "recall": None if r is None else float(r),
            "f_score": None if r is None else float(harmonic(p, r)),
            "flags": flags,
        })
    P = float(np.mean(precs))
    R = float(np.mean(recs)) if recs else 0.0
    return EvalReport(
        "annotation",
        metrics={
            "precision": P,
            "recall": R,
            "f_score": harmonic(P, R),
            "mean_tag_f_score": float(np.mean(fs)) if fs else 0.0,
            "k": k,
            "n_images": n,
            "n_tags": T,
            "n_tags_without_ground_truth": int(np.sum(n_true == 0)),
        },
        per_tag=rows,
    )


def enumerate_queries(ann, max_arity=3, tags=None):
    """Every 1..max_arity tag combination with at least one image carrying all of them."""
    names = ann.tags
    pool = range(len(names)) if tags is None else [names.index(t) for t in tags if t in names]
    pool = sorted(pool)
    Z = ann.labels.astype(bool)
    out = []
    frontier = []
    for j in pool:
        if Z[:, j].any():
            frontier.append(((j,), Z[:, j]))
    out += [q for q, _ in frontier]
    for _ in range(2, max_arity + 1):
        nxt = []
        for q, mask in frontier:
            for j in pool:
                if j <= q[-1]:
                    continue
                m = mask & Z[:, j]
                if m.any():
                    nxt.append((q + (j,), m))
        out += [q for q, _ in nxt]
        frontier = nxt
    return [tuple(names[j] for j in q) for q in out]


def retrieval_metrics(bundle: ModelBundle, X, ann, queries, k=5) -> EvalReport:
    """Normalised precision at ``k`` for conjunctive tag queries.

    Images are ranked by the summed log ``P(z=1|x)`` of the query tags; ties
    go to the lexicographically smaller image id.
    """
    queries = list(queries)
    if not queries:
        raise ValueError("empty query list")
    vocab = bundle.vocab
    bcol = {t: j for j, t in enumerate(vocab)}
    acol = {t: j for j, t in enumerate(ann.tags)}
    LP = log_expit(score_matrix(bundle, X))
    Z = ann.labels.astype(bool)
    id_rank = np.empty(len(ann), dtype=np.int64)
    id_rank[np.argsort(np.array(ann.image_ids, dtype=object), kind="stable")] = np.arange(len(ann))
    rows, skipped = [], []
    for q in queries:
        q = tuple(q)
        if any(t not in bcol for t in q):
            skipped.append({"query": list(q), "reason": "tag not in bundle"})
            continue
        if any(t not in acol for t in q):
            skipped.append({"query": list(q), "reason": "tag not annotated"})
            continue
        rel = Z[:, [acol[t] for t in q]].all(axis=1)
        n_rel = int(rel.sum())
        if n_rel == 0:
            skipped.append({"query": list(q), "reason": "no relevant image"})
            continue
        s = LP[:, bcol[q[0]]].copy()
        for t in q[1:]:
            s += LP[:, bcol[t]]
        order = np.lexsort((id_rank, -s))[:k]
        hits = int(rel[order].sum())
        rows.append({
            "query": list(q), "arity": len(q), "n_relevant": n_rel, "hits": hits,
            "score": hits / min(k, n_rel),
        })
    metrics = {"k": k, "n_queries": len(rows), "n_skipped": len(skipped), "scoring": QUERY_SCORING}
    by_arity = {}
    for r in rows:
        by_arity.setdefault(r["arity"], []).append(r["score"])
    for a in sorted(by_arity):
        metrics[f"arity_{a}"] = float(np.mean(by_arity[a]))
        metrics[f"n_queries_arity_{a}"] = len(by_arity[a])
    return EvalReport("retrieval", metrics=metrics, per_query=rows, notes={"skipped": skipped})


def z_classification_metrics(bundle: ModelBundle, X, ann, threshold=0.5) -> EvalReport:
    """Thresholded ``P(z=1|x)`` against ground truth, pooled over all (image, tag) pairs."""
    cols = _columns(bundle, ann)
    Z = ann.labels[:, cols].astype(bool)
    pred = prob_matrix(bundle, X, "z") >= threshold
    tp = int((pred & Z).sum())
    fp = int((pred & ~Z).sum())
    fn = int((~pred & Z).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(
        "classification",
        metrics={
            "accuracy": float((pred == Z).mean()),
            "precision": p,
            "recall": r,
            "f_score": harmonic(p, r),
            "threshold": threshold,
        },
    )


# ----------------------------------------------------------------- analyses


def _join(tagged, ann):
    by_id = {}
    for im in tagged:
        by_id.setdefault(im.image_id, im)
    rows = [i for i, k in enumerate(ann.image_ids) if k in by_id]
    return [by_id[ann.image_ids[i]] for i in rows], ann.labels[rows].astype(bool)


def _ratio(a, b):
    return a / b if b else None


def empirical_tag_likelihoods(tagged, ann) -> EvalReport:
    """Counts of supplied tags against ground truth, per tag and pooled."""
    images, Z = _join(tagged, ann)
    col = {t: j for j, t in enumerate(ann.tags)}
    Y = np.zeros_like(Z)
    for i, im in enumerate(images):
        for t in im.tags:
            j = col.get(t)
            if j is not None:
                Y[i, j] = True
    rows = []
    tot = dict(y1z1=0, y1z0=0, z1=0, z0=0, y1=0)
    for j, t in enumerate(ann.tags):
        c = dict(
            y1z1=int((Y[:, j] & Z[:, j]).sum()),
            y1z0=int((Y[:, j] & ~Z[:, j]).sum()),
            z1=int(Z[:, j].sum()),
            z0=int((~Z[:, j]).sum()),
            y1=int(Y[:, j].sum()),
        )
        for key in tot:
            tot[key] += c[key]
        rows.append({
            "tag": t, **c,
            "p_supply": _ratio(c["y1z1"], c["z1"]),
            "p_spurious": _ratio(c["y1z0"], c["z0"]),
            "observed_true": _ratio(c["y1z1"], c["y1"]),
            "flags": [] if c["z1"] else ["p_supply_undefined"],
        })
    metrics = {
        "n_images": len(images),
        **{f"total_{k}": v for k, v in tot.items()},
        "p_supply": _ratio(tot["y1z1"], tot["z1"]),
        "p_spurious": _ratio(tot["y1z0"], tot["z0"]),
        "observed_true": _ratio(tot["y1z1"], tot["y1"]),
    }
    return EvalReport("analysis", metrics=metrics, per_tag=rows, notes={"analysis": "tag_likelihoods"})


def index_accuracy_curve(tagged, ann, cutoff=20) -> EvalReport:
    """Fraction of annotated-vocabulary tags at each list position that are true.

    Positions are 1-based in the uploader's list; positions ``>= cutoff`` share
    one bucket.
    """
    images, Z = _join(tagged, ann)
    col = {t: j for j, t in enumerate(ann.tags)}
    hits = np.zeros(cutoff + 1, dtype=np.int64)
    counts = np.zeros(cutoff + 1, dtype=np.int64)
    for i, im in enumerate(images):
        for p, t in enumerate(im.tags, 1):
            j = col.get(t)
            if j is None:
                continue
            b = min(p, cutoff)
            counts[b] += 1
            hits[b] += int(Z[i, j])
    rows = []
    for p in range(1, cutoff + 1):
        n = int(counts[p])
        if n == 0:
            continue
        a = hits[p] / n
        rows.append({
            "position": p, "accuracy": float(a), "stderr": float(math.sqrt(a * (1 - a) / n)),
            "n": n, "pooled": p == cutoff,
        })
    return EvalReport("analysis", metrics={"cutoff": cutoff}, curves={"index_accuracy": rows},
                      notes={"analysis": "index_accuracy"})


def compare_pi(bundle: ModelBundle, p_supply: dict) -> EvalReport:
    """Pearson correlation of learned ``pi`` with empirical supply rates over shared tags."""
    shared = [t for t in bundle.vocab if p_supply.get(t) is not None]
    if len(shared) < 3:
        raise ValueError(f"need at least 3 shared tags, got {len(shared)}")
    a = np.array([bundle[t].pi for t in shared])
    b = np.array([float(p_supply[t]) for t in shared])
    if a.std() == 0 or b.std() == 0:
        raise ValueError("correlation undefined: one side is constant")
    r = float(np.corrcoef(a, b)[0, 1])
    table = [{"tag": t, "learned_pi": float(x), "empirical_p_supply": float(y)} for t, x, y in zip(shared, a, b)]
    return EvalReport("analysis", metrics={"r": r, "n_tags": len(shared)}, per_tag=table,
                      notes={"analysis": "compare_pi"})
