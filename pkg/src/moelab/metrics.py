"""Evaluation metrics: NLL, error, calibration, diversity, OOD, few-shot.

Accumulation is order-independent by construction: every per-example value
goes into a list and totals are taken with math.fsum, which returns the
correctly rounded sum of the multiset regardless of arrival order.  Two
accumulators merge by concatenation, so sharded evaluation reproduces the
sequential result exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

PROB_FLOOR = 1e-12


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def nll_error(ensemble_probs, labels) -> tuple:
    """Mean -log p(y) and 100 * (1 - top-1 accuracy).

    argmax breaks ties toward the lowest class index.
    """
    p = _as_array(ensemble_probs)
    y = np.asarray(labels)
    picked = np.clip(p[np.arange(len(y)), y], PROB_FLOOR, None)
    nll = float(math.fsum(-np.log(picked)) / len(y))
    err = 100.0 * float(np.mean(np.argmax(p, axis=1) != y))
    return nll, err


def ece(ensemble_probs, labels, bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    p = _as_array(ensemble_probs)
    y = np.asarray(labels)
    conf = p.max(axis=1)
    correct = (np.argmax(p, axis=1) == y).astype(np.float64)
    idx = np.minimum((conf * bins).astype(int), bins - 1)
    n = len(y)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        nb = int(sel.sum())
        if nb == 0:
            continue
        acc = math.fsum(correct[sel]) / nb
        avg_conf = math.fsum(conf[sel]) / nb
        total += (nb / n) * abs(acc - avg_conf)
    return float(total)


def _pairwise_kl(mp: np.ndarray) -> np.ndarray:
    """Per-example mean over ordered member pairs of KL(p_m || p_m')."""
    m = mp.shape[0]
    q = np.clip(mp, PROB_FLOOR, None)
    logq = np.log(q)
    out = np.zeros(mp.shape[1], dtype=np.float64)
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            out += np.sum(q[a] * (logq[a] - logq[b]), axis=-1)
    return out / (m * (m - 1))


def kl_diversity(member_probs) -> float:
    """Mean over inputs and ordered pairs m != m' of KL(p_m || p_m')."""
    mp = _as_array(member_probs)
    if mp.shape[0] < 2:
        raise ConfigError("kl_diversity needs at least 2 members")
    vals = _pairwise_kl(mp)
    return float(math.fsum(vals) / len(vals))


def _pairwise_cos_dis(mp: np.ndarray):
    m = mp.shape[0]
    norms = np.linalg.norm(mp, axis=-1)
    preds = np.argmax(mp, axis=-1)
    cos = np.zeros(mp.shape[1], dtype=np.float64)
    dis = np.zeros(mp.shape[1], dtype=np.float64)
    pairs = 0
    for a in range(m):
        for b in range(a + 1, m):
            denom = np.maximum(norms[a] * norms[b], PROB_FLOOR)
            cos += np.sum(mp[a] * mp[b], axis=-1) / denom
            dis += (preds[a] != preds[b]).astype(np.float64)
            pairs += 1
    return cos / pairs, dis / pairs


def pair_diversity(member_probs, labels) -> tuple:
    """(mean pairwise cosine similarity, normalized disagreement).

    Disagreement is the pair-averaged probability that two members pick
    different classes, normalized by the mean member error rate.  When both
    are zero (identical, perfect members) the ratio is defined as 0.
    """
    mp = _as_array(member_probs)
    if mp.shape[0] < 2:
        raise ConfigError("pair_diversity needs at least 2 members")
    y = np.asarray(labels)
    cos, dis = _pairwise_cos_dis(mp)
    preds = np.argmax(mp, axis=-1)
    member_err = (preds != y[None, :]).astype(np.float64).mean(axis=0)
    mean_dis = math.fsum(dis) / len(dis)
    mean_err = math.fsum(member_err) / len(member_err)
    if mean_dis == 0.0 and mean_err == 0.0:
        norm_dis = 0.0
    else:
        norm_dis = mean_dis / mean_err if mean_err > 0 else float("inf")
    cosine = math.fsum(cos) / len(cos)
    return float(cosine), float(norm_dis)


def ood_scores(ensemble_probs) -> np.ndarray:
    """OOD-ness score per example: 1 - max ensemble probability."""
    p = _as_array(ensemble_probs)
    return 1.0 - p.max(axis=1)


def _auc_roc(in_scores, out_scores) -> float:
    """Mann-Whitney statistic: P(out > in) with ties counted half."""
    both = np.concatenate([in_scores, out_scores])
    order = np.argsort(both, kind="stable")
    ranks = np.empty(len(both), dtype=np.float64)
    sorted_vals = both[order]
    i = 0
    while i < len(both):
        j = i
        while j + 1 < len(both) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    n_in, n_out = len(in_scores), len(out_scores)
    u = ranks[n_in:].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


def _auc_pr(in_scores, out_scores) -> float:
    """Average precision with OOD as the positive class."""
    scores = np.concatenate([in_scores, out_scores])
    positive = np.concatenate([np.zeros(len(in_scores)),
                               np.ones(len(out_scores))])
    order = np.argsort(-scores, kind="stable")
    scores, positive = scores[order], positive[order]
    n_pos = positive.sum()
    ap = 0.0
    tp = fp = 0.0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and scores[j + 1] == scores[i]:
            j += 1
        tp += positive[i:j + 1].sum()
        fp += (j - i + 1) - positive[i:j + 1].sum()
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def _fpr_at_tpr(in_scores, out_scores, tpr: float = 0.95) -> float:
    """FPR at the smallest threshold reaching the requested TPR."""
    need = math.ceil(tpr * len(out_scores))
    thresh = np.sort(out_scores)[::-1][need - 1]
    return float(np.mean(in_scores >= thresh))


def _fpr_at_precision(in_scores, out_scores, precision: float = 0.95) -> float:
    """FPR at the most inclusive threshold keeping precision >= target.

    Returns 1.0 when no threshold reaches the target precision.
    """
    scores = np.concatenate([in_scores, out_scores])
    positive = np.concatenate([np.zeros(len(in_scores)),
                               np.ones(len(out_scores))])
    order = np.argsort(-scores, kind="stable")
    scores, positive = scores[order], positive[order]
    best = None
    tp = fp = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and scores[j + 1] == scores[i]:
            j += 1
        tp += positive[i:j + 1].sum()
        fp += (j - i + 1) - positive[i:j + 1].sum()
        if tp / (tp + fp) >= precision:
            best = fp / len(in_scores)
        i = j + 1
    return 1.0 if best is None else float(best)


def ood_metrics(in_scores, out_scores, *, at_precision: bool = False) -> dict:
    """{auc_roc, auc_pr, fpr95} for OOD-ness scores (higher = more OOD).

    fpr95 is the false-positive rate at 95% true-positive rate; pass
    at_precision=True for the rate at 95% precision instead.
    """
    ins = np.asarray(in_scores, dtype=np.float64)
    outs = np.asarray(out_scores, dtype=np.float64)
    if len(ins) == 0 or len(outs) == 0:
        raise ConfigError("need both in- and out-of-distribution scores")
    if at_precision:
        fpr = _fpr_at_precision(ins, outs)
    else:
        fpr = _fpr_at_tpr(ins, outs)
    return {"auc_roc": _auc_roc(ins, outs),
            "auc_pr": _auc_pr(ins, outs),
            "fpr95": fpr}


def fewshot_probe(features, labels, shots: int, mode: str = "joint",
                  ridge_lambda: float | None = None) -> float:
    """Ridge-regression linear probe on frozen features; returns error %.

    features is (M, N, S).  The first `shots` examples of each class (in
    input order) train the probe; the rest are evaluated.  joint stacks the
    M member features into one M*S-wide input; disjoint fits one probe per
    member and averages the predicted scores.  ridge_lambda defaults to
    1e-3 times the design-matrix width.  A constant bias column is appended
    and regularized with the rest.
    """
    if mode not in ("joint", "disjoint"):
        raise ConfigError(f"unknown probe mode {mode!r}")
    feats = _as_array(features)
    if feats.ndim != 3:
        raise ConfigError("features must be (members, examples, dim)")
    y = np.asarray(labels)
    m, n, s = feats.shape
    classes = int(y.max()) + 1
    train_idx = []
    for c in range(classes):
        idx = np.flatnonzero(y == c)[:shots]
        if len(idx) < shots:
            raise ConfigError(f"class {c} has fewer than {shots} examples")
        train_idx.append(idx)
    train_idx = np.sort(np.concatenate(train_idx))
    eval_mask = np.ones(n, dtype=bool)
    eval_mask[train_idx] = False
    if not eval_mask.any():
        raise ConfigError("no held-out examples left to evaluate")
    onehot = np.eye(classes)[y[train_idx]]

    def fit_predict(x_train, x_eval):
        x_train = np.concatenate([x_train, np.ones((len(x_train), 1))], 1)
        x_eval = np.concatenate([x_eval, np.ones((len(x_eval), 1))], 1)
        lam = ridge_lambda if ridge_lambda is not None \
            else 1e-3 * (x_train.shape[1] - 1)
        gram = x_train.T @ x_train + lam * np.eye(x_train.shape[1])
        w = np.linalg.solve(gram, x_train.T @ onehot)
        return x_eval @ w

    if mode == "joint":
        stacked = feats.transpose(1, 0, 2).reshape(n, m * s)
        scores = fit_predict(stacked[train_idx], stacked[eval_mask])
    else:
        scores = None
        for mm in range(m):
            part = fit_predict(feats[mm][train_idx], feats[mm][eval_mask])
            scores = part if scores is None else scores + part
        scores = scores / m
    pred = np.argmax(scores, axis=1)
    return 100.0 * float(np.mean(pred != y[eval_mask]))


class MetricAccumulator:
    """Order-independent accumulator for the core prediction metrics.

    Per-example terms are kept in lists; result() reduces them with fsum.
    merge() concatenates, so any sharding of the eval set gives bit-equal
    totals.
    """

    def __init__(self, bins: int = 15):
        self.bins = bins
        self.n_members = None
        self._nll = []
        self._member_nll = []
        self._correct = []
        self._conf = []
        self._bin = []
        self._kl = []
        self._cos = []
        self._dis = []
        self._member_err = []

    def add_batch(self, member_probs, labels) -> None:
        mp = _as_array(member_probs)
        y = np.asarray(labels)
        m = mp.shape[0]
        if self.n_members is None:
            self.n_members = m
        elif self.n_members != m:
            raise ConfigError("member count changed between batches")
        ens = mp.mean(axis=0)
        picked = np.clip(ens[np.arange(len(y)), y], PROB_FLOOR, None)
        self._nll.extend((-np.log(picked)).tolist())
        mem_picked = np.clip(mp[:, np.arange(len(y)), y], PROB_FLOOR, None)
        self._member_nll.extend((-np.log(mem_picked)).mean(axis=0).tolist())
        conf = ens.max(axis=1)
        self._correct.extend((np.argmax(ens, 1) == y).astype(float).tolist())
        self._conf.extend(conf.tolist())
        self._bin.extend(np.minimum((conf * self.bins).astype(int),
                                    self.bins - 1).tolist())
        if m >= 2:
            self._kl.extend(_pairwise_kl(mp).tolist())
            cos, dis = _pairwise_cos_dis(mp)
            self._cos.extend(cos.tolist())
            self._dis.extend(dis.tolist())
            preds = np.argmax(mp, axis=-1)
            merr = (preds != y[None, :]).astype(float).mean(axis=0)
            self._member_err.extend(merr.tolist())

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if self.bins != other.bins:
            raise ConfigError("bin counts differ")
        if (self.n_members is not None and other.n_members is not None
                and self.n_members != other.n_members):
            raise ConfigError("member counts differ")
        out = MetricAccumulator(self.bins)
        out.n_members = self.n_members or other.n_members
        for name in ("_nll", "_member_nll", "_correct", "_conf", "_bin",
                     "_kl", "_cos", "_dis", "_member_err"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    @property
    def count(self) -> int:
        return len(self._nll)

    def result(self) -> dict:
        n = self.count
        if n == 0:
            raise ConfigError("no examples accumulated")
        nll = math.fsum(self._nll) / n
        err = 100.0 * (1.0 - math.fsum(self._correct) / n)
        bins = np.asarray(self._bin)
        conf = np.asarray(self._conf)
        correct = np.asarray(self._correct)
        total = 0.0
        for b in range(self.bins):
            sel = bins == b
            nb = int(sel.sum())
            if nb == 0:
                continue
            acc = math.fsum(correct[sel]) / nb
            avg = math.fsum(conf[sel]) / nb
            total += (nb / n) * abs(acc - avg)
        out = {"nll": nll, "error_pct": err, "ece": float(total),
               "member_nll": math.fsum(self._member_nll) / n,
               "kl_diversity": None, "cosine_similarity": None,
               "normalized_disagreement": None}
        if self._kl:
            out["kl_diversity"] = math.fsum(self._kl) / n
            out["cosine_similarity"] = math.fsum(self._cos) / n
            mean_dis = math.fsum(self._dis) / n
            mean_err = math.fsum(self._member_err) / n
            if mean_dis == 0.0 and mean_err == 0.0:
                out["normalized_disagreement"] = 0.0
            elif mean_err == 0.0:
                out["normalized_disagreement"] = float("inf")
            else:
                out["normalized_disagreement"] = mean_dis / mean_err
        return out


@dataclass
class EvalReport:
    """One evaluation's metrics; None marks metrics that do not apply."""

    nll: float
    error_pct: float
    ece: float
    kl_diversity: float | None = None
    cosine_similarity: float | None = None
    normalized_disagreement: float | None = None
    flops_train_giga: float | None = None
    ood: dict = field(default_factory=dict)
    fewshot: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"nll": self.nll, "error_pct": self.error_pct,
                "ece": self.ece, "kl_diversity": self.kl_diversity,
                "cosine_similarity": self.cosine_similarity,
                "normalized_disagreement": self.normalized_disagreement,
                "flops_train_giga": self.flops_train_giga,
                "ood": self.ood,
                "fewshot": {str(k): v for k, v in self.fewshot.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["fewshot"] = {int(k): v for k, v in d.get("fewshot", {}).items()}
        return cls(**d)

    SCALAR_FIELDS = ("nll", "error_pct", "ece", "kl_diversity",
                     "cosine_similarity", "normalized_disagreement",
                     "flops_train_giga")

    def csv_values(self) -> list:
        def fmt(v):
            return "" if v is None else f"{v:.10g}"
        return [fmt(getattr(self, f)) for f in self.SCALAR_FIELDS]
