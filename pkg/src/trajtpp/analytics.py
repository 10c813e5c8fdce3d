"""Downstream heads, ranking metrics, matching and permutation tests."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

CATCH_ALL = "None"


class AnalyticsError(ValueError):
    pass


# --------------------------------------------------------------------------
# backtest confusion


@dataclass
class ConfusionRow:
    event_type: str
    tp: int
    fp: int
    fn: int

    @property
    def support(self):
        return self.tp + self.fn

    @property
    def precision(self):
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")

    @property
    def recall(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")


def backtest_confusion(predicted, actual, types_of_interest=None):
    """Per-type multiset matching summed over patients.

    Within one patient, a type predicted ``p`` times and present ``a``
    times contributes ``min(p, a)`` true positives.  When
    ``types_of_interest`` is given, every other type is folded into a
    ``"None"`` row.
    """
    if len(predicted) != len(actual):
        raise AnalyticsError(f"{len(predicted)} predicted sets vs {len(actual)} true sets")
    fold = (lambda t: t) if types_of_interest is None else (lambda t: t if t in types_of_interest else CATCH_ALL)
    tp, fp, fn = Counter(), Counter(), Counter()
    for pred, true in zip(predicted, actual):
        pc = Counter(fold(t) for t in pred)
        ac = Counter(fold(t) for t in true)
        for t in pc.keys() | ac.keys():
            m = min(pc[t], ac[t])
            tp[t] += m
            fp[t] += pc[t] - m
            fn[t] += ac[t] - m
    if types_of_interest is None:
        names = sorted(tp.keys() | fp.keys() | fn.keys(), key=str)
    else:
        names = list(types_of_interest) + [CATCH_ALL]
    return [ConfusionRow(t, tp[t], fp[t], fn[t]) for t in names]


def confusion_csv_rows(rows):
    out = [["event_type", "support", "tp", "fp", "fn", "precision", "recall"]]
    for r in rows:
        out.append([r.event_type, r.support, r.tp, r.fp, r.fn, f"{r.precision:.4f}", f"{r.recall:.4f}"])
    return out


def weighted_guess(incidence, n_patients, k=6, seed=0):
    """``k`` i.i.d. categorical draws per patient; returns an (n, k) index array."""
    p = np.asarray(incidence, dtype=np.float64)
    if np.any(p < 0):
        raise AnalyticsError("incidence must be non-negative")
    if not np.isclose(p.sum(), 1.0):
        raise AnalyticsError("incidence must sum to 1")
    rng = np.random.default_rng(seed)
    return rng.choice(len(p), size=(n_patients, k), p=p / p.sum())


# --------------------------------------------------------------------------
# logistic regression


@dataclass
class LogisticFit:
    coef: np.ndarray
    intercept: float
    n_iter: int = 0
    converged: bool = True
    sampled_ids: list = field(default_factory=list)

    def decision(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    def predict_proba(self, X):
        return expit(self.decision(X))


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise AnalyticsError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise AnalyticsError("features must be finite")
    if len(np.unique(y)) < 2:
        raise AnalyticsError("labels contain a single class")
    return X, y.astype(np.float64)


def balanced_weights(y):
    y = np.asarray(y)
    n, pos = len(y), float(np.sum(y == 1))
    neg = n - pos
    return np.where(y == 1, n / (2 * pos), n / (2 * neg))


def downsample_negatives(y, ratio=5, seed=0):
    """Indices keeping every positive and at most ``ratio`` x as many negatives."""
    y = np.asarray(y)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y != 1)
    if len(neg) <= ratio * len(pos):
        return np.arange(len(y))
    rng = np.random.default_rng(seed)
    keep = rng.choice(neg, size=ratio * len(pos), replace=False)
    return np.sort(np.concatenate([pos, keep]))


def _logistic_newton(X, y, sw, C, tol=1e-6, max_iter=1000):
    """Minimize C * sum sw*logloss + 0.5 ||w||^2 (intercept unpenalized)."""
    n, p = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    theta = np.zeros(p + 1)
    reg = np.ones(p + 1)
    reg[-1] = 0.0

    def obj(th):
        z = Xa @ th
        # log(1 + e^z) - y z, computed stably
        return C * np.sum(sw * (np.logaddexp(0.0, z) - y * z)) + 0.5 * np.sum(reg * th * th)

    f = obj(theta)
    for it in range(1, max_iter + 1):
        mu = expit(Xa @ theta)
        g = C * Xa.T @ (sw * (mu - y)) + reg * theta
        if np.linalg.norm(g) < tol:
            return theta, it - 1, True
        H = C * (Xa * (sw * mu * (1 - mu))[:, None]).T @ Xa + np.diag(reg + 1e-12)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        t = 1.0
        while True:
            cand = theta - t * step
            fc = obj(cand)
            if fc <= f - 1e-4 * t * (g @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    return theta, max_iter, False


def fit_logistic(X, y, balanced=True, downsample=True, C=1.0, seed=0, ids=None, sample_weight=None):
    """L2-regularized logistic regression.

    With ``downsample`` the negatives are cut to 5x the positives first
    (kept ids are returned on the fit); with ``balanced`` each class loss is
    scaled by n / (2 n_class).
    """
    X, y = _check_xy(X, y)
    idx = downsample_negatives(y, 5, seed) if downsample else np.arange(len(y))
    Xs, ys = X[idx], y[idx]
    sw = balanced_weights(ys) if balanced else np.ones(len(ys))
    if sample_weight is not None:
        sw = sw * np.asarray(sample_weight, dtype=np.float64)[idx]
    theta, it, ok = _logistic_newton(Xs, ys, sw, C)
    if not ok:
        log.warning("logistic fit stopped at %d iterations", it)
    sampled = [ids[i] for i in idx] if ids is not None and len(idx) < len(y) else []
    return LogisticFit(theta[:-1], float(theta[-1]), it, ok, sampled)


# --------------------------------------------------------------------------
# elastic net


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _enet_fista(X, y, sw, lam, l1_ratio, theta0=None, tol=1e-6, max_iter=2000):
    """Proximal gradient on mean weighted log-loss + elastic-net penalty."""
    n, p = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    sw = sw / sw.sum()
    # Lipschitz bound of the smooth part
    L = 0.25 * np.linalg.norm(Xa * np.sqrt(sw)[:, None], 2) ** 2 + lam * (1 - l1_ratio)
    theta = np.zeros(p + 1) if theta0 is None else theta0.copy()
    z, t = theta.copy(), 1.0
    for _ in range(max_iter):
        mu = expit(Xa @ z)
        g = Xa.T @ (sw * (mu - y))
        g[:-1] += lam * (1 - l1_ratio) * z[:-1]
        new = z - g / L
        new[:-1] = _soft(new[:-1], lam * l1_ratio / L)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = new + ((t - 1) / t_new) * (new - theta)
        if np.max(np.abs(new - theta)) < tol:
            theta = new
            break
        theta, t = new, t_new
    return theta


def _precision_score(y, pred):
    pp = pred.sum()
    return float((pred & (y == 1)).sum() / pp) if pp else 0.0


def stratified_folds(y, k=5, seed=0):
    """Fold id per sample, each class spread round-robin after shuffling."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = np.arange(len(idx)) % k
    return fold


@dataclass
class ElasticNetFit:
    coef: np.ndarray
    intercept: float
    selection_counts: np.ndarray
    lambdas: list
    n_repeats: int


def fit_elasticnet_cv(X, y, l1_ratio=0.75, folds=5, seed=0, groups=None, grid=None, balanced=True):
    """Elastic-net logistic with the penalty picked by CV precision.

    Outer repetitions are the held-out groups when ``groups`` is given
    (at most 6), else ``folds`` stratified folds.  In each repetition the
    penalty is the strongest one whose inner-fold mean precision is within
    one standard error of the best; the
    returned coefficients are averaged over repetitions and
    ``selection_counts[j]`` counts repetitions where feature j is nonzero.
    """
    X, y = _check_xy(X, y)
    grid = np.logspace(-4, 0, 10) if grid is None else np.asarray(grid)
    if groups is not None:
        groups = np.asarray(groups)
        outer = [groups != g for g in np.unique(groups)[:6]]
    else:
        f = stratified_folds(y, folds, seed)
        outer = [f != i for i in range(folds)]
    coefs, lams = [], []
    for r, train_mask in enumerate(outer):
        Xt, yt = X[train_mask], y[train_mask]
        inner = stratified_folds(yt, folds, seed + 1 + r)
        desc = np.sort(grid)[::-1]
        scores = np.zeros((folds, len(desc)))
        for i in range(folds):
            tr, va = inner != i, inner == i
            sw = balanced_weights(yt[tr]) if balanced else np.ones(tr.sum())
            theta = None
            for gi, lam in enumerate(desc):
                # warm start along the decreasing penalty path
                theta = _enet_fista(Xt[tr], yt[tr], sw, lam, l1_ratio, theta)
                pred = (Xt[va] @ theta[:-1] + theta[-1]) >= -1e-8
                scores[i, gi] = _precision_score(yt[va], pred)
        mean = scores.mean(axis=0)
        se = scores.std(axis=0, ddof=1) / np.sqrt(folds) if folds > 1 else np.zeros(len(desc))
        top = int(np.argmax(mean))
        # one-standard-error rule: strongest penalty within 1 SE of the best
        best = float(desc[int(np.flatnonzero(mean >= mean[top] - se[top])[0])])
        sw = balanced_weights(yt) if balanced else np.ones(len(yt))
        theta = _enet_fista(Xt, yt, sw, best, l1_ratio)
        coefs.append(theta)
        lams.append(best)
    coefs = np.array(coefs)
    counts = (np.abs(coefs[:, :-1]) > 0).sum(axis=0)
    mean = coefs.mean(axis=0)
    return ElasticNetFit(mean[:-1], float(mean[-1]), counts, lams, len(outer))


# --------------------------------------------------------------------------
# linear regression


@dataclass
class LinearFit:
    coef: np.ndarray
    intercept: float

    def predict(self, X):
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


def fit_linear(X, y, ridge=1e-6):
    """Least squares with intercept; falls back to a tiny ridge when p >= n."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise AnalyticsError("X must be 2-D with one row per target")
    n, p = X.shape
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    if p >= n:
        coef = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(p), Xc.T @ yc)
    else:
        coef = np.linalg.lstsq(Xc, yc, rcond=None)[0]
    return LinearFit(coef, float(ym - xm @ coef))


def r2_score(y, pred):
    y = np.asarray(y, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(np.sum((y - np.asarray(pred)) ** 2)) / ss_tot


# --------------------------------------------------------------------------
# ranking metrics


def auroc(scores, labels):
    """Mann-Whitney AUROC with half credit for ties."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = y == 1
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise AnalyticsError("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


@dataclass
class GainCurve:
    x: np.ndarray
    y: np.ndarray
    auc: float


def gain_curve(scores, costs, ids=None):
    """Cumulative cost capture ranking patients by descending score."""
    s = np.asarray(scores, dtype=np.float64)
    c = np.asarray(costs, dtype=np.float64)
    if len(s) != len(c) or len(s) == 0:
        raise AnalyticsError("scores and costs must be aligned and non-empty")
    if np.any(c < 0):
        raise AnalyticsError("costs must be non-negative")
    total = c.sum()
    if total <= 0:
        raise AnalyticsError("total cost is zero")
    tiebreak = np.arange(len(s)) if ids is None else np.argsort(np.argsort(np.asarray(ids), kind="stable"), kind="stable")
    order = np.lexsort((tiebreak, -s))
    y = np.concatenate([[0.0], np.cumsum(c[order]) / total])
    x = np.arange(len(s) + 1) / len(s)
    auc = float(np.sum((y[1:] + y[:-1]) / 2) / len(s))
    return GainCurve(x, y, auc)


def paired_permutation(scores_a, scores_b, costs, iters=10_000, seed=0, metric=None):
    """One-sided p for metric(A) - metric(B) under per-patient swapping.

    Returns ``(observed difference, p)`` with add-one smoothing.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    c = np.asarray(costs, dtype=np.float64)
    if not (len(a) == len(b) == len(c)):
        raise AnalyticsError("scores and costs must be aligned")
    if iters < 1:
        raise AnalyticsError("iters must be >= 1")
    if metric is None:
        return _gain_permutation(a, b, c, iters, seed)
    d = metric(a, c) - metric(b, c)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(iters):
        swap = rng.uniform(size=len(a)) < 0.5
        hits += metric(np.where(swap, b, a), c) - metric(np.where(swap, a, b), c) >= d
    return d, (hits + 1) / (iters + 1)


def _gain_permutation(a, b, c, iters, seed, chunk=256):
    """Vectorized gain-AUC permutation test (ties broken by position)."""
    n = len(a)
    total = c.sum()
    if total <= 0:
        raise AnalyticsError("total cost is zero")
    # AUC = sum_k (n - k + 0.5) c_(k) / (n total) for the k-th ranked cost (0-based)
    pos_w = (n - np.arange(n) - 0.5) / (n * total)

    def aucs(S):
        order = np.lexsort((np.broadcast_to(np.arange(n), S.shape), -S), axis=-1)
        return (c[order] * pos_w).sum(axis=-1)

    d = float(aucs(a[None])[0] - aucs(b[None])[0])
    rng = np.random.default_rng(seed)
    hits, done = 0, 0
    while done < iters:
        m = min(chunk, iters - done)
        swap = rng.uniform(size=(m, n)) < 0.5
        A = np.where(swap, b, a)
        B = np.where(swap, a, b)
        # tolerance absorbs float summation-order noise when A and B tie
        hits += int(np.sum(aucs(A) - aucs(B) >= d - 1e-12))
        done += m
    return d, (hits + 1) / (iters + 1)


# --------------------------------------------------------------------------
# propensity matching


def smd(x_t, x_c):
    """|mean_t - mean_c| / sqrt((var_t + var_c) / 2); zero when both variances vanish."""
    x_t, x_c = np.asarray(x_t, dtype=np.float64), np.asarray(x_c, dtype=np.float64)
    diff = abs(x_t.mean() - x_c.mean())
    pooled = np.sqrt((x_t.var(ddof=1) + x_c.var(ddof=1)) / 2) if min(len(x_t), len(x_c)) > 1 else 0.0
    if pooled == 0:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / pooled)


@dataclass
class MatchResult:
    pairs: list
    propensity: np.ndarray
    smd_before: dict
    smd_after: dict

    @property
    def flagged(self):
        return [k for k, v in self.smd_after.items() if not v < 0.1]


def propensity_match(X, treated, names=None, seed=0):
    """Greedy 1:1 nearest-neighbour matching on a logistic propensity.

    Treated patients are processed in descending propensity; each takes
    the closest unused control (ties to the lower index).  When controls
    run out the remaining treated stay unmatched.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(treated).astype(int)
    if t.sum() == 0 or t.sum() == len(t):
        raise AnalyticsError("matching needs treated and untreated patients")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    mu, sd = X.mean(axis=0), X.std(axis=0)
    Z = (X - mu) / np.where(sd > 0, sd, 1.0)
    fit = fit_logistic(Z, t, balanced=False, downsample=False, seed=seed)
    ps = fit.predict_proba(Z)
    ti = np.flatnonzero(t == 1)
    ci = np.flatnonzero(t == 0)
    if len(ci) < len(ti):
        log.warning("control pool (%d) smaller than treated (%d); matching partially", len(ci), len(ti))
    order = ti[np.argsort(-ps[ti], kind="stable")]
    # sorted controls and a "next unused" structure via linked lists
    cs = ci[np.argsort(ps[ci], kind="stable")]
    cps = ps[cs]
    left = np.arange(len(cs)) - 1
    right = np.arange(len(cs)) + 1
    alive = np.ones(len(cs), dtype=bool)
    pairs = []

    def nearest_alive(j, step):
        while 0 <= j < len(cs) and not alive[j]:
            j = left[j] if step < 0 else right[j]
        return j if 0 <= j < len(cs) else -1

    for i in order:
        if not alive.any():
            break
        j = int(np.searchsorted(cps, ps[i]))
        lo = nearest_alive(j - 1, -1)
        hi = nearest_alive(j, +1)
        cands = [k for k in (lo, hi) if k >= 0]
        k = min(cands, key=lambda k: (abs(cps[k] - ps[i]), cs[k]))
        pairs.append((int(i), int(cs[k])))
        alive[k] = False
        # splice k out of the linked list
        if left[k] >= 0:
            right[left[k]] = right[k]
        if right[k] < len(cs):
            left[right[k]] = left[k]
    mt = np.array([p[0] for p in pairs], dtype=np.int64)
    mc = np.array([p[1] for p in pairs], dtype=np.int64)
    before = {n: smd(X[ti, j], X[ci, j]) for j, n in enumerate(names)}
    after = {n: smd(X[mt, j], X[mc, j]) for j, n in enumerate(names)}
    return MatchResult(pairs, ps, before, after)


# --------------------------------------------------------------------------
# six-cohort hold-out


def holdout_by_group(X, y, groups, kind="logistic", seed=0):
    """Train on all groups but one, score the held-out group, for each group.

    Returns per-group metric values (AUROC for ``logistic``, R^2 for
    ``linear``) keyed by group label and their mean.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    groups = np.asarray(groups)
    per = {}
    for g in np.unique(groups):
        tr, te = groups != g, groups == g
        if kind == "logistic":
            fit = fit_logistic(X[tr], y[tr], seed=seed)
            yt = y[te]
            per[int(g)] = auroc(fit.decision(X[te]), yt) if len(np.unique(yt)) == 2 else float("nan")
        elif kind == "linear":
            fit = fit_linear(X[tr], y[tr])
            per[int(g)] = r2_score(y[te], fit.predict(X[te]))
        else:
            raise AnalyticsError(f"unknown model kind {kind!r}")
    vals = [v for v in per.values() if np.isfinite(v)]
    return per, float(np.mean(vals)) if vals else float("nan")
