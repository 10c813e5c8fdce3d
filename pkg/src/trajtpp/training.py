"""Likelihood, training loop, thinning sampler, rollout and sequence metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DataError
from .model import collate, head_context, head_from_context

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    max_epochs: int = 100
    mc_samples: int = 10
    oversample: float = 5.0
    max_mc: int = 50
    rollout_steps: int = 6
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs < 0 or self.mc_samples <= 0 or self.patience <= 0:
            raise ValueError("training sizes must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 1 <= self.mc_samples <= 50:
            raise ValueError("mc_samples must lie in [1, 50]")
        if self.oversample <= 1:
            raise ValueError("oversample factor must exceed 1")


# --------------------------------------------------------------------------
# likelihood


def stratified_uniforms(n_intervals, mc_n, seed):
    """One uniform draw per equal sub-interval: ((m + U_m) / mc_n), shape (n, mc_n)."""
    u = np.random.default_rng(seed).uniform(size=(n_intervals, mc_n))
    return (np.arange(mc_n)[None, :] + u) / mc_n


def batch_nll(model, batch, mc_n, seeds):
    """Summed NLL over the batch, plus the number of scored events.

    Event i (i >= 1) is scored from the fused state at i-1: its
    log-intensity enters negatively and the compensator over
    (t_{i-1}, t_i] is estimated by stratified Monte Carlo.
    """
    if not 1 <= mc_n <= 50:
        raise ValueError("mc_n must lie in [1, 50]")
    cfg = model.cfg
    B, L = batch.types.shape
    fused = model.encode(batch)
    ctx = head_context(ad.take(fused, (slice(None), slice(0, L - 1))), model.params)
    dt = batch.times[:, 1:] - batch.times[:, :-1]
    valid = batch.mask[:, 1:]
    lam = head_from_context(ctx, dt, model.params, cfg)
    cols = np.where(valid, batch.types[:, 1:] - cfg.first_indicative, 0)
    if np.any(cols < 0) | np.any(cols >= cfg.n_event_types):
        raise DataError("target event is not an indicative type")
    bi, li = np.meshgrid(np.arange(B), np.arange(L - 1), indexing="ij")
    picked = ad.take(lam, (bi, li, cols))
    vmask = Tensor(valid.astype(np.float64))
    log_term = ad.sum(ad.mul(ad.log(picked), vmask))

    u = np.stack([stratified_uniforms(L - 1, mc_n, s) for s in seeds])
    dt_s = u * dt[:, :, None]
    ctx_s = ad.expand(ad.reshape(ctx, (B, L - 1, 1, cfg.d_model)), (B, L - 1, mc_n, cfg.d_model))
    lam_s = head_from_context(ctx_s, dt_s, model.params, cfg)
    total = ad.mean(ad.sum(lam_s, axis=-1), axis=-1)
    weight = Tensor(np.where(valid, dt, 0.0))
    survival = ad.sum(ad.mul(total, weight))
    loss = ad.add(ad.scale(log_term, -1.0), survival)
    return loss, int(valid.sum())


def sequence_nll(model, seq, mc_n=10, seed=0):
    """NLL of one sequence (events 2..n given the first)."""
    if seq.length == 0:
        raise DataError("empty sequence")
    loss, _ = batch_nll(model, collate([seq], model.cfg.max_len), mc_n, [seed])
    return loss


def evaluate_nll(model, seqs, mc_n=10, seed=0, batch_size=256):
    """Total NLL and scored-event count with deterministic per-sequence MC seeds."""
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            seeds = [[seed, 0xE7A1, start + i] for i in range(len(chunk))]
            loss, n = batch_nll(model, collate(chunk, model.cfg.max_len), mc_n, seeds)
            total += float(loss.item())
            count += n
    return total, count


# --------------------------------------------------------------------------
# thinning and rollout


@dataclass
class ThinningStats:
    proposals: int = 0
    violations: int = 0
    exhausted: int = 0


def _probe_offsets(gaps):
    med = float(np.median(gaps)) if len(gaps) else 1.0
    span = 4.0 * (med if med > 0 else 1.0)
    return np.linspace(0.0, span, 10)


def thinning_batch(intensity_fn, recent_gaps, rng, oversample=5.0, max_mc=50, stats=None):
    """Sample the next event for each of B contexts.

    ``intensity_fn(dt)`` maps offsets of shape (B, n) to intensities of
    shape (B, n, K).  The bound is ``oversample`` times the largest total
    intensity on a 10-point probe grid spanning four recent median gaps.
    Candidate offsets are cumulative Exp(bound) draws; the first accepted
    candidate wins and its type is drawn proportionally to the per-type
    intensities.  If all ``max_mc`` candidates are rejected the last one
    is returned with ``exhausted`` set.
    """
    B = len(recent_gaps)
    probes = np.stack([_probe_offsets(g) for g in recent_gaps])
    lam_probe = intensity_fn(probes).sum(axis=-1)
    bound = oversample * lam_probe.max(axis=1)
    if not np.all(np.isfinite(bound)) or np.any(bound <= 0):
        raise TrainingError("thinning bound is not finite and positive")
    steps = rng.exponential(size=(B, max_mc)) / bound[:, None]
    cand = np.cumsum(steps, axis=1)
    lam = intensity_fn(cand)
    total = lam.sum(axis=-1)
    ratio = total / bound[:, None]
    accept = rng.uniform(size=(B, max_mc)) <= ratio
    first = np.where(accept.any(axis=1), accept.argmax(axis=1), max_mc - 1)
    exhausted = ~accept.any(axis=1)
    dt = cand[np.arange(B), first]
    lam_sel = lam[np.arange(B), first]
    cum = np.cumsum(lam_sel, axis=1)
    draw = rng.uniform(size=B) * cum[:, -1]
    types = np.minimum((cum < draw[:, None]).sum(axis=1), lam.shape[-1] - 1)
    if stats is not None:
        used = np.where(exhausted, max_mc, first + 1)
        seen = np.arange(max_mc)[None, :] < used[:, None]
        stats.proposals += int(seen.sum())
        stats.violations += int((seen & (ratio > 1.0)).sum())
        stats.exhausted += int(exhausted.sum())
    return dt, types, exhausted, lam_sel


def _last_states(model, seqs):
    batch = collate(seqs, model.cfg.max_len)
    fused = model.encode(batch)
    idx = batch.lengths - 1
    last = fused.data[np.arange(len(seqs)), idx]
    return last, batch


def _gaps(seq, window=8):
    t = seq.times[: seq.length]
    return np.diff(t)[-window:]


def thinning_next(model, history, oversample=5.0, max_mc=50, seed=0, stats=None, n=None):
    """Draw the next event after the last event of ``history``.

    Returns ``(dt, type column, exhausted)``.  With ``n`` given, ``n``
    independent draws from the same history are made in one vectorized
    pass and arrays are returned instead of scalars.
    """
    if history.length == 0:
        raise DataError("history must be non-empty")
    if oversample <= 1:
        raise ValueError("oversample must exceed 1")
    rng = np.random.default_rng(seed)
    reps = 1 if n is None else int(n)
    with ad.no_grad():
        last, _ = _last_states(model, [history])
        ctx = head_context(Tensor(last), model.params).data[0]

        def fn(dt):
            c = np.broadcast_to(ctx, dt.shape + ctx.shape)
            return head_from_context(Tensor(c), dt, model.params, model.cfg).data.astype(np.float64)

        gaps = _gaps(history)
        dt, types, exhausted, _ = thinning_batch(fn, [gaps] * reps, rng, oversample, max_mc, stats)
    if n is None:
        return float(dt[0]), int(types[0]), bool(exhausted[0])
    return dt, types, exhausted


@dataclass
class Rollout:
    patient_id: str
    times: list
    types: list
    exhausted: list
    grid: np.ndarray  # (n_types incl. static, k)


def _append(seq, type_index, t):
    from .data import PatientSequence

    n = seq.length
    types = np.concatenate([seq.types[:n], [type_index]])
    times = np.concatenate([seq.times[:n], [t]])
    out = PatientSequence.from_events(
        seq.patient_id,
        types,
        times,
        seq.max_len,
        seq.static,
        (seq.num_types, seq.num_times, seq.num_values, seq.num_bucket),
    )
    out.static_levels = seq.static_levels
    return out


def left_trim(seq, keep):
    """Keep only the most recent ``keep`` events so a rollout fits in max_len."""
    from .data import PatientSequence

    n = seq.length
    if n <= keep:
        return seq
    lo = n - keep
    t0 = seq.times[lo]
    sel = seq.num_times >= t0
    out = PatientSequence.from_events(
        seq.patient_id,
        seq.types[lo:n],
        seq.times[lo:n],
        seq.max_len,
        seq.static,
        (seq.num_types[sel], seq.num_times[sel], seq.num_values[sel], seq.num_bucket[sel]),
    )
    out.static_levels = seq.static_levels
    return out


def rollout_batch(model, histories, k=6, seed=0, oversample=5.0, max_mc=50, stats=None):
    """Autoregressive k-step rollouts for many histories at once.

    Each step samples the next event by thinning, records the normalized
    per-type intensity at the sampled time as one grid column, and appends
    the event to that patient's context.  Static rows of the grid are zero
    because static types are never emitted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = model.cfg
    hist = [left_trim(h, cfg.max_len - k) for h in histories]
    for h in hist:
        if h.length == 0:
            raise DataError(f"history {h.patient_id!r} is empty")
    B = len(hist)
    n_rows = cfg.first_indicative - 1 + cfg.n_event_types
    grids = np.zeros((B, n_rows, k))
    out_t = np.zeros((B, k))
    out_k = np.zeros((B, k), dtype=np.int64)
    out_x = np.zeros((B, k), dtype=bool)
    with ad.no_grad():
        for step in range(k):
            rng = np.random.default_rng([seed, step])
            last, _ = _last_states(model, hist)
            ctx = head_context(Tensor(last), model.params).data

            def fn(dt, ctx=ctx):
                c = np.broadcast_to(ctx[:, None, :], dt.shape + (ctx.shape[-1],))
                return head_from_context(Tensor(c), dt, model.params, cfg).data.astype(np.float64)

            dt, cols, exhausted, lam = thinning_batch(fn, [_gaps(h) for h in hist], rng, oversample, max_mc, stats)
            grids[:, cfg.first_indicative - 1 :, step] = lam / lam.sum(axis=1, keepdims=True)
            for b, h in enumerate(hist):
                t_new = h.times[h.length - 1] + dt[b]
                hist[b] = _append(h, cfg.first_indicative + int(cols[b]), t_new)
                out_t[b, step] = t_new
            out_k[:, step] = cfg.first_indicative + cols
            out_x[:, step] = exhausted
    return [
        Rollout(h.patient_id, out_t[b].tolist(), out_k[b].tolist(), out_x[b].tolist(), grids[b])
        for b, h in enumerate(histories)
    ]


def rollout(model, history, k=6, seed=0, oversample=5.0, max_mc=50):
    return rollout_batch(model, [history], k, seed, oversample, max_mc)[0]


# --------------------------------------------------------------------------
# sequence metrics


@dataclass
class EvalReport:
    nll: float
    rmse: float
    accuracy: float
    diff_ratio: float


def lcs_length(a, b):
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def diff_ratio(a, b):
    """2 * LCS / (len a + len b); 1 for two empty sequences."""
    if not a and not b:
        return 1.0
    return 2.0 * lcs_length(a, b) / (len(a) + len(b))


def eval_metrics(pred_types, pred_gaps, true_types, true_gaps, nll=float("nan")):
    """Backtest scores for one predicted vs held-out window of equal length."""
    if len(pred_types) != len(true_types) or len(pred_gaps) != len(true_gaps) or len(pred_types) != len(pred_gaps):
        raise ValueError("predicted and true windows must have the same length")
    pg, tg = np.asarray(pred_gaps, dtype=np.float64), np.asarray(true_gaps, dtype=np.float64)
    rmse = float(np.sqrt(np.mean((pg - tg) ** 2))) if len(pg) else 0.0
    acc = float(np.mean([p == t for p, t in zip(pred_types, true_types)])) if len(pred_types) else 1.0
    return EvalReport(nll, rmse, acc, diff_ratio(list(pred_types), list(true_types)))


def backtest(model, seqs, k=6, seed=0, oversample=5.0, max_mc=50, batch_size=256):
    """Hold out the last ``k`` events of each sequence and roll out from the rest.

    Returns (rollouts, held-out type lists, held-out gaps, EvalReport averaged
    over sequences).
    """
    keep = [s for s in seqs if s.length > k]
    rolls, truths, gaps = [], [], []
    for start in range(0, len(keep), batch_size):
        chunk = keep[start : start + batch_size]
        hist = [s.truncated(s.length - k) for s in chunk]
        rolls += rollout_batch(model, hist, k, [seed, start], oversample, max_mc)
        for s in chunk:
            n = s.length
            truths.append(s.types[n - k : n].tolist())
            gaps.append(np.diff(s.times[n - k - 1 : n]).tolist())
    reports = []
    for r, tt, tg, s in zip(rolls, truths, gaps, keep):
        t_last = s.times[s.length - k - 1]
        pg = np.diff(np.concatenate([[t_last], r.times])).tolist()
        reports.append(eval_metrics(r.types, pg, tt, tg))
    if reports:
        agg = EvalReport(
            float("nan"),
            float(np.sqrt(np.mean([r.rmse**2 for r in reports]))),
            float(np.mean([r.accuracy for r in reports])),
            float(np.mean([r.diff_ratio for r in reports])),
        )
    else:
        agg = EvalReport(float("nan"), float("nan"), float("nan"), float("nan"))
    return rolls, truths, gaps, agg


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    best_epoch: int = -1

    def log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_nll", "val_nll", "rmse", "accuracy", "diff_ratio"])
        for row in self.log:
            w.writerow([row["epoch"], *(repr(float(row[c])) for c in ("train_nll", "val_nll", "rmse", "accuracy", "diff_ratio"))])
        return buf.getvalue()


def train(model, train_seqs, val_seqs, cfg, eval_backtest=True, on_epoch=None):
    """Adam over shuffled batches; keeps the parameters with the lowest val NLL.

    NLLs in the log are per scored event.  Epoch 0 records the untrained
    model.  Training stops after ``patience`` epochs without improvement.
    """
    if not train_seqs or not val_seqs:
        raise TrainingError("train and validation splits must be non-empty")
    state = ad.AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 0x7A])
    result = TrainResult(model.copy())

    def validate(epoch, train_nll):
        tot, n = evaluate_nll(model, val_seqs, cfg.mc_samples, cfg.seed, cfg.batch_size)
        val = tot / max(n, 1)
        if eval_backtest:
            _, _, _, rep = backtest(model, val_seqs, cfg.rollout_steps, [cfg.seed, epoch], cfg.oversample, cfg.max_mc)
        else:
            rep = EvalReport(val, float("nan"), float("nan"), float("nan"))
        row = {
            "epoch": epoch,
            "train_nll": train_nll,
            "val_nll": val,
            "rmse": rep.rmse,
            "accuracy": rep.accuracy,
            "diff_ratio": rep.diff_ratio,
        }
        result.log.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d train %.4f val %.4f", epoch, train_nll, val)
        return val

    try:
        tot, n = evaluate_nll(model, train_seqs, cfg.mc_samples, cfg.seed, cfg.batch_size)
        best = validate(0, tot / max(n, 1))
    except FloatingPointError as exc:
        raise TrainingError(f"non-finite loss at epoch 0 (initial evaluation): {exc}") from None
    result.best_epoch = 0
    stale = 0
    names = sorted(model.params)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_seqs))
        ep_loss, ep_n = 0.0, 0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            chunk = [train_seqs[i] for i in idx]
            seeds = [[cfg.seed, epoch, bi, int(i)] for i in idx]
            model.zero_grad()
            try:
                loss, n_ev = batch_nll(model, collate(chunk, model.cfg.max_len), cfg.mc_samples, seeds)
                if not math.isfinite(loss.item()):
                    raise FloatingPointError("loss is not finite")
                ad.backward(ad.scale(loss, 1.0 / max(n_ev, 1)))
            except FloatingPointError as exc:
                raise TrainingError(f"divergence at epoch {epoch}, batch {bi}: {exc}") from None
            ad.adam_step({k: model.params[k] for k in names}, {k: model.params[k].grad for k in names}, state)
            ep_loss += float(loss.item())
            ep_n += n_ev
        val = validate(epoch, ep_loss / max(ep_n, 1))
        if val < best:
            best, stale = val, 0
            result.model = model.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return result


def nll_grad_check(model, seq, mc_n=10, seed=0, eps=1e-3):
    """grad_check of sequence_nll with respect to every model parameter at once."""
    from .model import TPPModel

    names = sorted(model.params)
    shapes = [model.params[k].shape for k in names]
    x0 = np.concatenate([model.params[k].data.ravel().astype(np.float64) for k in names])

    def f(x):
        params, off = {}, 0
        for name, shape in zip(names, shapes):
            n = int(np.prod(shape))
            params[name] = ad.reshape(ad.take(x, slice(off, off + n)), shape)
            off += n
        return sequence_nll(TPPModel(model.cfg, params, model.concept_table), seq, mc_n, seed)

    return ad.grad_check(f, x0, eps)
