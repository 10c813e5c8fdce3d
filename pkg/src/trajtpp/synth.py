"""Synthetic trajectories from exponential-kernel Hawkes processes.

Ground-truth intensities are known in closed form, which makes the
generator double as an oracle for the neural model and the analytics.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FactRow, write_events_csv


class SpecError(ValueError):
    pass


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class HawkesSpec:
    """Multivariate Hawkes process; ``alpha[k, j]`` is the jump type j adds to type k."""

    mu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    horizon: float = 100.0

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        k = len(self.mu)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(k, k)
        self.beta = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), (k, k)).copy()

    @property
    def n_types(self):
        return len(self.mu)

    def branching_matrix(self):
        return self.alpha / self.beta

    def validate(self):
        if np.any(self.mu < 0) or np.any(self.alpha < 0) or np.any(self.beta <= 0):
            raise SpecError("need mu >= 0, alpha >= 0, beta > 0")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.alpha).all() and np.isfinite(self.beta).all()):
            raise SpecError("rates must be finite")
        rho = max(abs(np.linalg.eigvals(self.branching_matrix())))
        if rho >= 1:
            raise SpecError(f"non-stationary: spectral radius {rho:.3f} >= 1")
        return self

    def stationary_rates(self):
        return np.linalg.solve(np.eye(self.n_types) - self.branching_matrix(), self.mu)

    def to_json(self):
        return {
            "mu": self.mu.tolist(),
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "horizon": float(self.horizon),
        }


def sample_poisson(rate, T, seed=None):
    """Homogeneous Poisson event times on [0, T)."""
    if rate < 0:
        raise SpecError("rate must be non-negative")
    if T <= 0:
        raise SpecError("T must be positive")
    rng = _rng(seed)
    if rate == 0:
        return []
    out = []
    t = rng.exponential(1.0 / rate)
    while t < T:
        out.append(t)
        t += rng.exponential(1.0 / rate)
    return out


def sample_hawkes(spec, seed=None, start=0.0, end=None, history=None):
    """Ogata thinning with recursive exponential-kernel intensities.

    Returns ``(times, types)`` for events in ``[start, end)``.  ``history``
    is an optional ``(times, types)`` pair of earlier events that excite
    the simulated window.
    """
    spec.validate()
    rng = _rng(seed)
    end = spec.horizon if end is None else end
    decay_state = np.zeros_like(spec.alpha)
    t = start
    if history is not None:
        for th, kh in zip(*history):
            if th < start:
                decay_state[:, kh] += spec.alpha[:, kh] * np.exp(-spec.beta[:, kh] * (start - th))
    times, types = [], []
    while True:
        lam = spec.mu + decay_state.sum(axis=1)
        bound = lam.sum()
        if bound <= 0:
            break
        w = rng.exponential(1.0 / bound)
        t_new = t + w
        if t_new >= end:
            break
        decay_state *= np.exp(-spec.beta * w)
        t = t_new
        lam = spec.mu + decay_state.sum(axis=1)
        total = lam.sum()
        if rng.uniform() * bound <= total:
            k = int(np.searchsorted(np.cumsum(lam), rng.uniform() * total, side="right"))
            k = min(k, spec.n_types - 1)
            times.append(t)
            types.append(k)
            decay_state[:, k] += spec.alpha[:, k]
    return np.asarray(times), np.asarray(types, dtype=np.int64)


def _check_sorted(times):
    if len(times) and np.any(np.diff(times) < 0):
        raise SpecError("events must be sorted by time")


def hawkes_compensator(spec, times, types, t0, t1):
    """Per-type integral of the intensity over [t0, t1], events before t1 counted."""
    times = np.asarray(times, dtype=np.float64)
    types = np.asarray(types, dtype=np.int64)
    out = spec.mu * (t1 - t0)
    keep = times < t1
    for te, j in zip(times[keep], types[keep]):
        a = max(t0, te)
        b = spec.beta[:, j]
        out = out + spec.alpha[:, j] / b * (np.exp(-b * (a - te)) - np.exp(-b * (t1 - te)))
    return out


def hawkes_loglik(spec, times, types, T):
    """Exact log-likelihood of a marked event list on [0, T)."""
    times = np.asarray(times, dtype=np.float64)
    types = np.asarray(types, dtype=np.int64)
    _check_sorted(times)
    if len(times) and (times[0] < 0 or times[-1] >= T):
        raise SpecError("events must lie in [0, T)")
    state = np.zeros_like(spec.alpha)
    prev = 0.0
    ll = 0.0
    for t, k in zip(times, types):
        state *= np.exp(-spec.beta * (t - prev))
        ll += np.log(spec.mu[k] + state[k].sum())
        state[:, k] += spec.alpha[:, k]
        prev = t
    return float(ll - hawkes_compensator(spec, times, types, 0.0, T).sum())


def hawkes_conditional_nll(spec, times, types):
    """NLL of events 2..n given the first, over (t_1, t_n].

    Matches the window the neural objective scores, so the two can be
    compared per sequence.
    """
    times = np.asarray(times, dtype=np.float64)
    full = hawkes_loglik(spec, times, types, np.nextafter(times[-1], np.inf))
    first = hawkes_loglik(spec, times[:1], types[:1], np.nextafter(times[0], np.inf))
    return -(full - first)


# --------------------------------------------------------------------------
# cohorts


def _default_types():
    return ["risk", "outcome", "bg_1", "bg_2", "bg_3", "bg_4", "bg_5", "bg_6"]


@dataclass
class CohortSpec:
    """Knobs for a planted-signal cohort.

    Each patient draws a log-normal frailty that scales the base rate of
    ``risk``; ``risk`` events excite ``outcome``.  Outcome labels are
    logistic in the post-index mean intensities, costs are linear in
    post-index event counts plus exponential noise.
    """

    n_patients: int = 1000
    seed: int = 0
    types: list = field(default_factory=_default_types)
    base_rate: list = field(default_factory=lambda: [0.4, 0.1, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25])
    self_excite: float = 0.15
    risk_to_outcome: float = 0.35
    decay: float = 1.0
    frailty_sd: float = 0.9
    age_effect: float = 0.1
    history_quarters: tuple = (20, 28)
    followup_quarters: float = 8.0
    bmi_obs_rate: float = 0.5
    bmi_frailty_weight: float = 1.5
    bmi_noise_sd: float = 4.0
    outcomes: dict = field(
        default_factory=lambda: {
            "planted": {"bias": -4.0, "weights": {"outcome": 12.0}},
            "null": {"bias": -1.0, "weights": {}},
        }
    )
    costs: dict = field(
        default_factory=lambda: {
            "cost_all": {"intercept": 100.0, "weights": {}, "noise": 400.0},
            "cost_cv": {"intercept": 0.0, "weights": {"outcome": 120.0, "risk": 60.0}, "noise": 150.0},
        }
    )
    treatment: dict = field(
        default_factory=lambda: {"bias": -2.0, "age": 0.5, "male": 0.4, "race_c": 0.3, "bmi": 0.5}
    )
    n_cohorts: int = 6
    race_levels: tuple = ("A", "B", "C")

    def to_json(self):
        d = asdict(self)
        d["history_quarters"] = list(self.history_quarters)
        d["race_levels"] = list(self.race_levels)
        return d


def cohort_vocabulary(spec):
    from .data import Vocabulary

    return Vocabulary(
        indicative=list(spec.types),
        numeric=["bmi"],
        static_levels={"gender": ["F", "M"], "race": list(spec.race_levels)},
    )


def patient_hawkes(spec, age, frailty):
    k = len(spec.types)
    mu = np.asarray(spec.base_rate, dtype=np.float64) * np.exp(spec.age_effect * (age - 50.0) / 10.0)
    ri, oi = spec.types.index("risk"), spec.types.index("outcome")
    mu[ri] *= frailty
    alpha = np.eye(k) * spec.self_excite * spec.decay
    alpha[oi, ri] = spec.risk_to_outcome * spec.decay
    return HawkesSpec(mu, alpha, spec.decay)


def _linear_rule(rule, names, values):
    return sum(w * values[names.index(n)] for n, w in rule.get("weights", {}).items())


def gen_patient(spec, i):
    rng = np.random.default_rng([spec.seed, i])
    pid = f"P{i:06d}"
    gender = "M" if rng.uniform() < 0.5 else "F"
    race = spec.race_levels[int(rng.integers(len(spec.race_levels)))]
    age = float(rng.uniform(20.0, 80.0))
    z = rng.normal()
    frailty = float(np.exp(spec.frailty_sd * z - spec.frailty_sd**2 / 2))
    bmi = float(30.0 + spec.bmi_frailty_weight * z * 2.0 + rng.normal(0.0, spec.bmi_noise_sd))
    lo, hi = spec.history_quarters
    index = int(rng.integers(lo, hi + 1))
    end = index + spec.followup_quarters
    hs = patient_hawkes(spec, age, frailty)
    hs.horizon = end
    times, types = sample_hawkes(hs, rng)
    pre = times < index
    post = ~pre
    rows = [
        FactRow(pid, 0, f"gender={gender}"),
        FactRow(pid, 0, f"race={race}"),
        FactRow(pid, 0, f"pseudo_age={int(age)}"),
    ]
    for t, k in zip(times[pre], types[pre]):
        rows.append(FactRow(pid, int(np.floor(t)), spec.types[k]))
    for t in sample_poisson(spec.bmi_obs_rate, float(index), rng):
        rows.append(FactRow(pid, int(np.floor(t)), "bmi", round(bmi + float(rng.normal(0.0, 1.0)), 2)))
    # stable sort by interval keeps the within-quarter event order
    static, events = rows[:3], sorted(rows[3:], key=lambda r: r.interval)
    rows = static + events

    lam_mean = hawkes_compensator(hs, times, types, index, end) / spec.followup_quarters
    counts = np.bincount(types[post], minlength=len(spec.types)).astype(np.float64)
    rec = {
        "patient_id": pid,
        "cohort": int(rng.integers(spec.n_cohorts)),
        "index_interval": index,
        "cov_age": round(age, 3),
        "cov_male": int(gender == "M"),
        "cov_race_b": int(race == "B"),
        "cov_race_c": int(race == "C"),
        "cov_bmi": round(bmi, 3),
    }
    for name, rule in spec.outcomes.items():
        p = 1.0 / (1.0 + np.exp(-(rule["bias"] + _linear_rule(rule, spec.types, lam_mean))))
        rec[f"outcome_{name}"] = int(rng.uniform() < p)
    for name, rule in spec.costs.items():
        base = rule["intercept"] + _linear_rule(rule, spec.types, counts)
        rec[name] = round(base + (rng.exponential(rule["noise"]) if rule["noise"] > 0 else 0.0), 4)
        rec[f"oracle_{name}"] = round(
            rule["intercept"] + _linear_rule(rule, spec.types, lam_mean * spec.followup_quarters) + rule["noise"], 4
        )
    t = spec.treatment
    logit = (
        t["bias"]
        + t["age"] * (age - 50.0) / 17.3
        + t["male"] * rec["cov_male"]
        + t["race_c"] * rec["cov_race_c"]
        + t["bmi"] * (bmi - 30.0) / 5.0
    )
    rec["treated"] = int(rng.uniform() < 1.0 / (1.0 + np.exp(-logit)))
    rec["_continuous"] = (times[pre], types[pre])
    rec["_post_counts"] = counts
    rec["_hawkes"] = hs
    rec["_lam_mean"] = lam_mean
    return rows, rec


def gen_cohort(spec):
    """Generate ``(rows, records)`` for every patient in order."""
    if spec.n_patients <= 0:
        raise SpecError("cohort needs at least one patient")
    rows, records = [], []
    for i in range(spec.n_patients):
        r, rec = gen_patient(spec, i)
        rows.extend(r)
        records.append(rec)
    return rows, records


def cohort_columns(spec):
    cols = ["patient_id", "cohort", "treated"]
    cols += [f"outcome_{n}" for n in spec.outcomes]
    cols += list(spec.costs)
    cols += ["index_interval", "cov_age", "cov_male", "cov_race_b", "cov_race_c", "cov_bmi"]
    cols += [f"oracle_{n}" for n in spec.costs]
    return cols


def write_cohort(out_dir, spec, rows, records):
    """Write events.csv, cohort.csv and the echoed spec into ``out_dir``."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events_csv(out / "events.csv", rows)
    cols = cohort_columns(spec)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for rec in records:
        w.writerow(rec)
    (out / "cohort.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "synth_spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True), encoding="utf-8")
    cohort_vocabulary(spec).save(out / "vocab.json")
