"""Fact tables to padded, vocabulary-indexed patient sequences."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD = 0
STATIC_ROLES = ("gender", "race", "pseudo_age")
N_BUCKETS = 5
AGE_DECADES = 12


class DataError(ValueError):
    pass


class CSVFormatError(DataError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = path, line


@dataclass(frozen=True)
class FactRow:
    patient_id: str
    interval: int
    concept: str
    value: float | None = None


@dataclass
class Vocabulary:
    """Event-type universe.

    Index 0 is padding, then the three static roles, then indicative
    concepts, then numeric concepts.  ``static_levels`` lists the
    categorical codes for gender and race; pseudo-age is coded by decade.
    """

    indicative: list
    numeric: list = field(default_factory=list)
    static: tuple = STATIC_ROLES
    static_levels: dict = field(default_factory=dict)

    def __post_init__(self):
        self.static = tuple(self.static)
        if self.static != STATIC_ROLES:
            raise DataError(f"static roles must be exactly {STATIC_ROLES}")
        names = list(self.indicative) + list(self.numeric) + list(self.static)
        if len(set(names)) != len(names) or "<pad>" in names:
            raise DataError("vocabulary groups overlap or repeat a concept")
        self.static_levels = {r: list(self.static_levels.get(r, [])) for r in ("gender", "race")}
        self._index = {c: i for i, c in enumerate(self.tokens)}

    @property
    def tokens(self):
        return ["<pad>", *self.static, *self.indicative, *self.numeric]

    @property
    def size(self):
        return len(self.tokens)

    @property
    def n_types(self):
        """Main-stream types (static + indicative), excluding padding."""
        return len(self.static) + len(self.indicative)

    @property
    def first_indicative(self):
        return 1 + len(self.static)

    @property
    def n_indicative(self):
        return len(self.indicative)

    @property
    def n_static_codes(self):
        return {
            "gender": len(self.static_levels["gender"]) + 1,
            "race": len(self.static_levels["race"]) + 1,
            "pseudo_age": AGE_DECADES + 1,
        }

    def index(self, concept):
        return self._index[concept]

    def is_indicative(self, concept):
        i = self._index.get(concept)
        return i is not None and self.first_indicative <= i < self.first_indicative + len(self.indicative)

    def is_numeric(self, concept):
        return concept in self._index and self._index[concept] >= self.first_indicative + len(self.indicative)

    def numeric_slot(self, concept):
        return self._index[concept] - self.first_indicative - len(self.indicative)

    def type_names(self):
        """Names of the main-stream types in grid-row order (static first)."""
        return list(self.static) + list(self.indicative)

    def encode_static(self, role, level):
        if role == "pseudo_age":
            age = max(0.0, float(level))  # born after the anchor date: clamp
            return min(int(age // 10), AGE_DECADES - 1) + 1
        levels = self.static_levels[role]
        return levels.index(level) + 1 if level in levels else 0

    def to_json(self):
        return {
            "indicative": list(self.indicative),
            "numeric": list(self.numeric),
            "static": list(self.static),
            "static_levels": self.static_levels,
        }

    def digest(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_json(cls, obj):
        return cls(
            indicative=list(obj["indicative"]),
            numeric=list(obj.get("numeric", [])),
            static=tuple(obj.get("static", STATIC_ROLES)),
            static_levels=obj.get("static_levels", {}),
        )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)


@dataclass
class PatientSequence:
    """One patient's history, right-padded to ``max_len``.

    ``types``/``times`` hold vocabulary indices and float quarter times;
    entries past ``length`` are padding.  Numeric events live in parallel
    arrays; ``num_bucket`` is -1 until a BucketSpec has been applied.
    """

    patient_id: str
    types: np.ndarray
    times: np.ndarray
    length: int
    static: np.ndarray
    num_types: np.ndarray
    num_times: np.ndarray
    num_values: np.ndarray
    num_bucket: np.ndarray
    static_levels: dict = field(default_factory=dict)

    @property
    def events(self):
        return list(zip(self.types[: self.length].tolist(), self.times[: self.length].tolist()))

    @property
    def max_len(self):
        return len(self.types)

    @classmethod
    def from_events(cls, patient_id, types, times, max_len=64, static=(0, 0, 0), numeric=None):
        """Build directly from (type index, time) arrays, e.g. simulated data."""
        types = np.asarray(types, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        n = len(types)
        if n > max_len:
            raise DataError(f"{n} events exceed max_len {max_len}")
        if n and np.any(np.diff(times) < 0):
            raise DataError("event times must be non-decreasing")
        pt = np.zeros(max_len, dtype=np.int64)
        pt[:n] = types
        tm = np.zeros(max_len)
        tm[:n] = times
        if n:
            tm[n:] = times[-1]
        nt, ntm, nv, nb = numeric if numeric is not None else ([], [], [], [])
        return cls(
            patient_id=str(patient_id),
            types=pt,
            times=tm,
            length=n,
            static=np.asarray(static, dtype=np.int64),
            num_types=np.asarray(nt, dtype=np.int64),
            num_times=np.asarray(ntm, dtype=np.float64),
            num_values=np.asarray(nv, dtype=np.float64),
            num_bucket=np.asarray(nb, dtype=np.int64),
        )

    def truncated(self, n):
        """Copy keeping the first ``n`` events (numeric events clipped to match)."""
        n = min(n, self.length)
        last = self.times[n - 1] if n else -math.inf
        keep = self.num_times <= last
        out = PatientSequence.from_events(
            self.patient_id,
            self.types[:n],
            self.times[:n],
            self.max_len,
            self.static,
            (self.num_types[keep], self.num_times[keep], self.num_values[keep], self.num_bucket[keep]),
        )
        out.static_levels = dict(self.static_levels)
        return out


@dataclass
class ExclusionReport:
    excluded: dict = field(default_factory=dict)
    unknown_concepts: Counter = field(default_factory=Counter)
    malformed_rows: int = 0
    retained: int = 0

    @property
    def n_input(self):
        return self.retained + len(self.excluded)


@dataclass
class BucketSpec:
    boundaries: dict

    def assign(self, concept, values):
        b = np.asarray(self.boundaries[concept])
        # value equal to a boundary lands in the higher bucket
        return np.searchsorted(b, np.asarray(values, dtype=np.float64), side="right")

    def to_json(self):
        return {k: list(map(float, v)) for k, v in self.boundaries.items()}

    @classmethod
    def from_json(cls, obj):
        return cls({k: [float(x) for x in v] for k, v in obj.items()})


# --------------------------------------------------------------------------


def _quarter(date):
    return date.year * 4 + (date.month - 1) // 3


def parse_quarter(label):
    """``"2007Q1"`` -> first day of that quarter."""
    year, q = label.upper().split("Q")
    return dt.date(int(year), 3 * (int(q) - 1) + 1, 1)


def bin_timestamp(date, epoch="2007Q1"):
    """Zero-based quarter index of ``date`` relative to the epoch quarter."""
    if isinstance(date, str):
        date = dt.date.fromisoformat(date)
    if isinstance(epoch, str):
        epoch = parse_quarter(epoch)
    start = dt.date(epoch.year, 3 * ((epoch.month - 1) // 3) + 1, 1)
    if date < start:
        raise DataError(f"date {date} precedes epoch {start}")
    return _quarter(date) - _quarter(start)


def build_sequences(rows, vocab, min_len=32, max_len=64, buckets=None, keep="earliest"):
    """Group fact rows into per-patient sequences.

    Indicative events are stably sorted by interval (file order breaks
    ties), patients with fewer than ``min_len`` are excluded, and longer
    histories keep their earliest ``max_len`` (``keep="latest"`` keeps the
    most recent ones instead, for forecasting from an index date).
    Numeric events are kept only inside the retained indicative span.
    Unknown concepts and malformed rows are dropped and counted in the
    report.
    """
    if keep not in ("earliest", "latest"):
        raise DataError(f"keep must be 'earliest' or 'latest', got {keep!r}")
    report = ExclusionReport()
    per_patient = {}
    for order, row in enumerate(rows):
        if not row.concept:
            report.malformed_rows += 1
            continue
        per_patient.setdefault(row.patient_id, []).append((order, row))

    seqs = []
    for pid in sorted(per_patient):
        items = per_patient[pid]
        static = np.zeros(3, dtype=np.int64)
        levels = {}
        ind, num = [], []
        for order, row in items:
            concept = row.concept
            if "=" in concept and concept.split("=", 1)[0] in STATIC_ROLES:
                role, level = concept.split("=", 1)
                try:
                    static[STATIC_ROLES.index(role)] = vocab.encode_static(role, level)
                except ValueError:
                    report.malformed_rows += 1
                    continue
                levels[role] = level
            elif vocab.is_indicative(concept):
                if row.value is not None:
                    report.malformed_rows += 1
                    continue
                ind.append((row.interval, order, vocab.index(concept)))
            elif vocab.is_numeric(concept):
                if row.value is None or not math.isfinite(row.value):
                    report.malformed_rows += 1
                    continue
                num.append((row.interval, order, concept, row.value))
            else:
                report.unknown_concepts[concept] += 1
        if len(ind) < min_len:
            report.excluded[pid] = "below minimum"
            continue
        ind.sort(key=lambda r: (r[0], r[1]))
        ind = ind[:max_len] if keep == "earliest" else ind[-max_len:]
        first, last = ind[0][0], ind[-1][0]
        num.sort(key=lambda r: (r[0], r[1]))
        num = [r for r in num if first <= r[0] <= last]
        num = num[:max_len] if keep == "earliest" else num[-max_len:]
        nt = np.array([vocab.numeric_slot(r[2]) for r in num], dtype=np.int64)
        ntm = np.array([r[0] for r in num], dtype=np.float64)
        nv = np.array([r[3] for r in num], dtype=np.float64)
        nb = np.full(len(num), -1, dtype=np.int64)
        if buckets is not None:
            for j, r in enumerate(num):
                nb[j] = buckets.assign(r[2], [r[3]])[0]
        seq = PatientSequence.from_events(
            pid,
            [r[2] for r in ind],
            [float(r[0]) for r in ind],
            max_len,
            static,
            (nt, ntm, nv, nb),
        )
        seq.static_levels = levels
        seqs.append(seq)
    report.retained = len(seqs)
    return seqs, report


def apply_buckets(seqs, vocab, buckets):
    for s in seqs:
        for j in range(len(s.num_types)):
            s.num_bucket[j] = buckets.assign(vocab.numeric[s.num_types[j]], [s.num_values[j]])[0]
    return seqs


def sequences_to_rows(seqs, vocab):
    """Inverse of build_sequences for retained patients."""
    tokens = vocab.tokens
    rows = []
    for s in seqs:
        t0 = int(s.times[0]) if s.length else 0
        for role in STATIC_ROLES:
            if role in s.static_levels:
                rows.append(FactRow(s.patient_id, t0, f"{role}={s.static_levels[role]}"))
        for k, t in s.events:
            rows.append(FactRow(s.patient_id, int(t), tokens[k]))
        for j in range(len(s.num_types)):
            rows.append(
                FactRow(s.patient_id, int(s.num_times[j]), vocab.numeric[s.num_types[j]], float(s.num_values[j]))
            )
    return rows


def fit_buckets(rows, vocab):
    """Quintile boundaries per numeric concept (linear-interpolated percentiles)."""
    values = {c: [] for c in vocab.numeric}
    for r in rows:
        if r.value is not None and r.concept in values:
            values[r.concept].append(r.value)
    bounds = {}
    for concept, vals in values.items():
        arr = np.asarray(vals, dtype=np.float64)
        if len(np.unique(arr)) < N_BUCKETS:
            raise DataError(f"numeric concept {concept!r} has fewer than {N_BUCKETS} distinct training values")
        b = np.percentile(arr, [20, 40, 60, 80], method="linear")
        if np.any(np.diff(b) <= 0):
            raise DataError(f"numeric concept {concept!r} has tied quintile boundaries {b.tolist()}")
        bounds[concept] = b.tolist()
    return BucketSpec(bounds)


def split_patients(ids, ratios=(0.8, 0.1, 0.1), seed=0):
    """Deterministic patient-level split into len(ratios) disjoint sets."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate patient ids")
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise DataError("ratios must be non-negative and sum to 1")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [sorted(ids)[i] for i in order]
    cuts = np.rint(np.cumsum(ratios) * len(ids)).astype(int)
    cuts[-1] = len(ids)
    parts, start = [], 0
    for c in cuts:
        parts.append(shuffled[start:c])
        start = c
    return tuple(parts)


# --------------------------------------------------------------------------
# files

EVENTS_HEADER = ["patient_id", "interval", "concept", "value"]


def read_events_csv(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != EVENTS_HEADER:
            raise CSVFormatError(path, 1, f"expected header {','.join(EVENTS_HEADER)}")
        for line, rec in enumerate(reader, start=2):
            if len(rec) != 4:
                raise CSVFormatError(path, line, f"expected 4 fields, got {len(rec)}")
            pid, interval, concept, value = rec
            try:
                iv = int(interval)
                val = float(value) if value != "" else None
            except ValueError as exc:
                raise CSVFormatError(path, line, str(exc)) from None
            if iv < 0:
                raise CSVFormatError(path, line, "negative interval")
            rows.append(FactRow(pid, iv, concept, val))
    return rows


def write_events_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for r in rows:
            w.writerow([r.patient_id, r.interval, r.concept, "" if r.value is None else repr(float(r.value))])
