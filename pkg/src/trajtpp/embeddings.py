"""Patient vectors from rollout intensity grids."""

from __future__ import annotations

import csv
import json

import numpy as np


class EmbeddingError(ValueError):
    pass


def uniform_weights(n_bins):
    if n_bins < 1:
        raise EmbeddingError("need at least one bin")
    return np.full(n_bins, 1.0 / n_bins)


def pool(P, w):
    """phi_e = sum_i w_i P[e, i]."""
    P = np.asarray(P, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if P.ndim != 2 or w.shape != (P.shape[1],):
        raise EmbeddingError(f"weights of length {w.size} do not match grid with {P.shape[-1]} bins")
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise EmbeddingError("pooling weights must be non-negative and sum to 1")
    return P @ w


def minmax(v, lo=None, hi=None):
    """Rescale to [0, 1]; a constant vector (hi == lo) maps to zeros."""
    v = np.asarray(v, dtype=np.float64)
    lo = v.min() if lo is None else lo
    hi = v.max() if hi is None else hi
    if hi <= lo:
        return np.zeros_like(v)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def global_extrema(grids):
    """Cohort-wide (min, max) over every grid entry."""
    lo = min(float(np.min(g)) for g in grids)
    hi = max(float(np.max(g)) for g in grids)
    return lo, hi


def build_embedding(vectors, extrema, static_rows, w=None):
    """Normalize and pool per-step vectors into one patient embedding.

    ``vectors`` has one column per rollout step.  Each step vector is
    rescaled with the cohort extrema, then rescaled to its own range, then
    the steps are pooled (uniform weights average them) and the static
    rows removed.
    """
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] < 1:
        raise EmbeddingError("expected a types x steps matrix")
    lo, hi = extrema
    V = minmax(V, lo, hi)
    V = np.stack([minmax(V[:, i]) for i in range(V.shape[1])], axis=1)
    phi = pool(V, uniform_weights(V.shape[1]) if w is None else w)
    keep = np.ones(V.shape[0], dtype=bool)
    keep[list(static_rows)] = False
    return phi[keep]


def grid_rows(vocab):
    """Vocabulary names of the grid rows (static types first, then indicative)."""
    return list(vocab.static) + list(vocab.indicative)


def embedding_names(vocab):
    return list(vocab.indicative)


def embed_cohort(grids, vocab, w=None):
    """Embeddings for a batch of grids; returns (matrix, extrema)."""
    if not grids:
        raise EmbeddingError("no grids to embed")
    extrema = global_extrema(grids)
    static_rows = range(len(vocab.static))
    X = np.stack([build_embedding(g, extrema, static_rows, w) for g in grids])
    return X, extrema


def write_embeddings(path, ids, index_intervals, X, vocab, extrema=None):
    names = embedding_names(vocab)
    if X.shape[1] != len(names):
        raise EmbeddingError(f"embedding width {X.shape[1]} does not match {len(names)} concepts")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "index_interval", *names])
        for pid, iv, row in zip(ids, index_intervals, X):
            w.writerow([pid, iv, *(repr(float(v)) for v in row)])
    if extrema is not None:
        with open(str(path) + ".extrema.json", "w", encoding="utf-8") as fh:
            json.dump({"min": extrema[0], "max": extrema[1]}, fh)


def read_embeddings(path):
    """Return (ids, index intervals, column names, matrix)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, ivs, rows = [], [], []
        for rec in reader:
            ids.append(rec[0])
            ivs.append(int(rec[1]))
            rows.append([float(x) for x in rec[2:]])
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
    return ids, ivs, header[2:], X
