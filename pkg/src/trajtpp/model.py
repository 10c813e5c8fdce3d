"""Attention encoder and softplus intensity head.

Layout of the forward pass for a batch of padded sequences::

    [type emb (+ static at position 0) | time emb | concept vec] -> affine -> D
    -> causal multi-head attention blocks (residual)
    -> [hidden | concept vec | numeric-substream summary]       (fused state)

The intensity for a query ``dt`` after event ``i`` is
``softplus(W2 tanh(W1 [fused_i | time_emb(dt)] + b1) + b2)`` with one output
per indicative type.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .data import N_BUCKETS, DataError

NEG_INF = -1e9


@dataclass
class ModelConfig:
    n_tokens: int
    n_event_types: int
    first_indicative: int
    n_numeric: int = 0
    static_codes: tuple = (3, 4, 13)
    d_model: int = 32
    d_type: int = 16
    d_time: int = 8
    d_ext: int = 16
    d_num: int = 16
    heads: int = 2
    layers: int = 5
    num_layers: int = 1
    num_heads: int = 2
    max_len: int = 64
    time_scale: float = 1000.0
    init_seed: int = 0

    def __post_init__(self):
        self.static_codes = tuple(int(c) for c in self.static_codes)
        dims = [self.d_model, self.d_type, self.d_time, self.d_ext, self.d_num, self.heads, self.layers]
        if min(dims) <= 0 or self.num_heads <= 0 or self.num_layers < 0:
            raise ValueError("model dimensions must be positive")
        if self.d_model % self.heads or self.d_num % self.num_heads:
            raise ValueError("hidden sizes must be divisible by head counts")
        if self.d_time % 2:
            raise ValueError("time embedding dimension must be even")

    @classmethod
    def for_vocab(cls, vocab, **overrides):
        codes = vocab.n_static_codes
        return cls(
            n_tokens=vocab.size,
            n_event_types=vocab.n_indicative,
            first_indicative=vocab.first_indicative,
            n_numeric=len(vocab.numeric),
            static_codes=(codes["gender"], codes["race"], codes["pseudo_age"]),
            **overrides,
        )

    @property
    def d_fused(self):
        return self.d_model + self.d_ext + self.d_num

    def to_json(self):
        d = asdict(self)
        d["static_codes"] = list(self.static_codes)
        return d


def time_embedding(t, dim, time_scale=1000.0):
    """Fixed sinusoidal features ``(sin(t/w_k), cos(t/w_k))`` with geometric ``w_k``."""
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    n = dim // 2
    w = time_scale ** (np.arange(n) / max(n - 1, 1))
    ang = t[..., None] / w
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def time_periods(dim, time_scale=1000.0):
    n = dim // 2
    return time_scale ** (np.arange(n) / max(n - 1, 1))


# --------------------------------------------------------------------------
# concept embeddings


@dataclass
class ConceptEmbeddingMap:
    """Concept -> list of pretrained topic vectors (mean-resolved)."""

    dim: int
    topics: dict = field(default_factory=dict)
    mapping: dict = field(default_factory=dict)

    def resolve(self, concept):
        vecs = [self.topics[t] for t in self.mapping.get(concept, []) if t in self.topics]
        if not vecs:
            return np.zeros(self.dim)
        return np.mean(vecs, axis=0)

    def table(self, vocab):
        tab = np.zeros((vocab.size, self.dim))
        for i, tok in enumerate(vocab.tokens):
            if i:
                tab[i] = self.resolve(tok)
        return tab

    @classmethod
    def load(cls, mapping_csv, topics_csv):
        topics = {}
        with open(topics_csv, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rec in reader:
                topics[rec[0]] = np.array([float(x) for x in rec[1:]])
        dims = {len(v) for v in topics.values()}
        if len(dims) > 1:
            raise DataError(f"topic vectors have mixed dimensions {sorted(dims)}")
        mapping = {}
        with open(mapping_csv, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                mapping.setdefault(rec["concept"], []).append(rec["topic"])
        return cls(dims.pop() if dims else 0, topics, mapping)


def fuse_concept_embeddings(hidden, types, table):
    """Append each position's resolved concept vector to its hidden state."""
    table = np.asarray(table)
    ext = table[np.asarray(types)]
    if hidden.shape[:-1] != ext.shape[:-1]:
        raise ad.ShapeError(f"fuse: hidden {hidden.shape} and concept block {ext.shape} differ")
    return ad.concat([hidden, Tensor(ext)], axis=-1)


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    types: np.ndarray
    times: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    static: np.ndarray
    num_tokens: np.ndarray
    num_times: np.ndarray
    num_mask: np.ndarray
    num_align: np.ndarray

    @property
    def size(self):
        return self.types.shape[0]


def collate(seqs, max_len=None):
    """Stack sequences into padded arrays, aligning the numeric substream."""
    if not seqs:
        raise DataError("empty batch")
    L = max_len or max(s.max_len for s in seqs)
    B = len(seqs)
    types = np.zeros((B, L), dtype=np.int64)
    times = np.zeros((B, L))
    lengths = np.zeros(B, dtype=np.int64)
    static = np.zeros((B, 3), dtype=np.int64)
    # fixed substream width keeps results independent of batch composition
    M = L
    num_tokens = np.zeros((B, M), dtype=np.int64)
    num_times = np.zeros((B, M))
    num_mask = np.zeros((B, M), dtype=bool)
    num_align = np.zeros((B, L), dtype=np.int64)
    for b, s in enumerate(seqs):
        n = s.length
        if n == 0:
            raise DataError(f"sequence {s.patient_id!r} has no real events")
        if n > L:
            raise DataError(f"sequence {s.patient_id!r} longer than max length {L}")
        types[b, :n] = s.types[:n]
        times[b, :n] = s.times[:n]
        times[b, n:] = s.times[n - 1]
        lengths[b] = n
        static[b] = s.static
        m = len(s.num_types)
        if m > M:
            raise DataError(f"sequence {s.patient_id!r} has more than {M} numeric events")
        if m:
            if np.any(s.num_bucket < 0) or np.any(s.num_bucket >= N_BUCKETS):
                raise DataError(f"bucket index outside 0-{N_BUCKETS - 1} in {s.patient_id!r}")
            num_tokens[b, :m] = 1 + N_BUCKETS * s.num_types + s.num_bucket
            num_times[b, :m] = s.num_times
            num_mask[b, :m] = True
            # index of last numeric event at or before each main time; 0 = none
            num_align[b] = np.searchsorted(s.num_times, times[b], side="right")
    mask = np.arange(L)[None, :] < lengths[:, None]
    return Batch(types, times, mask, lengths, static, num_tokens, num_times, num_mask, num_align)


# --------------------------------------------------------------------------
# parameters


def init_params(cfg):
    rng = np.random.default_rng(cfg.init_seed)
    p = {}

    def w(name, fan_in, fan_out, gain=1.0):
        p[name] = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))

    def z(name, *shape):
        p[name] = np.zeros(shape)

    p["type_emb"] = rng.normal(0.0, 0.3, size=(cfg.n_tokens, cfg.d_type))
    p["type_emb"][0] = 0.0
    for role, n in zip(("gender", "race", "age"), cfg.static_codes):
        p[f"static_{role}"] = rng.normal(0.0, 0.3, size=(n, cfg.d_type))
    d_in = cfg.d_type + cfg.d_time + cfg.d_ext
    w("in_w", d_in, cfg.d_model)
    z("in_b", cfg.d_model)
    res_gain = 1.0 / np.sqrt(2 * cfg.layers)
    for prefix, layers, d in (("enc", cfg.layers, cfg.d_model), ("num", cfg.num_layers, cfg.d_num)):
        for li in range(layers):
            for m in ("q", "k", "v"):
                w(f"{prefix}{li}_w{m}", d, d)
            w(f"{prefix}{li}_wo", d, d, res_gain)
            w(f"{prefix}{li}_ff1", d, 2 * d)
            z(f"{prefix}{li}_ff1b", 2 * d)
            w(f"{prefix}{li}_ff2", 2 * d, d, res_gain)
            z(f"{prefix}{li}_ff2b", d)
    p["num_emb"] = rng.normal(0.0, 0.3, size=(1 + N_BUCKETS * max(cfg.n_numeric, 1), cfg.d_num))
    p["num_emb"][0] = 0.0
    w("num_in_w", cfg.d_num + cfg.d_time, cfg.d_num)
    z("num_in_b", cfg.d_num)
    p["num_null"] = rng.normal(0.0, 0.1, size=cfg.d_num)
    w("head_w1", cfg.d_fused, cfg.d_model)
    w("head_w1t", cfg.d_time, cfg.d_model)
    z("head_b1", cfg.d_model)
    w("head_w2", cfg.d_model, cfg.n_event_types, 0.5)
    z("head_b2", cfg.n_event_types)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def linear(x, w, b=None):
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, ad.expand(b, out.shape))
    return out


def attention_block(x, params, prefix, heads, allowed):
    """Residual multi-head attention followed by a residual tanh MLP."""
    B, L, D = x.shape
    dh = D // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(ad.matmul(x, params[f"{prefix}_wq"]))
    k = split(ad.matmul(x, params[f"{prefix}_wk"]))
    v = split(ad.matmul(x, params[f"{prefix}_wv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    blocked = np.broadcast_to(~allowed[:, None, :, :], scores.shape)
    att = ad.softmax(ad.masked_fill(scores, blocked, NEG_INF), axis=-1)
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, L, D))
    x = ad.add(x, ad.matmul(ctx, params[f"{prefix}_wo"]))
    hidden = ad.tanh(linear(x, params[f"{prefix}_ff1"], params[f"{prefix}_ff1b"]))
    return ad.add(x, linear(hidden, params[f"{prefix}_ff2"], params[f"{prefix}_ff2b"]))


def causal_mask(valid):
    """``allowed[b, i, j]``: query i may attend key j (j <= i, j real)."""
    L = valid.shape[1]
    tri = np.tril(np.ones((L, L), dtype=bool))
    allowed = tri[None, :, :] & valid[:, None, :]
    # padded queries still see key 0 so their softmax rows stay well defined
    allowed[:, :, 0] = True
    return allowed


def numeric_substream(batch, params, cfg):
    """Per-main-position summary of the numeric event stream.

    A causal attention stack runs over bucket tokens; position i receives
    the state of the last numeric event at or before its time, or the
    learned null vector when there is none.
    """
    B, L = batch.types.shape
    null = ad.reshape(ad.expand(params["num_null"], (B, 1, cfg.d_num)), (B, 1, cfg.d_num))
    if not batch.num_mask.any():
        return ad.expand(null, (B, L, cfg.d_num))
    emb = ad.take(params["num_emb"], batch.num_tokens)
    tm = Tensor(time_embedding(batch.num_times, cfg.d_time, cfg.time_scale))
    h = linear(ad.concat([emb, tm], axis=-1), params["num_in_w"], params["num_in_b"])
    allowed = causal_mask(batch.num_mask)
    for li in range(cfg.num_layers):
        h = attention_block(h, params, f"num{li}", cfg.num_heads, allowed)
    ext = ad.concat([null, h], axis=1)
    rows = np.arange(B)[:, None]
    return ad.take(ext, (np.broadcast_to(rows, (B, L)), batch.num_align))


def encode(batch, params, cfg, concept_table):
    """Fused per-position states, shape (B, L, d_fused)."""
    B, L = batch.types.shape
    if L > cfg.max_len:
        raise DataError(f"sequence length {L} exceeds max length {cfg.max_len}")
    te = ad.take(params["type_emb"], batch.types)
    s = batch.static
    stat = ad.add(
        ad.add(ad.take(params["static_gender"], s[:, 0]), ad.take(params["static_race"], s[:, 1])),
        ad.take(params["static_age"], s[:, 2]),
    )
    # static covariates enter only through the first token
    inject = ad.concat([ad.reshape(stat, (B, 1, cfg.d_type)), Tensor(np.zeros((B, L - 1, cfg.d_type)))], axis=1)
    te = ad.add(te, inject)
    tm = Tensor(time_embedding(batch.times, cfg.d_time, cfg.time_scale))
    x = fuse_concept_embeddings(ad.concat([te, tm], axis=-1), batch.types, concept_table)
    h = linear(x, params["in_w"], params["in_b"])
    allowed = causal_mask(batch.mask)
    for li in range(cfg.layers):
        h = attention_block(h, params, f"enc{li}", cfg.heads, allowed)
    h = fuse_concept_embeddings(h, batch.types, concept_table)
    return ad.concat([h, numeric_substream(batch, params, cfg)], axis=-1)


def head_context(fused, params):
    """State-dependent part of the head's first affine map (reused across query times)."""
    return ad.matmul(fused, params["head_w1"])


def head_from_context(ctx, dt, params, cfg):
    """Intensities for query offsets ``dt``; ``ctx`` must already match ``dt``'s shape + (d_model,)."""
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(dt < 0):
        raise ValueError("query offset must be non-negative")
    te = Tensor(time_embedding(dt, cfg.d_time, cfg.time_scale))
    pre = ad.add(ad.add(ctx, ad.matmul(te, params["head_w1t"])), ad.expand(params["head_b1"], ctx.shape))
    hidden = ad.tanh(pre)
    return ad.softplus(linear(hidden, params["head_w2"], params["head_b2"]))


def intensity_at(fused, dt, params, cfg):
    """lambda(t_i + dt) per indicative type from fused state(s) ``fused``."""
    fused = ad.as_tensor(fused)
    return head_from_context(head_context(fused, params), dt, params, cfg)


# --------------------------------------------------------------------------


class TPPModel:
    """Parameters, config and the fixed concept table, with persistence."""

    def __init__(self, cfg, params=None, concept_table=None, vocab_digest=""):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        if concept_table is None:
            concept_table = np.zeros((cfg.n_tokens, cfg.d_ext))
        # rounded through float32 so a checkpoint round trip is bit-exact
        concept_table = np.asarray(concept_table, dtype=np.float32).astype(np.float64)
        if concept_table.shape != (cfg.n_tokens, cfg.d_ext):
            raise ad.ShapeError(
                f"concept table {concept_table.shape} does not match ({cfg.n_tokens}, {cfg.d_ext})"
            )
        self.concept_table = concept_table
        self.vocab_digest = vocab_digest

    @classmethod
    def for_vocab(cls, vocab, concept_map=None, **overrides):
        if concept_map is not None and concept_map.dim:
            overrides.setdefault("d_ext", concept_map.dim)
        cfg = ModelConfig.for_vocab(vocab, **overrides)
        table = concept_map.table(vocab) if concept_map is not None and concept_map.dim else None
        return cls(cfg, concept_table=table, vocab_digest=vocab.digest())

    def encode(self, batch):
        return encode(batch, self.params, self.cfg, self.concept_table)

    def intensity(self, fused, dt):
        return intensity_at(fused, dt, self.params, self.cfg)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, extra=None):
        tensors = dict(self.state_arrays())
        tensors["__concept_table"] = self.concept_table
        meta = {"config": self.cfg.to_json(), "vocab_hash": self.vocab_digest}
        meta.update(extra or {})
        checkpoint.save(path, tensors, meta)

    @classmethod
    def load(cls, path):
        tensors, meta = checkpoint.load(path)
        cfg = ModelConfig(**meta["config"])
        table = tensors.pop("__concept_table")
        params = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
        return cls(cfg, params, table, meta.get("vocab_hash", "")), meta

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return TPPModel(self.cfg, params, self.concept_table, self.vocab_digest)


def pinned_model(vocab, rates, **overrides):
    """Model whose every parameter is zero except the output bias.

    The intensity is then the constant ``rates`` vector regardless of
    history, which makes samplers and likelihoods checkable in closed form.
    """
    model = TPPModel.for_vocab(vocab, **overrides)
    for p in model.params.values():
        p.data = np.zeros_like(p.data)
    rates = np.broadcast_to(np.asarray(rates, dtype=np.float64), (model.cfg.n_event_types,))
    model.params["head_b2"].data = np.log(np.expm1(rates)).astype(np.float32)
    return model


def encode_history(seq, model):
    """Fused states (length x d_fused) for one sequence."""
    return model.encode(collate([seq], model.cfg.max_len)).data[0, : seq.length]
