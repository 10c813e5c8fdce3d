import numpy as np
import pytest

from trajtpp import autodiff as ad
from trajtpp.data import DataError, PatientSequence, Vocabulary
from trajtpp.model import (
    ConceptEmbeddingMap,
    ModelConfig,
    TPPModel,
    collate,
    fuse_concept_embeddings,
    intensity_at,
    pinned_model,
    time_embedding,
    time_periods,
)

SMALL = dict(d_model=8, d_type=4, d_time=4, d_ext=4, d_num=4, layers=2, heads=2)


@pytest.fixture
def vocab():
    return Vocabulary(
        indicative=["a", "b", "c", "d"],
        numeric=["bmi"],
        static_levels={"gender": ["F", "M"], "race": ["A", "B"]},
    )


def _seq(types=(4, 6, 5, 7, 4, 6), times=(0, 0.5, 1.2, 2.0, 2.1, 3.5), numeric=None, static=(1, 2, 4)):
    return PatientSequence.from_events("p", list(types), list(times), max_len=16, static=static, numeric=numeric)


def _model(vocab, seed=0, **kw):
    return TPPModel.for_vocab(vocab, **{**SMALL, "max_len": 16, "init_seed": seed, **kw})


def test_time_embedding_examples():
    e = time_embedding(0.0, 8)
    assert e.tolist() == [0, 1, 0, 1, 0, 1, 0, 1]
    t = np.random.default_rng(0).uniform(0, 100, 50)
    assert np.abs(time_embedding(t, 8)).max() <= 1.0
    w0 = time_periods(8)[0]
    np.testing.assert_allclose(time_embedding(3.0, 8)[:2], time_embedding(3.0 + 2 * np.pi * w0, 8)[:2], atol=1e-12)
    with pytest.raises(ValueError):
        time_embedding(1.0, 7)


def test_config_validation(vocab):
    with pytest.raises(ValueError):
        ModelConfig.for_vocab(vocab, d_model=9, heads=2)
    with pytest.raises(ValueError):
        ModelConfig.for_vocab(vocab, d_time=0)


def test_zero_params_give_ln2(vocab):
    m = _model(vocab)
    for p in m.params.values():
        p.data = np.zeros_like(p.data)
    fused = m.encode(collate([_seq()], 16))
    lam = intensity_at(fused, np.full((1, 16), 0.3), m.params, m.cfg)
    assert lam.shape == (1, 16, vocab.n_indicative)
    np.testing.assert_allclose(lam.data, np.log(2.0), rtol=1e-6)


def test_pinned_rates(vocab):
    m = pinned_model(vocab, [2.0, 1.0, 0.5, 0.25])
    fused = m.encode(collate([_seq()], 16))
    lam = m.intensity(fused, np.zeros((1, 16)))
    np.testing.assert_allclose(lam.data[0, 3], [2.0, 1.0, 0.5, 0.25], rtol=1e-6)


def test_causality_bit_exact(vocab):
    m = _model(vocab, seed=1)
    num = ([0, 0, 0], [0.2, 1.0, 3.0], [30.0, 31.0, 29.0], [1, 2, 3])
    a = _seq(numeric=num)
    b = _seq(types=(4, 6, 5, 5, 7, 7), times=(0, 0.5, 1.2, 1.9, 3.0, 3.1), numeric=([0, 0, 0], [0.2, 1.0, 2.0], [30.0, 31.0, 22.0], [1, 2, 0]))
    fa = m.encode(collate([a], 16)).data
    fb = m.encode(collate([b], 16)).data
    # positions 0..2 share events 1..3 and numeric history up to t=1.2
    assert np.array_equal(fa[0, :3], fb[0, :3])
    assert not np.array_equal(fa[0, 3], fb[0, 3])


def test_batching_matches_single(vocab):
    m = _model(vocab, seed=2)
    s1, s2 = _seq(), _seq(types=(5, 5, 4), times=(0, 1, 2))
    both = m.encode(collate([s1, s2], 16)).data
    alone = m.encode(collate([s2], 16)).data
    np.testing.assert_allclose(both[1, :3], alone[0, :3], rtol=1e-5, atol=1e-6)


def test_rejects_bad_input(vocab):
    m = _model(vocab)
    empty = PatientSequence.from_events("p", [], [], max_len=16)
    with pytest.raises(DataError):
        collate([empty])
    long = PatientSequence.from_events("p", [4] * 20, np.arange(20.0), max_len=20)
    with pytest.raises(DataError):
        m.encode(collate([long]))
    bad = _seq(numeric=([0], [0.5], [30.0], [5]))
    with pytest.raises(DataError):
        collate([bad])
    with pytest.raises(ValueError):
        m.intensity(m.encode(collate([_seq()], 16)), np.full((1, 16), -1.0))


def test_static_injection_changes_first_state(vocab):
    m = _model(vocab, seed=3)
    f1 = m.encode(collate([_seq(static=(1, 2, 4))], 16)).data
    f0 = m.encode(collate([_seq(static=(0, 0, 0))], 16)).data
    for k in ("static_gender", "static_race", "static_age"):
        m.params[k].data[0] = 0.0
    fz = m.encode(collate([_seq(static=(0, 0, 0))], 16)).data
    assert not np.array_equal(f1[0, 0], fz[0, 0])
    assert not np.array_equal(f0[0, 0], fz[0, 0])


def test_numeric_null_vector_and_identity(vocab):
    m = _model(vocab, seed=4)
    fused = m.encode(collate([_seq()], 16)).data
    tail = fused[0, :, -m.cfg.d_num :]
    np.testing.assert_array_equal(tail, np.broadcast_to(m.params["num_null"].data, tail.shape))
    num = ([0, 0], [0.7, 2.0], [30.0, 31.0], [1, 4])
    a = m.encode(collate([_seq(numeric=num)], 16)).data
    b = m.encode(collate([_seq(numeric=num)], 16)).data
    assert np.array_equal(a, b)
    # first position precedes every numeric event
    np.testing.assert_array_equal(a[0, 0, -m.cfg.d_num :], m.params["num_null"].data)
    assert not np.array_equal(a[0, 2, -m.cfg.d_num :], m.params["num_null"].data)


def test_numeric_substream_causal(vocab):
    m = _model(vocab, seed=5)
    a = m.encode(collate([_seq(numeric=([0], [0.7], [30.0], [1]))], 16)).data
    b = m.encode(collate([_seq(numeric=([0, 0], [0.7, 3.0], [30.0, 40.0], [1, 4]))], 16)).data
    assert np.array_equal(a[0, :5], b[0, :5])


def test_concept_map(tmp_path, vocab):
    (tmp_path / "map.csv").write_text("concept,topic\na,t1\nb,t1\nb,t2\nzz,t1\n")
    (tmp_path / "topics.csv").write_text("topic,v1,v2\nt1,1.0,2.0\nt2,3.0,-2.0\n")
    cmap = ConceptEmbeddingMap.load(tmp_path / "map.csv", tmp_path / "topics.csv")
    np.testing.assert_array_equal(cmap.resolve("a"), [1.0, 2.0])
    np.testing.assert_array_equal(cmap.resolve("b"), [2.0, 0.0])
    np.testing.assert_array_equal(cmap.resolve("c"), [0.0, 0.0])
    tab = cmap.table(vocab)
    assert tab.shape == (vocab.size, 2)
    h = ad.Tensor(np.ones((1, 3, 5)))
    out = fuse_concept_embeddings(h, np.array([[4, 5, 6]]), tab)
    np.testing.assert_array_equal(out.data[0, :, 5:], [[1, 2], [2, 0], [0, 0]])
    with pytest.raises(ad.ShapeError):
        fuse_concept_embeddings(ad.Tensor(np.ones((1, 2, 5))), np.array([[4, 5, 6]]), tab)
    m = TPPModel.for_vocab(vocab, concept_map=cmap, **{**SMALL, "d_ext": 2})
    fused = m.encode(collate([_seq()], 16)).data
    np.testing.assert_array_equal(fused[0, 0, m.cfg.d_model : m.cfg.d_model + 2], [1.0, 2.0])


def test_intensity_positive_and_continuous(vocab):
    m = _model(vocab, seed=6)
    fused = m.encode(collate([_seq()], 16))
    with ad.precision(np.float64):
        f64 = ad.Tensor(fused.data)
        dt = np.random.default_rng(0).uniform(0, 5, (1, 16))
        a = m.intensity(f64, dt).data
        b = m.intensity(f64, dt + 1e-6).data
    assert (a > 0).all()
    assert np.abs(a - b).max() < 1e-4


def test_order_sensitivity(vocab):
    m = _model(vocab, seed=7)
    a = _seq(types=(4, 5, 6, 7), times=(0, 1, 2, 3))
    b = _seq(types=(4, 6, 5, 7), times=(0, 1, 2, 3))
    fa, fb = m.encode(collate([a], 16)), m.encode(collate([b], 16))
    la = m.intensity(fa, np.full((1, 16), 0.5)).data[0, 3]
    lb = m.intensity(fb, np.full((1, 16), 0.5)).data[0, 3]
    assert not np.array_equal(la, lb)


def test_intensity_grad_check(vocab):
    m = _model(vocab, seed=8, layers=1)
    batch = collate([_seq()], 16)
    with ad.precision(np.float64):
        fused = m.encode(batch).data

    def f(w2):
        params = dict(m.params, head_w2=w2)
        return ad.sum(intensity_at(ad.Tensor(fused), np.full((1, 16), 0.4), params, m.cfg))

    assert ad.grad_check(f, m.params["head_w2"].data) < 1e-3


def test_save_load_roundtrip(tmp_path, vocab):
    m = _model(vocab, seed=9)
    m.save(tmp_path / "m.ptpp", {"epoch": 3})
    back, meta = TPPModel.load(tmp_path / "m.ptpp")
    assert meta["epoch"] == 3 and back.cfg == m.cfg
    for k in m.params:
        assert np.array_equal(m.params[k].data, back.params[k].data)
    batch = collate([_seq()], 16)
    assert np.array_equal(m.encode(batch).data, back.encode(batch).data)
