import numpy as np
import numpy.testing as npt
import pytest

from stagedasr import model as M
from stagedasr import tensor as T
from stagedasr.layers import ProjectionHead, SequenceBatch
from stagedasr.tensor import Tensor


def toy_batch(rng, b=2, t=16, d=3, lengths=(16, 11)):
    return SequenceBatch(Tensor(rng.normal(size=(b, t, d))),
                         np.array(lengths))


def build_small_encoder(rng, pools=True):
    enc = M.Encoder(3, 4)
    enc.add_lstm("enc.l1", rng)
    if pools:
        enc.add_pool("enc.pool1", 2)
    enc.add_lstm("enc.l2", rng)
    return enc


def test_encoder_forward_shapes_and_subsampling():
    rng = np.random.default_rng(1)
    enc = build_small_encoder(rng)
    out = enc.forward(toy_batch(rng), mode="infer")
    assert out.data.shape == (2, 8, 4)
    npt.assert_array_equal(out.lengths, np.array([8, 6]))
    assert out.subsampling == 2
    assert enc.overall_factor() == 2


def test_add_lstm_appends_with_hidden_input_dim():
    rng = np.random.default_rng(2)
    enc = build_small_encoder(rng)
    layer = enc.add_lstm("enc.l3", rng)
    assert layer.in_dim == 4
    assert enc.lstm_names() == ["enc.l1", "enc.l2", "enc.l3"]
    out = enc.forward(toy_batch(rng), mode="infer")
    assert out.data.shape == (2, 8, 4)


def test_add_lstm_preserves_existing_weights():
    rng = np.random.default_rng(3)
    enc = build_small_encoder(rng)
    before = {p.name: p.data.copy() for p in enc.parameters()}
    enc.add_lstm("enc.l3", rng)
    for p in enc.parameters():
        if p.name in before:
            npt.assert_array_equal(p.data, before[p.name])


def test_add_lstm_rejects_dim_breaking_insert():
    rng = np.random.default_rng(4)
    enc = build_small_encoder(rng)
    # enc.l1 reads the 3-dim input; inserting a hidden-dim layer before
    # it would silently break the stack
    with pytest.raises(ValueError, match="enc.l1"):
        enc.add_lstm("enc.l0", rng, index=0)


def test_pool_morphs():
    rng = np.random.default_rng(5)
    enc = build_small_encoder(rng)
    enc.add_pool("enc.float", 2, index=2)
    assert enc.overall_factor() == 4
    enc.set_pool_factor("enc.float", 4)
    assert enc.overall_factor() == 8
    enc.remove_pool("enc.float")
    assert enc.overall_factor() == 2
    with pytest.raises(ValueError, match="no op"):
        enc.remove_pool("enc.float")
    with pytest.raises(ValueError, match="not a pool"):
        enc.remove_pool("enc.l1")


def test_pool_morphs_keep_weights_bit_identical():
    rng = np.random.default_rng(6)
    enc = build_small_encoder(rng)
    before = {p.name: p.data.copy() for p in enc.parameters()}
    enc.add_pool("enc.tmp", 2)
    enc.set_pool_factor("enc.tmp", 4)
    enc.remove_pool("enc.tmp")
    for p in enc.parameters():
        npt.assert_array_equal(p.data, before[p.name])


def test_duplicate_names_rejected():
    rng = np.random.default_rng(7)
    enc = build_small_encoder(rng)
    with pytest.raises(ValueError, match="already"):
        enc.add_lstm("enc.l1", rng)


def test_encoder_description_round_trip():
    rng = np.random.default_rng(8)
    enc = build_small_encoder(rng)
    enc.add_pool("enc.float", 4)
    desc = enc.describe()
    rebuilt = M.Encoder.from_description(desc)
    assert rebuilt.describe() == desc
    assert [p.name for p in rebuilt.parameters()] == \
        [p.name for p in enc.parameters()]
    for p, q in zip(enc.parameters(), rebuilt.parameters()):
        assert p.data.shape == q.data.shape


def test_bn_op_normalizes_and_round_trips():
    rng = np.random.default_rng(14)
    enc = build_small_encoder(rng)
    bn = enc.add_bn("enc.norm2")
    assert bn.dim == 4
    assert [p.name for p in enc.parameters()][-2:] == [
        "enc.norm2.gamma", "enc.norm2.beta"]
    assert enc.bn_items() == [("enc.norm2", bn)]
    b = toy_batch(rng)
    out = enc.forward(b, mode="train")
    valid = out.time_mask()[:, :, None]
    vals = out.data.data[np.broadcast_to(valid, out.data.shape)]
    vals = vals.reshape(-1, 4)
    npt.assert_allclose(vals.mean(axis=0), 0.0, atol=1e-9)
    npt.assert_allclose(vals.std(axis=0), 1.0, atol=1e-4)
    desc = enc.describe()
    rebuilt = M.Encoder.from_description(desc)
    assert rebuilt.describe() == desc
    assert rebuilt.bn_items()[0][1].dim == 4


def test_bn_infer_mode_uses_running_stats_only():
    rng = np.random.default_rng(15)
    enc = build_small_encoder(rng)
    enc.add_bn("enc.norm2")
    b = toy_batch(rng)
    # several train passes move the running stats
    for _ in range(3):
        enc.forward(b, mode="train")
    frozen = enc.bn_items()[0][1].running_mean.copy()
    a1 = enc.forward(b, mode="infer").data.data
    a2 = enc.forward(b, mode="eval").data.data
    npt.assert_array_equal(a1, a2)
    npt.assert_array_equal(enc.bn_items()[0][1].running_mean, frozen)


def test_dropout_only_in_train_mode():
    rng = np.random.default_rng(9)
    enc = build_small_encoder(rng)
    b = toy_batch(rng)
    a1 = enc.forward(b, mode="infer", dropout=0.5).data.data
    a2 = enc.forward(b, mode="infer", dropout=0.5).data.data
    npt.assert_array_equal(a1, a2)
    t1 = enc.forward(b, mode="train", rng=np.random.default_rng(1),
                     dropout=0.5).data.data
    t2 = enc.forward(b, mode="train", rng=np.random.default_rng(2),
                     dropout=0.5).data.data
    assert np.any(t1 != t2)


def test_encoder_model_heads_and_extension():
    rng = np.random.default_rng(10)
    enc = build_small_encoder(rng)
    ext = M.Encoder(4, 4)
    ext.add_pool("bpe.pool1", 2)
    ext.add_lstm("bpe.l1", rng)
    em = M.EncoderModel(enc, ext,
                        base_head=ProjectionHead("head.base", 4, 6, rng),
                        top_head=ProjectionHead("head.top", 4, 9, rng))
    mid, top = em.encode(toy_batch(rng), mode="infer")
    assert mid.data.shape == (2, 8, 4)
    assert top.data.shape == (2, 4, 4)
    assert top.subsampling == 4
    base_lp = em.base_log_probs(mid)
    top_lp = em.top_log_probs(top)
    assert base_lp.shape == (2, 8, 6)
    assert top_lp.shape == (2, 4, 9)
    sums = np.exp(top_lp.data[0, 0]).sum()
    assert sums == pytest.approx(1.0, abs=1e-12)
    names = [p.name for p in em.parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("bpe.") for n in names)
    assert any(n.startswith("head.base") for n in names)


def test_encoder_model_without_extension_reuses_output():
    rng = np.random.default_rng(11)
    enc = build_small_encoder(rng)
    em = M.EncoderModel(enc, top_head=ProjectionHead("head.top", 4, 5, rng))
    mid, top = em.encode(toy_batch(rng), mode="infer")
    assert mid is top
    with pytest.raises(ValueError, match="base head"):
        em.base_log_probs(mid)


def test_encoder_model_description_round_trip():
    rng = np.random.default_rng(12)
    enc = build_small_encoder(rng)
    ext = M.Encoder(4, 4)
    ext.add_lstm("bpe.l1", rng)
    em = M.EncoderModel(enc, ext,
                        base_head=ProjectionHead("head.base", 4, 6, rng),
                        top_head=ProjectionHead("head.top", 4, 9, rng))
    desc = em.describe()
    rebuilt = M.EncoderModel.from_description(desc)
    assert rebuilt.describe() == desc
    assert [p.name for p in rebuilt.parameters()] == \
        [p.name for p in em.parameters()]


def test_features_to_batch_pads_and_orders():
    rng = np.random.default_rng(13)
    from stagedasr.data import Utterance
    utts = [Utterance("a", rng.normal(size=(5, 3)), "X"),
            Utterance("b", rng.normal(size=(3, 3)), "Y")]
    sb = M.features_to_batch(utts)
    assert sb.data.shape == (2, 5, 3)
    npt.assert_array_equal(sb.lengths, np.array([5, 3]))
    npt.assert_array_equal(sb.data.data[0], utts[0].features)
    npt.assert_array_equal(sb.data.data[1, :3], utts[1].features)
    npt.assert_array_equal(sb.data.data[1, 3:], np.zeros((2, 3)))
