import numpy as np
import pytest

from dropattention import tensor as T
from dropattention.attention import DropContext, Encoder
from dropattention.data import Batch
from dropattention.heads import Classifier, EntailmentModel, Tagger, entailment_features, pool
from dropattention.tensor import ShapeError, Tensor

from helpers import check_grads


def small_encoder(rng, vocab=12, d=4, dtype=np.float64):
    return Encoder(vocab, d, 6, 2, 1, 16, rng, dtype)


def batch(rng, b=2, l=5, vocab=12, pad_last=True):
    ids = rng.integers(3, vocab, size=(b, l))
    mask = np.ones((b, l), bool)
    if pad_last:
        ids[-1, -2:] = 0
        mask[-1, -2:] = False
    return ids, mask


def test_pool_examples():
    H = Tensor([[1.0, 5.0], [3.0, 2.0]])
    np.testing.assert_array_equal(pool(H, "max").data, [3.0, 5.0])
    np.testing.assert_array_equal(pool(H, "mean").data, [2.0, 3.5])
    np.testing.assert_array_equal(pool(H, "first").data, [1.0, 5.0])


def test_pool_ignores_padding_rows():
    H = Tensor([[1.0, 5.0], [3.0, 2.0], [100.0, 100.0]])
    m = np.array([True, True, False])
    np.testing.assert_array_equal(pool(H, "max", m).data, [3.0, 5.0])
    np.testing.assert_array_equal(pool(H, "mean", m).data, [2.0, 3.5])


def test_pool_rejects_unknown_and_all_padding():
    with pytest.raises(ValueError):
        pool(Tensor(np.ones((2, 2))), "median")
    with pytest.raises(ValueError):
        pool(Tensor(np.ones((2, 2))), "max", np.array([False, False]))


def test_entailment_features_example():
    f = entailment_features(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(f.data, [1, 2, 3, 4, -2, -2, 3, 8])


def test_entailment_features_swap_symmetry(rng):
    u, v = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    a = entailment_features(u, v).data
    b = entailment_features(v, u).data
    d = 5
    np.testing.assert_array_equal(a[:, :d], b[:, d:2 * d])
    np.testing.assert_array_equal(a[:, 2 * d:3 * d], -b[:, 2 * d:3 * d])
    np.testing.assert_array_equal(a[:, 3 * d:], b[:, 3 * d:])
    with pytest.raises(ShapeError):
        entailment_features(np.ones(3), np.ones(4))


def test_classifier_output_shapes(rng):
    ids, mask = batch(rng)
    for pooling in ("max", "mean", "first"):
        model = Classifier(small_encoder(rng, dtype=np.float32), 3, rng, pooling)
        out = model.logits(Batch(ids, mask, np.zeros(2, np.int64)), DropContext())
        assert out.shape == (2, 3)


def test_tagger_padding_contributes_no_loss(rng):
    model = Tagger(small_encoder(rng), 4, rng)
    ids, mask = batch(rng)
    y = rng.integers(0, 4, size=ids.shape)
    y2 = y.copy()
    y2[~mask] = (y2[~mask] + 1) % 4
    ctx = DropContext()
    assert model.loss(Batch(ids, mask, y), ctx).item() == model.loss(Batch(ids, mask, y2), ctx).item()


def test_entailment_model_runs(rng):
    model = EntailmentModel(small_encoder(rng), 3, rng)
    ids, mask = batch(rng)
    ids2, mask2 = batch(rng, l=4)
    out = model.logits(Batch(ids, mask, np.zeros(2, np.int64), ids2, mask2), DropContext())
    assert out.shape == (2, 3)


def randomize(model, rng):
    for t in model.named().values():
        t.data = rng.uniform(-0.8, 0.8, t.shape)


@pytest.mark.parametrize("kind", ["cls", "tag", "nli"])
def test_head_gradients_match_finite_differences(rng, kind):
    enc = small_encoder(rng)
    ids, mask = batch(rng, l=4)
    if kind == "cls":
        model = Classifier(enc, 3, rng, "mean")
        b = Batch(ids, mask, np.array([0, 2]))
    elif kind == "tag":
        model = Tagger(enc, 3, rng)
        b = Batch(ids, mask, rng.integers(0, 3, size=ids.shape))
    else:
        model = EntailmentModel(enc, 3, rng, hidden=5, pooling="mean")
        ids2, mask2 = batch(rng, l=3)
        b = Batch(ids, mask, np.array([1, 2]), ids2, mask2)
    randomize(model, rng)
    params = list(model.named().values())
    assert check_grads(lambda: model.loss(b, DropContext()), params) < 1e-4


def test_predict_is_argmax(rng):
    model = Classifier(small_encoder(rng, dtype=np.float32), 2, rng)
    ids, mask = batch(rng)
    b = Batch(ids, mask, np.zeros(2, np.int64))
    np.testing.assert_array_equal(model.predict(b, DropContext()), model.logits(b, DropContext()).data.argmax(-1))
