import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visaware import tensor as T
from visaware.data import SyntheticConfig, generate_synthetic_corpus
from visaware.embedding import (EmbeddingConfig, EmbeddingTrainConfig, encode_image, encode_text,
                                init_embedding_model, mine_hard_negative, mine_hard_negatives,
                                train_embedding, triplet_loss, weldon_pool)
from visaware.errors import (ContractError, EmptyInputError, IngestionError, NoNegativeError,
                             PoolingConfigError, VocabularyError)
from visaware.tensor import Tensor

CFG = EmbeddingConfig(vocab_size=30, d_t=12, d_s=8, d_img=10, k_plus=3, k_minus=2, beta=0.5)


def weldon_oracle(regions, k_plus, k_minus, beta):
    """Per channel with sorted() and a plain Python accumulation."""
    R, d = regions.shape
    out = []
    for c in range(d):
        col = [float(v) for v in regions[:, c]]
        top = sorted(col, reverse=True)[:k_plus]
        s = top[0]
        for v in top[1:]:
            s = s + v
        value = s / k_plus
        if k_minus:
            bottom = sorted(col)[:k_minus]
            b = bottom[0]
            for v in bottom[1:]:
                b = b + v
            value = value + beta * (b / k_minus)
        out.append(value)
    return np.array(out)


def exhaustive_hard_negative(anchor, candidates, forbidden):
    best, best_sim = None, None
    for i, c in enumerate(candidates):
        if i in forbidden:
            continue
        sim = float(np.dot(c, anchor))
        if best is None or sim > best_sim:
            best, best_sim = i, sim
    return best


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def model():
    return init_embedding_model(CFG, seed=3)


# -- text path ---------------------------------------------------------------------

def test_text_embedding_is_unit_norm(model, rng):
    for length in (1, 2, 7, 64):
        toks = list(rng.integers(0, CFG.vocab_size, length))
        assert abs(np.linalg.norm(encode_text(toks, model.params, CFG).data) - 1.0) < 1e-6


def test_text_embedding_is_deterministic(model):
    a = encode_text([4, 5, 6], model.params, CFG).data
    b = encode_text([4, 5, 6], model.params, CFG).data
    assert a.tobytes() == b.tobytes()


def test_word_order_changes_the_embedding(model):
    a = encode_text([3, 9, 14, 21, 7], model.params, CFG).data
    b = encode_text([7, 21, 3, 14, 9], model.params, CFG).data
    assert np.max(np.abs(a - b)) > 1e-6


def test_text_errors(model):
    with pytest.raises(EmptyInputError):
        encode_text([], model.params, CFG)
    with pytest.raises(VocabularyError):
        encode_text([1, CFG.vocab_size], model.params, CFG)


def test_batch_padding_does_not_leak(model):
    single = encode_text([5, 6], model.params, CFG).data
    batch = model.embed_texts([[5, 6], [1, 2, 3, 4, 5, 6, 7]])
    np.testing.assert_allclose(batch[0], single, atol=1e-12)


# -- weldon pooling ----------------------------------------------------------------

def test_weldon_max_plus_min():
    out = weldon_pool(np.array([[3.0], [1.0], [2.0]]), k_plus=1, k_minus=1, beta=1.0)
    np.testing.assert_array_equal(out.data, [4.0])


def test_weldon_full_top_is_mean(rng):
    x = rng.standard_normal((9, 4))
    np.testing.assert_allclose(weldon_pool(x, k_plus=9, k_minus=0).data, x.mean(axis=0), atol=1e-12)


def test_weldon_matches_sort_oracle(rng):
    x = rng.standard_normal((10, 8))
    np.testing.assert_array_equal(weldon_pool(x, 3, 3, 1.0).data, weldon_oracle(x, 3, 3, 1.0))


def test_weldon_batched_equals_per_item(rng):
    x = rng.standard_normal((4, 7, 3))
    batched = weldon_pool(x, 2, 3, 0.3).data
    for i in range(4):
        np.testing.assert_array_equal(batched[i], weldon_oracle(x[i], 2, 3, 0.3))


def test_weldon_config_errors():
    with pytest.raises(PoolingConfigError):
        weldon_pool(np.zeros((4, 2)), k_plus=3, k_minus=2)
    with pytest.raises(PoolingConfigError):
        weldon_pool(np.zeros((4, 2)), k_plus=0, k_minus=1)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.data())
def test_weldon_oracle_property(R, d, data):
    k_plus = data.draw(st.integers(1, R))
    k_minus = data.draw(st.integers(0, R - k_plus))
    beta = data.draw(st.floats(-2, 2, allow_nan=False))
    seed = data.draw(st.integers(0, 2 ** 31))
    x = np.round(np.random.default_rng(seed).standard_normal((R, d)), data.draw(st.sampled_from([1, 8])))
    np.testing.assert_array_equal(weldon_pool(x, k_plus, k_minus, beta).data, weldon_oracle(x, k_plus, k_minus, beta))


# -- image path --------------------------------------------------------------------

def test_image_embedding_is_unit_norm(model, rng):
    out = encode_image(rng.standard_normal((16, CFG.d_img)), model.params, CFG).data
    assert abs(np.linalg.norm(out) - 1.0) < 1e-6


def test_image_embedding_scale_invariant_without_bias(model, rng):
    params = dict(model.params)
    params["image.proj.b"] = Tensor(np.zeros(CFG.d_s))
    x = rng.standard_normal((12, CFG.d_img))
    a = encode_image(x, params, CFG).data
    b = encode_image(5.0 * x, params, CFG).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_two_identical_regions_pool_to_twice_the_row(rng):
    row = rng.standard_normal(CFG.d_img)
    regions = np.stack([row, row])
    np.testing.assert_array_equal(weldon_pool(regions, 1, 1, 1.0).data, 2 * row)
    cfg = EmbeddingConfig(vocab_size=5, d_img=CFG.d_img, d_s=4, k_plus=1, k_minus=1)
    params = init_embedding_model(cfg, 0).params
    expected = unit(2 * row @ params["image.proj.w"].data + params["image.proj.b"].data)
    np.testing.assert_allclose(encode_image(regions, params, cfg).data, expected, atol=1e-12)


# -- triplet loss ------------------------------------------------------------------

def _triple_with_dots(xy, xz):
    """Unit vectors in R^3 with x.y and x.z as given."""
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([xy, np.sqrt(1 - xy ** 2), 0.0])
    z = np.array([xz, 0.0, np.sqrt(1 - xz ** 2)])
    return x, y, z


def test_triplet_margin_satisfied():
    assert triplet_loss(*_triple_with_dots(0.9, 0.5), alpha=0.2).item() == 0.0


def test_triplet_hand_value():
    assert abs(triplet_loss(*_triple_with_dots(0.5, 0.9), alpha=0.2).item() - 0.6) <= 1e-12


def test_triplet_degenerate_equals_alpha():
    x = unit([1.0, 2.0, 2.0])
    for alpha in (0.0, 0.2, 1.5):
        assert triplet_loss(x, x, x, alpha).item() == pytest.approx(alpha, abs=1e-12)


def test_triplet_rejects_non_unit_inputs():
    x = np.array([1.0, 0.0])
    with pytest.raises(ContractError):
        triplet_loss(x, np.array([2.0, 0.0]), x)
    with pytest.raises(ContractError):
        triplet_loss(x, x, x, alpha=-0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0, 2))
def test_triplet_nonneg_zero_iff_margin_met_and_rotation_invariant(seed, alpha):
    r = np.random.default_rng(seed)
    x, y, z = (unit(r.standard_normal(5)) for _ in range(3))
    loss = triplet_loss(x, y, z, alpha).item()
    assert loss >= 0
    assert (loss == 0) == (x @ y - x @ z >= alpha)
    q, _ = np.linalg.qr(r.standard_normal((5, 5)))
    rotated = triplet_loss(q @ x, q @ y, q @ z, alpha).item()
    assert rotated == pytest.approx(loss, abs=1e-12)


def test_triplet_subgradient_is_zero_when_margin_met():
    x, y, z = (Tensor(v, requires_grad=True) for v in _triple_with_dots(0.9, 0.5))
    triplet_loss(x, y, z, 0.2).backward()
    for t in (x, y, z):
        np.testing.assert_array_equal(t.grad, np.zeros(3))


# -- hard negative mining ----------------------------------------------------------

def test_hard_negative_argmax():
    anchor = np.array([1.0, 0.0])
    cands = np.array([[0.1, 0.99], [0.9, 0.43], [0.4, 0.91]])
    assert mine_hard_negative(anchor, cands) == 1


def test_hard_negative_tie_goes_to_lowest_index():
    anchor = np.array([1.0, 0.0])
    assert mine_hard_negative(anchor, np.array([[0.9, 0.1], [0.9, -0.1]])) == 0


def test_hard_negative_respects_forbidden():
    anchor = np.array([1.0, 0.0])
    cands = np.array([[0.1, 0.0], [0.9, 0.0], [0.4, 0.0]])
    assert mine_hard_negative(anchor, cands, forbidden={1}) == 2
    with pytest.raises(NoNegativeError):
        mine_hard_negative(anchor, cands, forbidden={0, 1, 2})


def test_hard_negative_matches_exhaustive_scan(rng):
    for _ in range(100):
        anchor = unit(rng.standard_normal(16))
        cands = np.round(rng.standard_normal((32, 16)), 1)  # coarse values create ties
        forbidden = set(rng.choice(32, size=int(rng.integers(0, 5)), replace=False).tolist())
        assert mine_hard_negative(anchor, cands, forbidden) == exhaustive_hard_negative(anchor, cands, forbidden)


def test_batched_mining_matches_single(rng):
    sims = np.round(rng.standard_normal((32, 32)), 1)
    forbidden = np.eye(32, dtype=bool)
    forbidden[3] = True
    got = mine_hard_negatives(sims, forbidden)
    assert got[3] == -1
    for i in range(32):
        if i != 3:
            allowed = {j for j in range(32) if not forbidden[i, j]}
            assert got[i] == max(sorted(allowed), key=lambda j: (sims[i, j], -j))


# -- training ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    cfg = SyntheticConfig(n_topics=4, words_per_topic=10, n_pairs=240, n_eval_pairs=10, regions=8, d_img=16)
    corpus = generate_synthetic_corpus(cfg, seed=5)
    vocab = corpus.vocab()
    tids = [t for t, _ in corpus.pairs]
    iids = [i for _, i in corpus.pairs]
    texts = [vocab.encode(corpus.texts[t]) for t in tids]
    images = np.stack([corpus.image_features[i] for i in iids])
    return vocab, texts, images, [(n, n) for n in range(len(tids))]


def _train(small_corpus, seed=0, epochs=10, **kw):
    vocab, texts, images, pairs = small_corpus
    cfg = EmbeddingConfig(vocab_size=len(vocab), d_t=16, d_s=16, d_img=16, **kw)
    return train_embedding(texts, images, pairs, cfg, EmbeddingTrainConfig(epochs=epochs, seed=seed))


def test_training_reduces_loss(small_corpus):
    log = _train(small_corpus).log
    assert len(log) == 10
    assert log[-1]["loss"] < log[0]["loss"]


def test_training_is_bitwise_deterministic(small_corpus):
    a = _train(small_corpus, seed=7, epochs=2)
    b = _train(small_corpus, seed=7, epochs=2)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes(), k


def test_symmetric_variant_trains(small_corpus):
    log = _train(small_corpus, epochs=3, symmetric=True).log
    assert log[-1]["loss"] < log[0]["loss"]


def test_training_rejects_dangling_pairs(small_corpus):
    vocab, texts, images, _ = small_corpus
    cfg = EmbeddingConfig(vocab_size=len(vocab), d_img=16)
    with pytest.raises(IngestionError):
        train_embedding(texts, images, [(0, len(images))], cfg, EmbeddingTrainConfig(epochs=1))
    with pytest.raises(IngestionError):
        train_embedding(texts, images, [], cfg, EmbeddingTrainConfig(epochs=1))


def test_zero_loss_when_text_reproduces_image():
    # reset gate forced shut (r = 0) makes the recurrence a pass-through, h = e;
    # each caption is one token whose embedding is its image's region row, and
    # both paths share one projection, so y == x and alpha = 0 gives zero loss.
    n, d = 6, 5
    r = np.random.default_rng(0)
    rows = r.standard_normal((n, d))
    images = np.stack([rows, rows], axis=1)           # R = 2 identical regions
    cfg = EmbeddingConfig(vocab_size=n, d_t=d, d_s=4, d_img=d, k_plus=2, k_minus=0, alpha=0.0)
    model = init_embedding_model(cfg, 0)
    p = model.params
    p["text.embed"].assign(rows)
    p["text.sru0.b_r"].assign(np.full(d, -1000.0))
    p["text.proj.w"].assign(p["image.proj.w"].data)
    p["text.proj.b"].assign(p["image.proj.b"].data)
    before = {k: v.data.copy() for k, v in p.items()}
    np.testing.assert_array_equal(model.embed_texts([[i] for i in range(n)]), model.embed_images(images))
    train_embedding([[i] for i in range(n)], images, [(i, i) for i in range(n)], cfg,
                    EmbeddingTrainConfig(epochs=2, batch_size=3), model=model)
    assert all(rec["loss"] == 0.0 for rec in model.log)
    for k, v in p.items():
        np.testing.assert_array_equal(v.data, before[k])
