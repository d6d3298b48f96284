import re
import shutil

import numpy as np
import pytest

from visaware.data import (NLI_LABELS, OUTSIDE_TAG, SyntheticConfig, Vocab, generate_synthetic_corpus,
                           load_corpus, majority_tag_accuracy, save_corpus)
from visaware.errors import ContractError, ParseError, ReferentialError, VocabularyError

SMALL = SyntheticConfig(n_topics=5, words_per_topic=12, n_pairs=120, n_eval_pairs=30, regions=6, d_img=8,
                        n_tag_train=40, n_tag_test=20, n_nli_train=30, n_nli_test=15)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(SMALL, seed=11)


def caption_topic(tokens):
    topics = {int(m.group(1)) for t in tokens if (m := re.fullmatch(r"t(\d+)w\d+", t))}
    assert len(topics) == 1
    return topics.pop()


def test_same_seed_gives_byte_identical_files(tmp_path):
    a = save_corpus(generate_synthetic_corpus(SMALL, seed=3), tmp_path / "a")
    b = save_corpus(generate_synthetic_corpus(SMALL, seed=3), tmp_path / "b")
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes(), f.name
    c = save_corpus(generate_synthetic_corpus(SMALL, seed=4), tmp_path / "c")
    assert (a / "images.txt").read_bytes() != (c / "images.txt").read_bytes()


def test_same_topic_images_are_more_similar():
    corpus = generate_synthetic_corpus(SyntheticConfig(n_pairs=600, n_eval_pairs=0), seed=0)
    topic = {i: caption_topic(corpus.texts[t]) for t, i in corpus.pairs}
    ids = list(topic)
    pooled = {i: corpus.image_features[i].mean(axis=0) for i in ids}
    r = np.random.default_rng(0)
    same, cross = [], []
    while len(same) < 1000 or len(cross) < 1000:
        a, b = r.choice(len(ids), 2, replace=False)
        va, vb = pooled[ids[a]], pooled[ids[b]]
        cos = va @ vb / np.linalg.norm(va) / np.linalg.norm(vb)
        bucket = same if topic[ids[a]] == topic[ids[b]] else cross
        if len(bucket) < 1000:
            bucket.append(cos)
    assert np.mean(same) > np.mean(cross) + 0.3


def test_majority_predictor_is_near_chance():
    corpus = generate_synthetic_corpus(seed=0)
    assert majority_tag_accuracy(corpus) <= 1 / 10 + 0.05


def test_tags_follow_caption_topic(corpus):
    for ex in corpus.tag_train + corpus.tag_test:
        k = caption_topic(ex.tokens)
        for tok, tag in zip(ex.tokens, ex.tags):
            assert tag == (f"T{k}" if tok.startswith("amb") else OUTSIDE_TAG)


def test_task_splits_use_disjoint_topic_words(corpus):
    train = {t for e in corpus.tag_train for t in e.tokens if not t.startswith("amb")}
    test = {t for e in corpus.tag_test for t in e.tokens if not t.startswith("amb")}
    assert train and test and not train & test


def test_nli_labels_match_topics(corpus):
    for ex in corpus.nli_train:
        kp, kh = caption_topic(ex.premise), caption_topic(ex.hypothesis)
        assert ex.label in NLI_LABELS
        assert (ex.label == "entailment") == (kp == kh)


def test_round_trip(tmp_path, corpus):
    save_corpus(corpus, tmp_path)
    assert load_corpus(tmp_path) == corpus


def test_dangling_pair_names_the_id(tmp_path, corpus):
    save_corpus(corpus, tmp_path)
    with open(tmp_path / "pairs.tsv", "a", encoding="utf-8") as fh:
        fh.write("s00000\tmissing_image_7\n")
    with pytest.raises(ReferentialError, match="missing_image_7"):
        load_corpus(tmp_path)


def test_wrong_arity_row_reports_line(tmp_path, corpus):
    save_corpus(corpus, tmp_path)
    path = tmp_path / "images.txt"
    lines = path.read_text(encoding="utf-8").split("\n")
    lines[3] = ",".join(lines[3].split(",")[:-1])
    path.write_text("\n".join(lines), encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_corpus(tmp_path)
    assert err.value.line == 4
    assert "images.txt:4" in str(err.value)


def test_malformed_tsv_line(tmp_path, corpus):
    save_corpus(corpus, tmp_path)
    with open(tmp_path / "texts.tsv", "a", encoding="utf-8") as fh:
        fh.write("no_tab_here\n")
    with pytest.raises(ParseError) as err:
        load_corpus(tmp_path)
    assert err.value.line == len(corpus.texts) + 1


def test_empty_caption_rejected(tmp_path, corpus):
    save_corpus(corpus, tmp_path)
    with open(tmp_path / "texts.tsv", "a", encoding="utf-8") as fh:
        fh.write("s99999\t \n")
    with pytest.raises(ParseError):
        load_corpus(tmp_path)


def test_vocab():
    v = Vocab(["b", "a", "b"])
    assert v.tokens == ["<pad>", "<bos>", "<eos>", "a", "b"]
    assert v.encode(["a", "b"]) == [3, 4]
    assert v.decode([4, 3]) == ["b", "a"]
    with pytest.raises(VocabularyError, match="zebra"):
        v.encode(["zebra"])


def test_generator_config_checks():
    with pytest.raises(ContractError):
        SyntheticConfig(n_topics=3)
    with pytest.raises(ContractError):
        SyntheticConfig(words_per_topic=8)
