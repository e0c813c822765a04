import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropattention.data import (
    CLS,
    PAD,
    UNK,
    ClassificationExample,
    DataFormatError,
    LabelMap,
    PairExample,
    TaggingExample,
    Vocab,
    bag_of_words_oracle,
    iterate_batches,
    load_conll,
    load_dataset,
    load_pair_tsv,
    load_tsv_classification,
    make_batch,
    synth_shortcut_dataset,
    tokenize,
    write_conll,
    write_pair_tsv,
    write_tsv_classification,
)
from dropattention.errors import ConfigError


def test_tokenize_lowercases_and_splits():
    assert tokenize("The  Cat\tsat ") == ["the", "cat", "sat"]


def test_tsv_loader(tmp_path):
    f = tmp_path / "a.tsv"
    f.write_text("A good film\tpos\n\nbad\tneg\n", encoding="utf-8")
    exs = load_tsv_classification(f)
    assert exs == [ClassificationExample(("a", "good", "film"), "pos"), ClassificationExample(("bad",), "neg")]


def test_tsv_error_names_line(tmp_path):
    f = tmp_path / "a.tsv"
    f.write_text("fine\tpos\nno label here\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=r"a\.tsv:2") as info:
        load_tsv_classification(f)
    assert info.value.lineno == 2


def test_pair_loader_and_error(tmp_path):
    f = tmp_path / "p.tsv"
    f.write_text("a man sleeps\ta person rests\tentailment\n", encoding="utf-8")
    assert load_pair_tsv(f) == [PairExample(("a", "man", "sleeps"), ("a", "person", "rests"), "entailment")]
    f.write_text("a\tb\tneutral\nonly two\tfields\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=":2"):
        load_pair_tsv(f)


def test_conll_loader_uses_last_column(tmp_path):
    f = tmp_path / "t.conll"
    f.write_text("-DOCSTART- -X- O O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\n\nPeter NNP B-NP B-PER\n",
                 encoding="utf-8")
    assert load_conll(f) == [TaggingExample(("eu", "rejects"), ("B-ORG", "O")),
                             TaggingExample(("peter",), ("B-PER",))]


def test_conll_missing_tag(tmp_path):
    f = tmp_path / "t.conll"
    f.write_text("a O\nb\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=":2"):
        load_conll(f)


def test_missing_file_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset("cls", tmp_path / "nope.tsv")
    with pytest.raises(ConfigError):
        load_dataset("mt", tmp_path / "nope.tsv")


def test_round_trips(tmp_path):
    cls = [ClassificationExample(("x", "y"), "a"), ClassificationExample(("z",), "b")]
    write_tsv_classification(tmp_path / "c.tsv", cls)
    assert load_tsv_classification(tmp_path / "c.tsv") == cls
    tag = [TaggingExample(("x", "y"), ("B-LOC", "I-LOC")), TaggingExample(("z",), ("O",))]
    write_conll(tmp_path / "t.conll", tag)
    assert load_conll(tmp_path / "t.conll") == tag
    pairs = [PairExample(("p",), ("q", "r"), "neutral")]
    write_pair_tsv(tmp_path / "p.tsv", pairs)
    assert load_pair_tsv(tmp_path / "p.tsv") == pairs


def test_vocab_reserved_ids_and_ranking():
    v = Vocab.build([["b", "a", "c"], ["a", "b"], ["a"]])
    assert v.itos[:3] == ["<pad>", "<unk>", "<cls>"]
    assert v.to_list() == ["a", "b", "c"]
    assert v.encode(["a", "zzz"]) == [3, UNK]


def test_vocab_min_freq_and_max_size():
    corpus = [["a", "a", "b", "c", "c", "c"]]
    assert Vocab.build(corpus, min_freq=2).to_list() == ["c", "a"]
    assert Vocab.build(corpus, max_size=4).to_list() == ["c"]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), max_size=6), max_size=8))
def test_vocab_is_order_independent(corpus):
    assert Vocab.build(corpus) == Vocab.build(list(reversed(corpus)))


def test_labelmap_sorted_and_strict():
    lm = LabelMap(["pos", "neg", "pos"])
    assert lm.names == ["neg", "pos"]
    with pytest.raises(ValueError):
        lm.encode("neutral")


def test_make_batch_pads_and_prepends_cls():
    v = Vocab.build([["a", "b"]])
    exs = [ClassificationExample(("a", "b"), "x"), ClassificationExample(("b",), "y")]
    b = make_batch("cls", exs, v, LabelMap(["x", "y"]), cls_token=True)
    np.testing.assert_array_equal(b.ids, [[CLS, 3, 4], [CLS, 4, PAD]])
    np.testing.assert_array_equal(b.mask, [[1, 1, 1], [1, 1, 0]])
    np.testing.assert_array_equal(b.labels, [0, 1])


def test_make_batch_truncates(rng):
    v = Vocab.build([["a"]])
    b = make_batch("cls", [ClassificationExample(("a",) * 10, "x")], v, LabelMap(["x"]), max_len=4)
    assert b.ids.shape == (1, 4)


def test_iterate_batches_covers_every_example_once(rng):
    v = Vocab.build([["a"]])
    exs = [ClassificationExample(("a",) * (i % 3 + 1), str(i % 2)) for i in range(23)]
    sizes = [len(b) for b in iterate_batches("cls", exs, v, LabelMap(["0", "1"]), 5, rng)]
    assert sizes == [5, 5, 5, 5, 3]


def test_synthetic_is_seed_deterministic():
    a = synth_shortcut_dataset(50, seed=3)
    b = synth_shortcut_dataset(50, seed=3)
    c = synth_shortcut_dataset(50, seed=4)
    assert a == b
    assert a.train != c.train


def test_synthetic_signal_is_exact_on_every_split():
    s = synth_shortcut_dataset(400, seed=1)
    for split in (s.train, s.dev, s.test):
        assert all(bag_of_words_oracle(ex) == ex.label for ex in split)


def cue_agreement(examples):
    hits = [("sc_pos" in ex.tokens) == (ex.label == "pos") for ex in examples]
    return float(np.mean(hits))


def test_shortcut_reliability_on_train_and_test():
    s = synth_shortcut_dataset(4000, seed=0, shortcut_reliability=0.9, n_test=4000)
    assert abs(cue_agreement(s.train) - 0.9) < 0.02
    assert abs(cue_agreement(s.test) - 0.5) < 0.03


def test_synthetic_shapes_and_validation():
    s = synth_shortcut_dataset(10, l=8, k=3, seed=0, n_dev=2, n_test=3)
    assert (len(s.train), len(s.dev), len(s.test)) == (10, 2, 3)
    assert all(len(ex.tokens) == 8 for ex in s.train)
    with pytest.raises(ConfigError, match="reliability"):
        synth_shortcut_dataset(10, shortcut_reliability=0.4)
    with pytest.raises(ConfigError, match="data.k"):
        synth_shortcut_dataset(10, k=2)
