import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factrank.errors import DataError, UsageError
from factrank.encoders import (
    PAD_ID,
    UNK_ID,
    EncoderTrainConfig,
    LSTMParams,
    RelationClassifier,
    SourceClassifier,
    Vocabulary,
    encode_batch,
    load_classifier,
    lstm_forward,
    lstm_hidden,
    predict_relation,
    predict_relation_batch,
    predict_source,
    relation_accuracy,
    save_classifier,
    source_accuracy,
    train_relation_classifier,
    train_source_classifier,
)
from factrank.kb import AnswerSource, Relation
from factrank.numerics import Tape
from gradcheck import check_grads

RELATION_KEYWORD = {r: r.value.lower() for r in Relation}


def _planted_relation_pairs(per_relation, seed, fillers=("what", "is", "the", "item")):
    """Questions with one keyword deterministically tied to the relation."""
    rng = np.random.default_rng(seed)
    pairs = []
    for r in Relation:
        for _ in range(per_relation):
            tokens = [RELATION_KEYWORD[r]] + [fillers[rng.integers(len(fillers))] for _ in range(3)]
            rng.shuffle(tokens)
            pairs.append((" ".join(tokens), r))
    return pairs


def _planted_source_pairs(n, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        src = AnswerSource.IMAGE if i % 2 == 0 else AnswerSource.KNOWLEDGE_BASE
        cue = "shown" if src is AnswerSource.IMAGE else "known"
        tokens = [cue, "what", "is", "that"]
        rng.shuffle(tokens)
        pairs.append((" ".join(tokens), src))
    return pairs


# ----------------------------------------------------------------------
# vocabulary
# ----------------------------------------------------------------------


def test_vocabulary_build_is_contiguous_and_reserved():
    vocab = Vocabulary.build(["the cat", "a cat sat"])
    assert vocab.tokens[PAD_ID] == "<pad>"
    assert vocab.tokens[UNK_ID] == "<unk>"
    assert sorted(vocab.index.values()) == list(range(len(vocab)))


def test_vocabulary_unknown_maps_to_unk():
    vocab = Vocabulary.build(["cat"])
    assert vocab.encode("dog cat") == [UNK_ID, vocab.index["cat"]]


def test_vocabulary_truncates_at_max_tokens():
    vocab = Vocabulary.build(["a b c d e"])
    assert len(vocab.encode("a b c d e", max_tokens=3)) == 3


def test_encode_batch_pads_and_reports_lengths():
    vocab = Vocabulary.build(["a b", "c"])
    ids, lengths = encode_batch(vocab, ["a b", "c"], 30)
    assert ids.shape == (2, 2)
    assert list(lengths) == [2, 1]
    assert ids[1, 1] == PAD_ID


def test_encode_batch_empty_question_rejected():
    vocab = Vocabulary.build(["a"])
    with pytest.raises(UsageError):
        encode_batch(vocab, ["..."], 30)


# ----------------------------------------------------------------------
# lstm
# ----------------------------------------------------------------------


def test_lstm_zero_weights_gives_zero_hidden():
    params = LSTMParams.init(np.random.default_rng(0), 6, 3, 4)
    for t in params.named_params().values():
        t.values[...] = 0.0
    out = lstm_forward(Tape(), params, [1, 2, 3])
    np.testing.assert_array_equal(out.values, np.zeros((1, 4)))


def test_lstm_sequence_length_changes_state():
    params = LSTMParams.init(np.random.default_rng(1), 6, 3, 4)
    h1 = lstm_forward(Tape(), params, [2]).values
    h2 = lstm_forward(Tape(), params, [2, 2]).values
    assert not np.allclose(h1, h2)


def test_lstm_empty_sequence_rejected():
    params = LSTMParams.init(np.random.default_rng(2), 6, 3, 4)
    with pytest.raises(UsageError):
        lstm_forward(Tape(), params, [])


def test_lstm_grad_matches_finite_differences():
    params = LSTMParams.init(np.random.default_rng(3), 7, 3, 4)
    ids = [2, 5, 1]

    def forward():
        t = Tape()
        return t.tensor_sum(t.tanh(lstm_forward(t, params, ids)))

    assert check_grads(forward, params.named_params(), tol=1e-4) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(
    seq_len=st.integers(1, 8),
    hidden=st.integers(1, 8),
    seed=st.integers(0, 2**31 - 1),
)
def test_property_lstm_grads(seq_len, hidden, seed):
    rng = np.random.default_rng(seed)
    params = LSTMParams.init(rng, 9, 4, hidden)
    ids = rng.integers(0, 9, size=seq_len)

    def forward():
        t = Tape()
        return t.tensor_sum(lstm_forward(t, params, ids))

    check_grads(forward, params.named_params(), tol=1e-4)


def test_lstm_pad_suffix_invariance():
    params = LSTMParams.init(np.random.default_rng(4), 7, 3, 5)
    plain = lstm_hidden(Tape(), params, np.array([[2, 5, 1]]), np.array([3])).values
    padded = lstm_hidden(Tape(), params, np.array([[2, 5, 1, PAD_ID, PAD_ID]]), np.array([3])).values
    np.testing.assert_array_equal(plain, padded)


def test_lstm_batch_rows_match_single_runs():
    params = LSTMParams.init(np.random.default_rng(5), 9, 3, 4)
    seqs = [[1, 2, 3], [4], [5, 6]]
    ids = np.full((3, 3), PAD_ID, dtype=np.intp)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    batch = lstm_hidden(Tape(), params, ids, np.array([3, 1, 2])).values
    for i, s in enumerate(seqs):
        single = lstm_forward(Tape(), params, s).values[0]
        np.testing.assert_allclose(batch[i], single, atol=1e-12)


# ----------------------------------------------------------------------
# classifiers
# ----------------------------------------------------------------------


def test_untrained_zero_weight_relation_probs_uniform():
    vocab = Vocabulary.build(["what is this"])
    clf = RelationClassifier.init(vocab, np.random.default_rng(0))
    for t in clf.named_params().values():
        t.values[...] = 0.0
    ranked = predict_relation(clf, "what is this")
    assert len(ranked) == 13
    for _, p in ranked:
        assert p == pytest.approx(1 / 13, abs=1e-12)


def test_predict_relation_sorted_and_top1_in_top3():
    vocab = Vocabulary.build(["what is this"])
    clf = RelationClassifier.init(vocab, np.random.default_rng(1))
    ranked = predict_relation(clf, "what is this")
    probs = [p for _, p in ranked]
    assert probs == sorted(probs, reverse=True)
    assert ranked[0][0] in [r for r, _ in ranked[:3]]


def test_relation_probs_sum_to_one():
    vocab = Vocabulary.build(["alpha beta gamma"])
    clf = RelationClassifier.init(vocab, np.random.default_rng(2))
    probs = predict_relation_batch(clf, ["alpha beta", "gamma"])
    np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0], atol=1e-9)
    assert np.all(probs > 0.0) and np.all(probs < 1.0)


def test_predict_relation_empty_question_rejected():
    vocab = Vocabulary.build(["a"])
    clf = RelationClassifier.init(vocab, np.random.default_rng(3))
    with pytest.raises(UsageError):
        predict_relation(clf, "?!")


def test_zero_weight_source_tie_resolves_to_image():
    vocab = Vocabulary.build(["what"])
    clf = SourceClassifier.init(vocab, np.random.default_rng(4))
    for t in clf.named_params().values():
        t.values[...] = 0.0
    source, p = predict_source(clf, "what")
    assert p == 0.5
    assert source is AnswerSource.IMAGE


def test_source_probability_in_open_interval():
    vocab = Vocabulary.build(["what is"])
    clf = SourceClassifier.init(vocab, np.random.default_rng(5))
    _, p = predict_source(clf, "what is")
    assert 0.0 < p < 1.0


def test_eval_predictions_are_deterministic():
    vocab = Vocabulary.build(["what is this thing"])
    clf = RelationClassifier.init(vocab, np.random.default_rng(6))
    a = predict_relation_batch(clf, ["what is this thing"])
    b = predict_relation_batch(clf, ["what is this thing"])
    np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------


def test_relation_training_memorizes_single_example():
    pairs = [("which thing is shown", Relation.USED_FOR)]
    clf, history = train_relation_classifier(pairs, EncoderTrainConfig(epochs=50, seed=0))
    assert relation_accuracy(clf, pairs, 1) == 1.0
    assert len(history) == 50


def test_relation_training_loss_decreases():
    pairs = _planted_relation_pairs(4, seed=1)
    _, history = train_relation_classifier(pairs, EncoderTrainConfig(epochs=12, seed=1))
    assert history[-1]["loss"] <= history[0]["loss"]


def test_relation_training_on_planted_keywords_generalizes():
    train = _planted_relation_pairs(20, seed=2)
    heldout = _planted_relation_pairs(5, seed=3)
    clf, _ = train_relation_classifier(train, EncoderTrainConfig(epochs=40, seed=2))
    assert relation_accuracy(clf, heldout, 1) >= 0.95


def test_relation_training_rejects_bad_labels():
    with pytest.raises(DataError):
        train_relation_classifier([("what", "UsedFor")], EncoderTrainConfig(epochs=1))


def test_source_training_memorizes_single_example():
    pairs = [("what is shown here", AnswerSource.IMAGE)]
    clf, _ = train_source_classifier(pairs, EncoderTrainConfig(epochs=50, seed=4))
    assert source_accuracy(clf, pairs) == 1.0


def test_source_training_on_planted_cues_generalizes():
    train = _planted_source_pairs(200, seed=5)
    heldout = _planted_source_pairs(60, seed=6)
    clf, _ = train_source_classifier(train, EncoderTrainConfig(epochs=25, seed=5))
    assert source_accuracy(clf, heldout) >= 0.98


def test_training_deterministic_under_seed():
    pairs = _planted_relation_pairs(3, seed=7)
    cfg = EncoderTrainConfig(epochs=3, seed=9)
    a, hist_a = train_relation_classifier(pairs, cfg)
    b, hist_b = train_relation_classifier(pairs, cfg)
    assert hist_a == hist_b
    for (name, pa), pb in zip(a.named_params().items(), b.named_params().values()):
        np.testing.assert_array_equal(pa.values, pb.values, err_msg=name)


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def test_classifier_checkpoint_round_trip(tmp_path):
    pairs = _planted_relation_pairs(2, seed=8)
    clf, _ = train_relation_classifier(pairs, EncoderTrainConfig(epochs=2, seed=8))
    path = tmp_path / "relation.ckpt"
    save_classifier(path, clf, meta={"note": "test"})
    loaded = load_classifier(path)
    assert isinstance(loaded, RelationClassifier)
    questions = [q for q, _ in pairs]
    np.testing.assert_array_equal(
        predict_relation_batch(clf, questions), predict_relation_batch(loaded, questions)
    )


def test_source_checkpoint_round_trip(tmp_path):
    pairs = _planted_source_pairs(10, seed=9)
    clf, _ = train_source_classifier(pairs, EncoderTrainConfig(epochs=2, seed=9))
    path = tmp_path / "source.ckpt"
    save_classifier(path, clf)
    loaded = load_classifier(path)
    assert isinstance(loaded, SourceClassifier)
    assert source_accuracy(loaded, pairs) == source_accuracy(clf, pairs)
