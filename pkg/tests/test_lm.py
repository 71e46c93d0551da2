import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interbias.ctc import Vocabulary
from interbias.lm import NgramModel, fit

ABC = Vocabulary(("a", "b", "c"))
a, b, c = 0, 1, 2
TOY = [[a, b], [a, b], [a, c]]


def total_mass(model, context):
    return sum(math.exp(model.score(context, w)) for w in range(len(model.vocab)))


def test_mle_limit_of_hand_counted_bigrams():
    m = fit(TOY, order=2, vocab=ABC, k=1e-9)
    assert math.exp(m.score([a], b)) == pytest.approx(2 / 3, abs=1e-6)
    assert math.exp(m.score([a], c)) == pytest.approx(1 / 3, abs=1e-6)


def test_add_k_values():
    m = fit(TOY, order=2, vocab=ABC, k=0.1)
    # after 'a': counts b=2, c=1, a=0 -> denominators 3 + 0.3
    assert m.score([a], b) == pytest.approx(math.log(2.1 / 3.3))
    assert m.score([a], a) == pytest.approx(math.log(0.1 / 3.3))


def test_frequent_continuation_outscores_rare():
    m = fit(TOY, order=2, vocab=ABC)
    assert m.score([a], b) > m.score([a], c)


def test_unigram_is_context_free():
    m = fit(TOY, order=1, vocab=ABC)
    assert m.score([a], b) == m.score([c, c], b) == m.score([], b)
    # unigram counts a=3, b=2, c=1 with k=0.1
    assert m.score([], a) == pytest.approx(math.log(3.1 / 6.3))


def test_unseen_context_backs_off_to_unigram():
    m = fit(TOY, order=2, vocab=ABC)
    unigram = fit(TOY, order=1, vocab=ABC)
    # 'c' never precedes anything, so its context is unseen
    for w in (a, b, c):
        assert m.score([c], w) == pytest.approx(unigram.score([], w))


def test_sentence_start_context():
    m = fit(TOY, order=2, vocab=ABC, k=1e-9)
    assert math.exp(m.score([], a)) == pytest.approx(1.0, abs=1e-6)


def test_errors():
    with pytest.raises(ValueError):
        fit([], order=2, vocab=ABC)
    with pytest.raises(ValueError):
        fit(TOY, order=0, vocab=ABC)
    with pytest.raises(ValueError):
        fit(TOY, order=2, vocab=ABC, k=0.0)


def test_file_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    corpus = [list(rng.integers(0, 3, size=int(rng.integers(1, 8)))) for _ in range(30)]
    m = fit(corpus, order=3, vocab=ABC)
    p = tmp_path / "lm.txt"
    m.save(p)
    text = p.read_text()
    assert text.startswith("order\t3") and "\\2-grams:" in text
    back = NgramModel.load(p, ABC)
    for ctx in ([], [a], [b, c], [c, c], [a, b, c]):
        for w in (a, b, c):
            assert back.score(ctx, w) == m.score(ctx, w)


def test_fit_is_deterministic():
    assert fit(TOY, 3, ABC).to_text() == fit(TOY, 3, ABC).to_text()


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.lists(st.integers(0, 2), min_size=1, max_size=6), min_size=1, max_size=8),
    st.integers(1, 4),
    st.lists(st.integers(0, 2), max_size=4),
)
def test_every_context_is_normalized(corpus, order, context):
    m = fit(corpus, order, ABC)
    assert total_mass(m, context) == pytest.approx(1.0, abs=1e-6)
    for stored in m.contexts():
        state = tuple(stored)
        assert sum(math.exp(m.score_state(state, w)) for w in range(3)) == pytest.approx(1.0, abs=1e-6)
