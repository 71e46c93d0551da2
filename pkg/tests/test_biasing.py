import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interbias.biasing import (
    BiasConfig,
    KeywordConflictError,
    KeywordEntry,
    KeywordList,
    build_bias_grid,
    harvest_triggers,
    interbias_hook,
    substitute,
)
from interbias.ctc import PosteriorGrid, collapse, greedy_decode, onehot, viterbi_align
from interbias.encoder import EncoderConfig, EncoderModel, forward
from interbias.synth import SynthConfig, Synthesizer, decode_ids, default_vocabulary, encode_text

from oracles import random_grid

V = default_vocabulary()
KW = KeywordList(
    [
        KeywordEntry("kavi", frozenset(["cavi", "kabi"])),
        KeywordEntry("new york", frozenset(["newyork", "new yor"])),
    ]
)


def sub(text, keywords=KW):
    out, report = substitute(encode_text(text, V), keywords, V)
    return decode_ids(out, V), report


def peaky_grid(text, rng, frames=2):
    """Grid whose greedy decode is ``text``: each char held for ``frames`` then a blank."""
    rows = []
    for k in encode_text(text, V):
        for _ in range(frames):
            rows.append(k)
        rows.append(V.blank_id)
    probs = np.full((len(rows), V.size), 0.05 / (V.size - 1))
    probs[np.arange(len(rows)), rows] = 0.95
    probs += rng.uniform(0, 1e-3, size=probs.shape)
    return PosteriorGrid(probs / probs.sum(1, keepdims=True), V)


@pytest.mark.parametrize(
    "text, expected",
    [
        ("we saw cavi there", "we saw kavi there"),
        ("kabi", "kavi"),
        ("cavis", "cavis"),  # whole words only
        ("the new yor deal", "the new york deal"),
        ("newyork cavi", "new york kavi"),
        ("nothing here", "nothing here"),
    ],
)
def test_substitute_examples(text, expected):
    assert sub(text)[0] == expected


def test_substitute_reports_spans():
    _, report = sub("a new yor b cavi")
    assert [(m.span, m.trigger, m.keyword) for m in report] == [
        ((1, 3), "new yor", "new york"),
        ((4, 5), "cavi", "kavi"),
    ]


def test_empty_keyword_list_is_identity():
    ids = encode_text("cavi  kabi", V)
    assert substitute(ids, KeywordList(), V) == (ids, [])


def test_thousand_unmatched_keywords_leave_text_alone():
    many = KeywordList.identity(f"zz{i:04d}".translate(str.maketrans("0123456789", "abcdefghij")) for i in range(1000))
    assert len(many) == 1000
    assert sub("we saw cavi there", many) == ("we saw cavi there", [])


def test_conflicting_triggers_raise():
    with pytest.raises(KeywordConflictError):
        KeywordList([KeywordEntry("kavi", frozenset(["cavi"])), KeywordEntry("gavi", frozenset(["cavi"]))])


def test_entry_validation():
    with pytest.raises(ValueError):
        KeywordEntry(" ", frozenset(["x"]))
    with pytest.raises(ValueError):
        KeywordEntry("x", frozenset([""]))
    with pytest.raises(ValueError):
        KeywordList([KeywordEntry("x", frozenset(["x"]))] * 2)
    with pytest.raises(ValueError):
        BiasConfig(w_bias=1.5)
    with pytest.raises(ValueError):
        BiasConfig(m_bias=0)


def test_tsv_roundtrip(tmp_path):
    p = tmp_path / "kw.tsv"
    KW.save(p)
    assert p.read_text().splitlines()[0] == "kavi\tcavi|kabi"
    back = KeywordList.load(p)
    assert back.entries == KW.entries
    with pytest.raises(ValueError):
        KeywordList.from_tsv("no tab here\n")


def test_bias_grid_endpoints():
    rng = np.random.default_rng(0)
    g = peaky_grid("cavi", rng)
    hyp = encode_text("kavi", V)
    assert build_bias_grid(hyp, g, BiasConfig(w_bias=0.0)) is g
    full = build_bias_grid(hyp, g, BiasConfig(w_bias=1.0))
    np.testing.assert_array_equal(full.probs, onehot(viterbi_align(hyp, g), V.size))
    assert greedy_decode(full) == hyp


def test_unalignable_hypothesis_keeps_grid():
    g = peaky_grid("ab", np.random.default_rng(0), frames=1)
    long = encode_text("abcdefghijk", V)
    assert build_bias_grid(long, g, BiasConfig()) is g


def test_hook_rewrites_only_matching_layers():
    rng = np.random.default_rng(1)
    g = peaky_grid("we saw cavi", rng)
    hook = interbias_hook(KW, BiasConfig(w_bias=0.9, layers=(2,)), V)
    assert hook(1, g) is g
    out = hook(2, g)
    assert decode_ids(greedy_decode(out), V) == "we saw kavi"
    plain = peaky_grid("no match", rng)
    assert hook(2, plain) is plain


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0), st.sampled_from(["cavi", "a kabi b", "new yor cavi"]))
def test_bias_grid_properties(seed, w, text):
    rng = np.random.default_rng(seed)
    g = peaky_grid(text, rng)
    g = PosteriorGrid(0.5 * g.probs + 0.5 * random_grid(rng, g.num_frames, V.size), V)
    hyp, _ = substitute(greedy_decode(g), KW, V)
    cfg = BiasConfig(w_bias=w)
    biased = build_bias_grid(hyp, g, cfg)
    np.testing.assert_allclose(biased.probs.sum(1), 1.0, atol=1e-9)
    assert np.all(biased.probs >= 0)
    # the one-hot part alone decodes to the corrected hypothesis
    assert collapse(viterbi_align(hyp, g), V) == hyp
    # substitution is idempotent
    assert substitute(hyp, KW, V)[0] == hyp


def test_harvest_on_untrained_model():
    cfg = EncoderConfig(num_layers=4, dim=16, ff_dim=16)
    model = EncoderModel.init(V, cfg, seed=0)
    tts = Synthesizer(SynthConfig(seed=0))
    kws, errors = harvest_triggers(["kavi", "mozu", "héllo"], model, tts, BiasConfig(m_bias=2), drop_conflicts=True)
    assert kws.keywords == ["kavi", "mozu"]
    assert "héllo" in errors
    for e in kws:
        assert e.keyword in e.triggers
    # harvested triggers are exactly what the model emits above m_bias
    trace = forward(model, tts("kavi", 0))
    emitted = {" ".join(decode_ids(ids, V).split()) for n, ids in trace.intermediate_greedy.items() if n >= 2}
    emitted.add(" ".join(decode_ids(trace.final_greedy, V).split()))
    kavi = next(e for e in kws if e.keyword == "kavi")
    assert kavi.triggers - {"kavi"} <= emitted - {""}
