import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from interbias.biasing import BiasConfig, KeywordEntry, KeywordList
from interbias.decoding import DecodeConfig
from interbias.encoder import EncoderConfig, EncoderModel
from interbias.evaluate import (
    Counts,
    EvalReport,
    ExperimentConfig,
    ReportRow,
    cer,
    corpus_cer,
    keyword_f1,
    levenshtein,
    run_experiment,
    textsub_baseline,
)
from interbias.synth import SynthConfig, Synthesizer, Utterance, decode_ids, default_vocabulary, encode_text

V = default_vocabulary()


@pytest.mark.parametrize("hyp, ref, expected", [("abc", "abc", 0.0), ("abd", "abc", 1 / 3), ("ab", "abc", 1 / 3)])
def test_cer_examples(hyp, ref, expected):
    assert cer(hyp, ref) == pytest.approx(expected)


def test_cer_errors():
    with pytest.raises(ValueError):
        cer("a", "")
    with pytest.raises(ValueError):
        corpus_cer(["a"], [""])


def test_corpus_cer_pools_edits():
    assert corpus_cer(["ab", "xyz"], ["abc", "xyz"]) == pytest.approx(1 / 6)


@given(st.text("abc", max_size=8), st.text("abc", max_size=8), st.text("abc", max_size=8))
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert (levenshtein(a, b) == 0) == (a == b)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_f1_examples():
    flags = {"kavi": True, "mozu": False}
    perfect = keyword_f1(["x kavi mozu"], ["kavi mozu y"], flags)
    assert perfect.oov_f1 == 1.0 and perfect.nonoov_f1 == 1.0
    assert keyword_f1(["x y"], ["kavi mozu"], flags).oov_f1 == 0.0
    # 2 TP, 1 FN, 1 FP
    s = keyword_f1(["kavi", "kavi", "q", "kavi"], ["kavi", "kavi", "kavi", "p"], flags)
    assert (s.oov.tp, s.oov.fn, s.oov.fp) == (2, 1, 1)
    assert s.oov.precision == pytest.approx(2 / 3)
    assert s.oov.recall == pytest.approx(2 / 3)
    assert s.oov_f1 == pytest.approx(2 / 3)


def test_f1_counts_repeated_occurrences():
    s = keyword_f1(["kavi kavi kavi"], ["kavi kavi"], {"kavi": True})
    assert (s.oov.tp, s.oov.fp, s.oov.fn) == (2, 1, 0)
    assert Counts().f1 == 0.0
    with pytest.raises(ValueError):
        keyword_f1(["a"], [], {})


def test_textsub_over_corrects_a_legitimate_word():
    # "cavi" is a real word here, but also a harvested trigger for "kavi"
    kws = KeywordList([KeywordEntry("kavi", frozenset(["kavi", "cavi"]))])
    ref = "we cavi now"
    out = decode_ids(textsub_baseline(encode_text(ref, V), kws, V), V)
    assert out == "we kavi now"
    s = keyword_f1([out], [ref], {"kavi": True, "cavi": False})
    assert s.nonoov.fn == 1 and s.oov.fp == 1


def test_report_formats():
    rows = [ReportRow("selfcond", "greedy", 1, 0.123, 0.5, 0.75)]
    report = EvalReport(rows)
    assert report.to_csv().splitlines() == [
        "method,decode_mode,beam_size,cer,oov_f1,nonoov_f1",
        "selfcond,greedy,1,0.123000,0.500000,0.750000",
    ]
    assert report.table().splitlines()[1].endswith("12.3 / 50.0 / 75.0")
    assert report.get("selfcond", "greedy") is rows[0]
    with pytest.raises(KeyError):
        report.get("interbias", "greedy")


@pytest.fixture(scope="module")
def toy():
    model = EncoderModel.init(V, EncoderConfig(num_layers=4, dim=16, ff_dim=16), seed=0)
    tts = Synthesizer(SynthConfig(seed=0))
    utts = [Utterance(f"u{i}", t, tts(t)) for i, t in enumerate(["kavi mo", "su ze", "ka"])]
    return model, utts


def _exp(**kw):
    beam = DecodeConfig(beam_size=3, lm_weight=0.0, length_penalty=0.2)
    return ExperimentConfig(beam=beam, sweep_beam_sizes=(2,), **kw)


def test_experiment_cells(toy):
    model, utts = toy
    report = run_experiment(utts, model, KeywordList.identity(["kavi"]), {"kavi": True}, None, _exp())
    cells = [(r.method, r.decode_mode, r.beam_size) for r in report.rows]
    assert len(cells) == 9 + 2 and len(set(cells)) == len(cells)
    assert ("interbias", "kbbs", 2) in cells
    assert {bs for m, mode, bs in cells if mode == "greedy"} == {1}


def test_empty_keyword_list_gives_identical_rows(toy):
    model, utts = toy
    report = run_experiment(utts, model, KeywordList(), {"kavi": True}, None, _exp(), sweep=False)
    for mode in ("greedy", "beam", "kbbs"):
        sc = report.hypotheses[("selfcond", mode, 1 if mode == "greedy" else 3)]
        for method in ("textsub", "interbias"):
            assert report.hypotheses[(method, mode, 1 if mode == "greedy" else 3)] == sc


def test_zero_bias_weight_matches_selfcond(toy):
    model, utts = toy
    exp = _exp(bias=BiasConfig(w_bias=0.0), methods=("selfcond", "interbias"), modes=("greedy",))
    report = run_experiment(utts, model, KeywordList.identity(["kavi", "mo"]), {"kavi": True}, None, exp)
    assert report.hypotheses[("interbias", "greedy", 1)] == report.hypotheses[("selfcond", "greedy", 1)]


def test_explicit_beam_sizes(toy):
    model, utts = toy
    exp = _exp(beam_sizes=(1, 2), modes=("beam",), methods=("selfcond",))
    report = run_experiment(utts, model, KeywordList(), {}, None, exp)
    assert [r.beam_size for r in report.rows] == [1, 2]
    assert np.isfinite(report.rows[0].cer)
