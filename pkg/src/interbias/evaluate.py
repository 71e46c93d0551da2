"""Metrics and the SelfCond / TextSub / InterBiasing comparison harness."""

from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .biasing import BiasConfig, KeywordList, interbias_hook, substitute
from .ctc import Vocabulary, greedy_decode
from .decoding import DecodeConfig, KeywordTrie, prefix_beam_search
from .encoder import EncoderModel, forward
from .lm import NgramModel
from .synth import Utterance, decode_ids

log = logging.getLogger(__name__)

METHODS = ("selfcond", "textsub", "interbias")
MODES = ("greedy", "beam", "kbbs")
REPORT_COLUMNS = ("method", "decode_mode", "beam_size", "cer", "oov_f1", "nonoov_f1")


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cer(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("CER undefined for an empty reference")
    return levenshtein(hyp, ref) / len(ref)


def corpus_cer(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> float:
    edits = sum(levenshtein(h, r) for h, r in zip(hyps, refs))
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("CER undefined for empty references")
    return edits / total


def _f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    @property
    def precision(self) -> float:
        return _f1(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return _f1(self.tp, self.fp, self.fn)[1]

    @property
    def f1(self) -> float:
        return _f1(self.tp, self.fp, self.fn)[2]


@dataclass
class KeywordScore:
    per_keyword: dict[str, Counts]
    oov: Counts
    nonoov: Counts

    @property
    def oov_f1(self) -> float:
        return self.oov.f1

    @property
    def nonoov_f1(self) -> float:
        return self.nonoov.f1


def keyword_f1(hyps: Sequence[str], refs: Sequence[str], keywords: Mapping[str, bool]) -> KeywordScore:
    """Bag-of-words keyword counts per utterance, pooled over the corpus.

    ``keywords`` maps each keyword to its OOV flag. Within an utterance,
    ``min(ref_count, hyp_count)`` occurrences are true positives, surplus
    reference occurrences false negatives and surplus hypothesis occurrences
    false positives.
    """
    if len(hyps) != len(refs):
        raise ValueError("hypothesis and reference lists differ in length")
    per = {k: Counts() for k in keywords}
    for hyp, ref in zip(hyps, refs):
        hc = Counter(w for w in hyp.split() if w in per)
        rc = Counter(w for w in ref.split() if w in per)
        for kw in hc.keys() | rc.keys():
            hit = min(hc[kw], rc[kw])
            c = per[kw]
            c.tp += hit
            c.fn += rc[kw] - hit
            c.fp += hc[kw] - hit
    oov, nonoov = Counts(), Counts()
    for kw, c in per.items():
        (oov if keywords[kw] else nonoov).add(c)
    return KeywordScore(per, oov, nonoov)


def textsub_baseline(hyp: Sequence[int], keywords: KeywordList, vocab: Vocabulary) -> list[int]:
    """Apply trigger substitution once, to a final hypothesis."""
    return substitute(hyp, keywords, vocab)[0]


@dataclass(frozen=True)
class ExperimentConfig:
    bias: BiasConfig = BiasConfig()
    beam: DecodeConfig = DecodeConfig(beam_size=10, lm_weight=0.5, length_penalty=0.2, kbbs_weight=0.0)
    kbbs_weight: float = 3.0
    sweep_beam_sizes: tuple[int, ...] = (2, 3, 5, 10, 20)
    # beam sizes for the beam/kbbs cells; defaults to (beam.beam_size,)
    beam_sizes: tuple[int, ...] | None = None
    methods: tuple[str, ...] = METHODS
    modes: tuple[str, ...] = MODES


@dataclass
class ReportRow:
    method: str
    decode_mode: str
    beam_size: int
    cer: float
    oov_f1: float
    nonoov_f1: float
    score: KeywordScore | None = field(default=None, repr=False)

    def cell(self) -> str:
        return f"{100 * self.cer:.1f} / {100 * self.oov_f1:.1f} / {100 * self.nonoov_f1:.1f}"


@dataclass
class EvalReport:
    rows: list[ReportRow]
    hypotheses: dict[tuple[str, str, int], list[str]] = field(default_factory=dict, repr=False)

    def get(self, method: str, mode: str, beam_size: int | None = None) -> ReportRow:
        for r in self.rows:
            if r.method == method and r.decode_mode == mode and (beam_size is None or r.beam_size == beam_size):
                return r
        raise KeyError((method, mode, beam_size))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([r.method, r.decode_mode, r.beam_size, f"{r.cer:.6f}", f"{r.oov_f1:.6f}", f"{r.nonoov_f1:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        """Aligned text table with cells formatted as CER / OOV F1 / Non-OOV F1 (percent)."""
        lines = [f"{'method':<10} {'mode':<7} {'beam':>4}  CER / OOV F1 / Non-OOV F1"]
        for r in self.rows:
            lines.append(f"{r.method:<10} {r.decode_mode:<7} {r.beam_size:>4}  {r.cell()}")
        return "\n".join(lines)


def _decode(grid, mode: str, beam_size: int, exp: ExperimentConfig, lm, trie) -> list[int]:
    if mode == "greedy":
        return greedy_decode(grid)
    cfg = DecodeConfig(
        beam_size=beam_size,
        lm_weight=exp.beam.lm_weight,
        length_penalty=exp.beam.length_penalty,
        kbbs_weight=exp.kbbs_weight if mode == "kbbs" else 0.0,
        token_min_logp=exp.beam.token_min_logp,
    )
    return list(prefix_beam_search(grid, cfg, lm, trie if mode == "kbbs" else None)[0].prefix)


def run_experiment(
    utterances: Sequence[Utterance],
    model: EncoderModel,
    keywords: KeywordList,
    keyword_flags: Mapping[str, bool],
    lm: NgramModel | None,
    exp: ExperimentConfig = ExperimentConfig(),
    sweep: bool = True,
) -> EvalReport:
    """Evaluate every (method, decode mode) cell, plus a KBBS beam-size sweep.

    SelfCond and TextSub share the unbiased encoder pass; TextSub substitutes
    triggers in the final hypothesis. InterBiasing decodes the grid produced
    with the biasing hook active. ``keyword_flags`` lists the scored keywords
    with their OOV flag.
    """
    vocab = model.vocab
    hook = interbias_hook(keywords, exp.bias, vocab)
    trie = KeywordTrie.from_words(keywords.keywords, vocab)
    refs = [u.text for u in utterances]

    cells: list[tuple[str, str, int]] = []
    beam_sizes = exp.beam_sizes or (exp.beam.beam_size,)
    for mode in exp.modes:
        for bs in (1,) if mode == "greedy" else beam_sizes:
            cells += [(m, mode, bs) for m in exp.methods]
    if sweep and "kbbs" in exp.modes:
        for bs in exp.sweep_beam_sizes:
            for m in ("selfcond", "interbias"):
                if m in exp.methods and (m, "kbbs", bs) not in cells:
                    cells.append((m, "kbbs", bs))

    hyps: dict[tuple[str, str, int], list[list[int]]] = {c: [] for c in cells}
    need_plain = any(m in ("selfcond", "textsub") for m, _, _ in cells)
    need_bias = any(m == "interbias" for m, _, _ in cells)
    for u in utterances:
        plain = forward(model, u.features).final_grid if need_plain else None
        biased = forward(model, u.features, hook).final_grid if need_bias else None
        cache: dict[tuple[str, str, int], list[int]] = {}
        for method, mode, bs in cells:
            source = "interbias" if method == "interbias" else "selfcond"
            key = (source, mode, bs)
            if key not in cache:
                cache[key] = _decode(biased if source == "interbias" else plain, mode, bs, exp, lm, trie)
            out = cache[key]
            if method == "textsub":
                out = textsub_baseline(out, keywords, vocab)
            hyps[(method, mode, bs)].append(out)

    rows = []
    texts = {}
    ref_ids = [list(r) for r in refs]
    for cell in cells:
        hyp_text = [decode_ids(h, vocab) for h in hyps[cell]]
        texts[cell] = hyp_text
        score = keyword_f1(hyp_text, refs, keyword_flags)
        rows.append(
            ReportRow(
                method=cell[0],
                decode_mode=cell[1],
                beam_size=cell[2],
                cer=corpus_cer([list(h) for h in hyp_text], ref_ids),
                oov_f1=score.oov_f1,
                nonoov_f1=score.nonoov_f1,
                score=score,
            )
        )
    return EvalReport(rows, texts)
