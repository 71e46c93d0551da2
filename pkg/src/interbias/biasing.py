"""Keyword triggers and biasing of intermediate CTC predictions.

Pipeline at inference time, for every conditioned layer:

1. greedy-decode the intermediate grid,
2. replace words that exactly match a harvested trigger by their keyword,
3. force-align the corrected hypothesis to the grid,
4. mix the one-hot alignment into the grid with weight ``w_bias``.

The encoder then feeds the mixed grid through its ordinary conditioning
projection, so no parameters are added.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .ctc import AlignmentError, PosteriorGrid, Vocabulary, greedy_decode, onehot, viterbi_align
from .encoder import EncoderModel, forward, intermediate_predictions
from .synth import DELIMITER, SynthError, decode_ids, encode_text

log = logging.getLogger(__name__)


class KeywordConflictError(ValueError):
    """One trigger string would map to two different keywords."""


@dataclass(frozen=True)
class KeywordEntry:
    keyword: str
    triggers: frozenset[str]

    def __post_init__(self):
        if not self.keyword or not self.keyword.strip():
            raise ValueError("keyword must be non-empty")
        triggers = frozenset(_normalize(t) for t in self.triggers)
        if not triggers or "" in triggers:
            raise ValueError(f"keyword {self.keyword!r} needs at least one non-empty trigger")
        object.__setattr__(self, "triggers", triggers)


def _normalize(text: str) -> str:
    return " ".join(text.split())


class KeywordList:
    """Immutable keyword store with a trigger -> keyword index."""

    def __init__(self, entries: Iterable[KeywordEntry] = ()):
        self.entries: tuple[KeywordEntry, ...] = tuple(entries)
        keywords = [e.keyword for e in self.entries]
        if len(set(keywords)) != len(keywords):
            raise ValueError("duplicate keyword entries")
        index: dict[tuple[str, ...], str] = {}
        for e in self.entries:
            for trig in e.triggers:
                key = tuple(trig.split(" "))
                other = index.get(key)
                if other is not None and other != e.keyword:
                    raise KeywordConflictError(
                        f"trigger {trig!r} maps to both {other!r} and {e.keyword!r}"
                    )
                index[key] = e.keyword
        self._index = index
        self._max_len = max((len(k) for k in index), default=0)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def keywords(self) -> list[str]:
        return [e.keyword for e in self.entries]

    def lookup(self, words: Sequence[str]) -> str | None:
        return self._index.get(tuple(words))

    @property
    def max_trigger_words(self) -> int:
        return self._max_len

    # -- TSV: keyword<TAB>trigger1|trigger2|... --------------------------------

    def to_tsv(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(f"{e.keyword}\t{'|'.join(sorted(e.triggers))}")
        return "".join(line + "\n" for line in lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def from_tsv(cls, text: str) -> "KeywordList":
        entries = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"line {n}: expected keyword<TAB>triggers")
            entries.append(KeywordEntry(parts[0], frozenset(parts[1].split("|"))))
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "KeywordList":
        return cls.from_tsv(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def identity(cls, keywords: Iterable[str]) -> "KeywordList":
        """Each keyword triggers only on itself."""
        return cls(KeywordEntry(k, frozenset([k])) for k in keywords)


@dataclass(frozen=True)
class BiasConfig:
    w_bias: float = 0.9
    m_bias: int = 3
    # conditioned layers the hook may rewrite; None means every layer
    layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.w_bias <= 1.0:
            raise ValueError(f"w_bias must lie in [0, 1], got {self.w_bias}")
        if self.m_bias < 1:
            raise ValueError("m_bias must be >= 1")


@dataclass(frozen=True)
class Match:
    span: tuple[int, int]  # word indices [start, end) in the input hypothesis
    trigger: str
    keyword: str


def _split_words(ids: Sequence[int], vocab: Vocabulary) -> list[list[int]]:
    delim = vocab.id(DELIMITER)
    words: list[list[int]] = [[]]
    for k in ids:
        if k == delim:
            words.append([])
        else:
            words[-1].append(int(k))
    return words


def substitute(
    hypothesis: Sequence[int], keywords: KeywordList, vocab: Vocabulary
) -> tuple[list[int], list[Match]]:
    """Replace exact whole-word trigger matches by their keywords.

    Scans left to right; at each word position the longest matching trigger
    wins. Words outside matches are copied through untouched, so the output
    equals the input when nothing matches.
    """
    if not len(keywords):
        return list(hypothesis), []
    words = _split_words(hypothesis, vocab)
    text_words = [decode_ids(w, vocab) for w in words]
    out_words: list[list[int]] = []
    report: list[Match] = []
    i = 0
    while i < len(words):
        hit = None
        for n in range(min(keywords.max_trigger_words, len(words) - i), 0, -1):
            span = text_words[i : i + n]
            if "" in span:
                continue
            kw = keywords.lookup(span)
            if kw is not None:
                hit = (n, kw)
                break
        if hit is None:
            out_words.append(words[i])
            i += 1
            continue
        n, kw = hit
        report.append(Match((i, i + n), " ".join(text_words[i : i + n]), kw))
        out_words.extend(_split_words(encode_text(kw, vocab), vocab))
        i += n
    delim = vocab.id(DELIMITER)
    out: list[int] = []
    for j, w in enumerate(out_words):
        if j:
            out.append(delim)
        out.extend(w)
    return out, report


def build_bias_grid(biased_hyp: Sequence[int], grid: PosteriorGrid, cfg: BiasConfig) -> PosteriorGrid:
    """Mix the one-hot Viterbi alignment of ``biased_hyp`` into ``grid``.

    Falls back to the unchanged grid when the hypothesis cannot be aligned.
    """
    if cfg.w_bias == 0.0:
        return grid
    try:
        path = viterbi_align(biased_hyp, grid)
    except AlignmentError as exc:
        log.warning("biased hypothesis not alignable, keeping grid: %s", exc)
        return grid
    mixed = (1.0 - cfg.w_bias) * grid.probs + cfg.w_bias * onehot(path, grid.vocab.size)
    return PosteriorGrid(mixed, grid.vocab)


def interbias_hook(
    keywords: KeywordList, cfg: BiasConfig, vocab: Vocabulary
) -> Callable[[int, PosteriorGrid], PosteriorGrid]:
    """Conditioner for :func:`encoder.forward` implementing intermediate biasing."""

    def hook(layer: int, grid: PosteriorGrid) -> PosteriorGrid:
        if not len(keywords) or (cfg.layers is not None and layer not in cfg.layers):
            return grid
        hyp = greedy_decode(grid)
        biased, report = substitute(hyp, keywords, vocab)
        if not report:
            return grid
        return build_bias_grid(biased, grid, cfg)

    return hook


def harvest_triggers(
    keywords: Sequence[str],
    model: EncoderModel,
    synthesizer: Callable[..., np.ndarray],
    cfg: BiasConfig,
    renditions: int = 1,
    drop_conflicts: bool = False,
) -> tuple[KeywordList, dict[str, str]]:
    """Collect misrecognitions of synthesized keywords as triggers.

    For every keyword, the synthesized features are encoded without biasing and
    the greedy predictions of layers ``n >= cfg.m_bias`` plus the final layer
    become triggers; the keyword itself is always included.

    Returns the keyword list and a map of per-keyword failures (keywords that
    could not be synthesized are skipped). With ``drop_conflicts`` a trigger
    claimed by several keywords is removed from all but its own keyword;
    otherwise a conflict raises :class:`KeywordConflictError`.
    """
    vocab = model.vocab
    harvested: dict[str, set[str]] = {}
    errors: dict[str, str] = {}
    for kw in keywords:
        try:
            encode_text(kw, vocab)
            triggers = {_normalize(kw)}
            for r in range(renditions):
                trace = forward(model, synthesizer(kw, r))
                preds = list(intermediate_predictions(trace, cfg.m_bias).values())
                preds.append(trace.final_greedy)
                for ids in preds:
                    text = _normalize(decode_ids(ids, vocab))
                    if text:
                        triggers.add(text)
        except (SynthError, ValueError) as exc:
            errors[kw] = str(exc)
            log.warning("skipping keyword %r: %s", kw, exc)
            continue
        harvested[kw] = triggers

    if drop_conflicts:
        owners: dict[str, list[str]] = {}
        for kw, trigs in harvested.items():
            for t in trigs:
                owners.setdefault(t, []).append(kw)
        for t, kws in owners.items():
            if len(kws) > 1:
                for kw in kws:
                    if t != kw:
                        harvested[kw].discard(t)
                log.warning("trigger %r claimed by %s; kept only as a self-trigger", t, kws)
    entries = [KeywordEntry(kw, frozenset(t)) for kw, t in harvested.items()]
    return KeywordList(entries), errors
