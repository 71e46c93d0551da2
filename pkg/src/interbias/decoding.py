"""CTC prefix beam search with n-gram shallow fusion and keyword boosting.

Hypotheses are ranked by::

    logsumexp(logp_blank, logp_nonblank)
        + lm_weight * lm_logprob + length_penalty * len(prefix) + boost

Keyword boosting walks a prefix trie of the keyword token sequences. Each
token that advances a match at a word start earns ``kbbs_weight``
provisionally; the bonus is committed when the keyword is completed and
followed by the word delimiter (or the utterance ends), and retracted as soon
as the hypothesis leaves the trie before completing a keyword.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .ctc import PosteriorGrid, Vocabulary
from .lm import NgramModel
from .synth import DELIMITER, encode_text

NEG_INF = -math.inf


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 10
    lm_weight: float = 0.5
    length_penalty: float = 0.2
    kbbs_weight: float = 0.0
    # per-frame candidate pruning: tokens with log-prob below this are not expanded
    token_min_logp: float | None = None

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        for name in ("lm_weight", "length_penalty", "kbbs_weight"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


@dataclass
class TrieNode:
    children: dict[int, "TrieNode"] = field(default_factory=dict)
    terminal: bool = False


class KeywordTrie:
    """Prefix trie over keyword token-id sequences."""

    def __init__(self, sequences: Iterable[Sequence[int]] = ()):
        self.root = TrieNode()
        self.size = 0
        for seq in sequences:
            self.insert(seq)

    @classmethod
    def from_words(cls, words: Iterable[str], vocab: Vocabulary) -> "KeywordTrie":
        return cls(encode_text(w, vocab) for w in words)

    def insert(self, seq: Sequence[int]) -> None:
        if not len(seq):
            raise ValueError("empty keyword")
        node = self.root
        for k in seq:
            node = node.children.setdefault(int(k), TrieNode())
        if not node.terminal:
            node.terminal = True
            self.size += 1

    def contains(self, seq: Sequence[int]) -> bool:
        node = self.root
        for k in seq:
            node = node.children.get(int(k))
            if node is None:
                return False
        return node.terminal


@dataclass(frozen=True)
class BoostState:
    """Keyword-match progress of one prefix.

    ``committed`` counts tokens of completed keyword matches; ``pending``
    counts tokens of the match in progress at ``node``.
    """

    node: TrieNode | None = None
    pending: int = 0
    committed: int = 0
    word_start: bool = True

    def advance(self, token: int, trie: KeywordTrie, delimiter: int) -> "BoostState":
        node, pending, committed = self.node, self.pending, self.committed
        if node is not None:
            child = node.children.get(token)
            if child is not None:
                return BoostState(child, pending + 1, committed, False)
            if node.terminal and token == delimiter:
                committed += pending
            node, pending = None, 0
        if self.word_start and token != delimiter:
            child = trie.root.children.get(token)
            if child is not None:
                return BoostState(child, 1, committed, False)
        return BoostState(None, 0, committed, token == delimiter)

    def provisional(self) -> int:
        return self.committed + self.pending

    def final(self) -> int:
        if self.node is not None and self.node.terminal:
            return self.committed + self.pending
        return self.committed


def shallow_fusion_score(acoustic_logp: float, lm_logp: float, cfg: DecodeConfig, prefix_len: int) -> float:
    return acoustic_logp + cfg.lm_weight * lm_logp + cfg.length_penalty * prefix_len


@dataclass
class _PrefixInfo:
    lm_total: float
    lm_state: tuple[int, ...]
    boost: BoostState


@dataclass
class BeamHypothesis:
    prefix: tuple[int, ...]
    logp_blank: float
    logp_nonblank: float
    lm_score: float
    boost: float
    score: float


def prefix_beam_search(
    grid: PosteriorGrid,
    cfg: DecodeConfig,
    lm: NgramModel | None = None,
    keywords: Iterable[str] | KeywordTrie | None = None,
) -> list[BeamHypothesis]:
    """Ranked hypotheses (best first) of a CTC prefix beam search.

    ``keywords`` may be keyword strings or a prebuilt :class:`KeywordTrie`;
    boosting is active only when it is given and ``cfg.kbbs_weight != 0``.
    """
    vocab = grid.vocab
    T = grid.num_frames
    if T == 0:
        raise ValueError("cannot decode an empty grid")
    blank = vocab.blank_id
    delim = vocab.id(DELIMITER) if DELIMITER in vocab else -1
    logp = grid.log_probs()
    if keywords is not None and not isinstance(keywords, KeywordTrie):
        keywords = KeywordTrie.from_words(keywords, vocab)
    trie = keywords if (keywords is not None and cfg.kbbs_weight != 0 and keywords.size) else None
    use_lm = lm is not None and cfg.lm_weight != 0

    root = ()
    info: dict[tuple[int, ...], _PrefixInfo] = {
        root: _PrefixInfo(0.0, lm.start_state() if use_lm else (), BoostState())
    }

    def extend(prefix: tuple[int, ...], k: int) -> tuple[int, ...]:
        new = prefix + (k,)
        if new not in info:
            parent = info[prefix]
            if use_lm:
                lm_total = parent.lm_total + lm.score_state(parent.lm_state, k)
                lm_state = lm.state_after(parent.lm_state, k)
            else:
                lm_total, lm_state = 0.0, ()
            boost = parent.boost.advance(k, trie, delim) if trie is not None else parent.boost
            info[new] = _PrefixInfo(lm_total, lm_state, boost)
        return new

    def rank(prefix: tuple[int, ...], pb: float, pnb: float, final: bool = False) -> float:
        pi = info[prefix]
        score = shallow_fusion_score(_lae(pb, pnb), pi.lm_total, cfg, len(prefix))
        if trie is not None:
            score += cfg.kbbs_weight * (pi.boost.final() if final else pi.boost.provisional())
        return score

    beams: dict[tuple[int, ...], tuple[float, float]] = {root: (0.0, NEG_INF)}
    tokens = [k for k in range(vocab.size) if k != blank]
    for t in range(T):
        row = logp[t]
        lp_blank = row[blank]
        if cfg.token_min_logp is None:
            cands = tokens
        else:
            cands = [k for k in tokens if row[k] >= cfg.token_min_logp]
        nxt: dict[tuple[int, ...], list[float]] = {}
        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            entry = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            entry[0] = _lae(entry[0], total + lp_blank)
            last = prefix[-1] if prefix else None
            if last is not None:
                entry[1] = _lae(entry[1], pnb + row[last])
            for k in cands:
                new = extend(prefix, k)
                e = nxt.setdefault(new, [NEG_INF, NEG_INF])
                if k == last:
                    e[1] = _lae(e[1], pb + row[k])
                else:
                    e[1] = _lae(e[1], total + row[k])
        scored = sorted(
            ((rank(p, pb, pnb), p) for p, (pb, pnb) in nxt.items() if pb > NEG_INF or pnb > NEG_INF),
            key=lambda x: (-x[0], x[1]),
        )
        beams = {p: tuple(nxt[p]) for _, p in scored[: cfg.beam_size]}

    out = []
    for p, (pb, pnb) in beams.items():
        pi = info[p]
        bonus = cfg.kbbs_weight * pi.boost.final() if trie is not None else 0.0
        out.append(BeamHypothesis(p, pb, pnb, pi.lm_total, bonus, rank(p, pb, pnb, final=True)))
    out.sort(key=lambda h: (-h.score, h.prefix))
    return out


def best_path(grid: PosteriorGrid, cfg: DecodeConfig, lm=None, keywords=None) -> list[int]:
    return list(prefix_beam_search(grid, cfg, lm, keywords)[0].prefix)
