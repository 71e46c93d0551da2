"""Token n-gram language model used for shallow fusion.

Add-k smoothed maximum-likelihood estimates. A context that never occurred in
training backs off to its longest suffix that did; the empty context (unigram)
always exists. Every stored context therefore defines a properly normalized
distribution over the vocabulary. Sentences are left-padded with ``<s>``.
"""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .ctc import Vocabulary

BOS = -1
BOS_SYMBOL = "<s>"


class NgramModel:
    def __init__(
        self,
        order: int,
        vocab: Vocabulary,
        k: float,
        seen: dict[tuple[int, ...], float],
        unseen: dict[tuple[int, ...], float],
    ):
        """
        Args:
            seen: log P(w | ctx) keyed by ``ctx + (w,)`` for every observed n-gram.
            unseen: log P(w | ctx) shared by all w never observed after ``ctx``.
        """
        self.order = order
        self.vocab = vocab
        self.k = k
        self._seen = seen
        self._unseen = unseen

    @property
    def num_contexts(self) -> int:
        return len(self._unseen)

    def contexts(self) -> list[tuple[int, ...]]:
        return sorted(self._unseen)

    def start_state(self) -> tuple[int, ...]:
        return (BOS,) * (self.order - 1)

    def state_after(self, state: tuple[int, ...], token: int) -> tuple[int, ...]:
        if self.order == 1:
            return ()
        return (state + (token,))[-(self.order - 1) :]

    def _context(self, context: Sequence[int]) -> tuple[int, ...]:
        n = self.order - 1
        if n == 0:
            return ()
        ctx = tuple(int(c) for c in context)[-n:]
        ctx = (BOS,) * (n - len(ctx)) + ctx
        while ctx not in self._unseen:
            ctx = ctx[1:]
        return ctx

    def score(self, context: Sequence[int], next_token: int) -> float:
        """log P(next_token | context); ``context`` is the preceding token ids (BOS-padded)."""
        if not 0 <= next_token < len(self.vocab):
            raise ValueError(f"token id {next_token} outside the vocabulary")
        ctx = self._context(context)
        value = self._seen.get(ctx + (int(next_token),))
        return self._unseen[ctx] if value is None else value

    def score_state(self, state: tuple[int, ...], next_token: int) -> float:
        """Like :meth:`score` for an already BOS-padded state tuple."""
        ctx = state
        while ctx not in self._unseen:
            ctx = ctx[1:]
        value = self._seen.get(ctx + (next_token,))
        return self._unseen[ctx] if value is None else value

    def sentence_logprob(self, tokens: Sequence[int]) -> float:
        state = self.start_state()
        total = 0.0
        for t in tokens:
            total += self.score_state(state, t)
            state = self.state_after(state, t)
        return total

    # -- file format ---------------------------------------------------------------

    def _sym(self, i: int) -> str:
        return BOS_SYMBOL if i == BOS else self.vocab.tokens[i]

    def to_text(self) -> str:
        lines = [f"order\t{self.order}", f"k\t{self.k!r}", "", "\\contexts:"]
        for ctx in sorted(self._unseen):
            lines.append(f"{self._unseen[ctx]!r}\t{' '.join(self._sym(i) for i in ctx)}")
        for n in range(1, self.order + 1):
            lines += ["", f"\\{n}-grams:"]
            for gram in sorted(g for g in self._seen if len(g) == n):
                lines.append(f"{self._seen[gram]!r}\t{' '.join(self._sym(i) for i in gram)}")
        lines += ["", "\\end\\"]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary) -> "NgramModel":
        text = Path(path).read_text(encoding="utf-8")
        ids = {t: i for i, t in enumerate(vocab.tokens)}
        ids[BOS_SYMBOL] = BOS
        order = k = None
        seen: dict[tuple[int, ...], float] = {}
        unseen: dict[tuple[int, ...], float] = {}
        block = None
        for line in text.splitlines():
            if not line:
                continue
            if line.startswith("\\"):
                block = line
                continue
            key, _, rest = line.partition("\t")
            if block is None:
                if key == "order":
                    order = int(rest)
                elif key == "k":
                    k = float(rest)
                continue
            gram = tuple(ids[s] for s in rest.split(" ")) if rest else ()
            (unseen if block == "\\contexts:" else seen)[gram] = float(key)
        if order is None or k is None:
            raise ValueError(f"{path}: missing order/k header")
        return cls(order, vocab, k, seen, unseen)


def fit(corpus: Iterable[Sequence[int]], order: int, vocab: Vocabulary, k: float = 0.1) -> NgramModel:
    """Count n-grams of every length up to ``order`` and smooth with add-k."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if k <= 0:
        raise ValueError("k must be positive")
    counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(lambda: defaultdict(int))
    n_sent = 0
    for sent in corpus:
        n_sent += 1
        padded = [BOS] * (order - 1) + [int(t) for t in sent]
        for i in range(order - 1, len(padded)):
            w = padded[i]
            if not 0 <= w < len(vocab):
                raise ValueError(f"token id {w} outside the vocabulary")
            for n in range(order):
                counts[tuple(padded[i - n : i])][w] += 1
    if n_sent == 0:
        raise ValueError("empty training corpus")

    size = len(vocab)
    seen: dict[tuple[int, ...], float] = {}
    unseen: dict[tuple[int, ...], float] = {}
    counts.setdefault((), defaultdict(int))
    for ctx, nexts in counts.items():
        denom = sum(nexts.values()) + k * size
        unseen[ctx] = math.log(k / denom)
        for w, c in nexts.items():
            seen[ctx + (w,)] = math.log((c + k) / denom)
    return NgramModel(order, vocab, k, seen, unseen)
