"""Deterministic synthetic speech features and the toy language built on them.

Each character owns a fixed random prototype vector; an utterance is rendered
by repeating each character's prototype for a random number of frames and
adding Gaussian noise. The word delimiter ``|`` is an ordinary character.

Some characters come in near-homophone pairs whose prototypes differ only by
a short vector. The generated lexicon always spells a pair member according to
the following vowel, so a trained model learns to resolve the pair from
context. Out-of-vocabulary keywords break that rule and are therefore
systematically misrecognized as their rule-conforming spelling.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ctc import Vocabulary, read_grid, write_grid
from .rng import stream

DELIMITER = "|"
ALPHABET = tuple("abcdefghijklmnopqrstuvwxyz") + (DELIMITER,)
VOWELS = "aeiou"
BACK_VOWELS = "aou"
FRONT_VOWELS = "ei"
# (spelling before a/o/u, spelling before e/i)
HOMOPHONES = (("k", "c"), ("s", "z"), ("f", "v"), ("g", "j"))
PLAIN_CONSONANTS = "bdhmnprtwy"

_FEAT_MAGIC = b"FEAT"


class SynthError(ValueError):
    pass


def default_vocabulary() -> Vocabulary:
    return Vocabulary(ALPHABET)


def text_to_tokens(text: str) -> list[str]:
    """``"go to"`` -> ``['g', 'o', '|', 't', 'o']``."""
    return [DELIMITER if ch == " " else ch for ch in text]


def tokens_to_text(tokens: Iterable[str]) -> str:
    return "".join(" " if t == DELIMITER else t for t in tokens)


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text_to_tokens(text))


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> str:
    return tokens_to_text(vocab.decode(ids))


@dataclass(frozen=True)
class SynthConfig:
    feature_dim: int = 16
    frames_per_char: tuple[int, int] = (1, 3)
    noise_std: float = 0.5
    seed: int = 0
    homophones: tuple[tuple[str, str], ...] = HOMOPHONES
    homophone_distance: float = 1.0
    # leading/trailing silence frames rendered with the blank prototype
    edge_silence: tuple[int, int] = (0, 2)
    alphabet: tuple[str, ...] = ALPHABET

    def __post_init__(self):
        lo, hi = self.frames_per_char
        if lo < 1 or hi < lo:
            raise SynthError(f"frames_per_char must satisfy 1 <= min <= max, got {self.frames_per_char}")
        if self.noise_std < 0:
            raise SynthError("noise_std must be non-negative")
        for a, b in self.homophones:
            if a not in self.alphabet or b not in self.alphabet:
                raise SynthError(f"homophone pair {a}/{b} outside the alphabet")

    @cached_property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.alphabet)

    @cached_property
    def prototype_matrix(self) -> np.ndarray:
        """|V'| x feature_dim prototypes; the last row (blank) renders silence."""
        rng = stream(self.seed, "prototypes")
        protos = rng.normal(0.0, 1.0, size=(self.vocab.size, self.feature_dim))
        for a, b in self.homophones:
            ia, ib = self.vocab.id(a), self.vocab.id(b)
            direction = rng.normal(size=self.feature_dim)
            direction /= np.linalg.norm(direction)
            protos[ib] = protos[ia] + self.homophone_distance * direction
        return protos


def synthesize(text: str, cfg: SynthConfig, draw: np.random.Generator) -> np.ndarray:
    """Render ``text`` as a (T, feature_dim) feature sequence."""
    vocab = cfg.vocab
    try:
        ids = encode_text(text, vocab)
    except ValueError as exc:
        raise SynthError(f"cannot synthesize {text!r}: {exc}") from None
    lo, hi = cfg.frames_per_char
    durations = draw.integers(lo, hi + 1, size=len(ids))
    s_lo, s_hi = cfg.edge_silence
    lead, trail = draw.integers(s_lo, s_hi + 1, size=2)
    frames = [vocab.blank_id] * int(lead)
    for k, d in zip(ids, durations):
        frames.extend([k] * int(d))
    frames.extend([vocab.blank_id] * int(trail))
    base = cfg.prototype_matrix[frames]
    feats = base + cfg.noise_std * draw.normal(size=base.shape)
    # float32-representable so on-disk features reproduce in-memory ones exactly
    return feats.astype(np.float32).astype(np.float64)


class Synthesizer:
    """Deterministic text-to-features function standing in for a TTS system.

    Each distinct text always renders to the same features (rendition 0); further
    renditions use independent noise/duration draws.
    """

    def __init__(self, cfg: SynthConfig, purpose: str = "tts"):
        self.cfg = cfg
        self.purpose = purpose

    def __call__(self, text: str, rendition: int = 0) -> np.ndarray:
        draw = stream(self.cfg.seed, self.purpose, zlib.crc32(text.encode("utf-8")), rendition)
        return synthesize(text, self.cfg, draw)


# -- toy language ----------------------------------------------------------------


def _spell(consonant_class: str | tuple[str, str], vowel: str, violate: bool = False) -> str:
    if isinstance(consonant_class, tuple):
        back, front = consonant_class
        regular = back if vowel in BACK_VOWELS else front
        irregular = front if vowel in BACK_VOWELS else back
        return (irregular if violate else regular) + vowel
    return consonant_class + vowel


def regularize(word: str, homophones: Sequence[tuple[str, str]] = HOMOPHONES) -> str:
    """Respell every homophone consonant according to the lexicon rule."""
    back_of = {}
    for back, front in homophones:
        back_of[back] = (back, front)
        back_of[front] = (back, front)
    chars = list(word)
    for i, ch in enumerate(chars[:-1]):
        nxt = chars[i + 1]
        if ch in back_of and nxt in VOWELS:
            back, front = back_of[ch]
            chars[i] = back if nxt in BACK_VOWELS else front
    return "".join(chars)


def follows_rule(word: str, homophones: Sequence[tuple[str, str]] = HOMOPHONES) -> bool:
    return regularize(word, homophones) == word


@dataclass
class Language:
    """Lexicon plus the two keyword sets of the experiment."""

    lexicon: list[str]
    oov_keywords: list[str]
    nonoov_keywords: list[str]


def make_language(
    seed: int = 0,
    lexicon_size: int = 300,
    n_oov: int = 24,
    n_nonoov: int = 12,
    syllables: tuple[int, int] = (2, 3),
    homophones: Sequence[tuple[str, str]] = HOMOPHONES,
    rule_exceptions: float = 0.0,
) -> Language:
    """Generate CV-syllable words that obey the homophone spelling rule.

    A ``rule_exceptions`` fraction of the lexicon words that contain a
    homophone syllable spell one of them against the rule, so the spelling
    prior a recognizer learns is strong but not absolute.

    OOV keywords contain at least one homophone syllable spelled against the
    rule, and neither they nor their regularized spelling occur in the
    lexicon. Non-OOV keywords are lexicon words containing a homophone
    syllable (the decoder must keep them intact).
    """
    rng = stream(seed, "language")
    classes: list[str | tuple[str, str]] = list(PLAIN_CONSONANTS) + [tuple(p) for p in homophones]

    def word(violate: bool) -> str:
        n = int(rng.integers(syllables[0], syllables[1] + 1))
        parts = []
        homo_slots = []
        for i in range(n):
            cls = classes[int(rng.integers(len(classes)))]
            if violate and i == n - 1 and not homo_slots:
                cls = tuple(homophones[int(rng.integers(len(homophones)))])
            vowel = VOWELS[int(rng.integers(len(VOWELS)))]
            if isinstance(cls, tuple):
                homo_slots.append(i)
            parts.append((cls, vowel))
        bad = set()
        if homo_slots and (violate or (rule_exceptions > 0 and rng.random() < rule_exceptions)):
            bad = {homo_slots[int(rng.integers(len(homo_slots)))]}
        return "".join(_spell(c, v, i in bad) for i, (c, v) in enumerate(parts))

    lexicon: list[str] = []
    seen = set()
    while len(lexicon) < lexicon_size:
        w = word(False)
        if w not in seen:
            seen.add(w)
            lexicon.append(w)

    oov: list[str] = []
    while len(oov) < n_oov:
        w = word(True)
        if w in seen or w in oov or regularize(w, homophones) in {regularize(x, homophones) for x in seen}:
            continue
        if regularize(w, homophones) in {regularize(o, homophones) for o in oov}:
            continue
        oov.append(w)

    has_homophone = [w for w in lexicon if any(c in w for p in homophones for c in p)]
    picks = rng.choice(len(has_homophone), size=min(n_nonoov, len(has_homophone)), replace=False)
    nonoov = [has_homophone[int(i)] for i in sorted(picks)]
    return Language(lexicon, oov, nonoov)


@dataclass
class Utterance:
    id: str
    text: str
    features: np.ndarray


@dataclass
class CorpusBundle:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    # keyword -> True for OOV, False for Non-OOV
    keywords: dict[str, bool] = field(default_factory=dict)
    lexicon: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]


@dataclass(frozen=True)
class CorpusSizes:
    train: int = 2000
    dev: int = 200
    test_occurrences: int = 10  # per keyword
    words_per_sentence: tuple[int, int] = (3, 5)
    rare_train_count: int = 2  # occurrences of each Non-OOV keyword in train


def make_corpus(
    cfg: SynthConfig,
    lexicon: Sequence[str],
    heldout_keywords: Sequence[str],
    sizes: CorpusSizes = CorpusSizes(),
    rare_keywords: Sequence[str] = (),
) -> CorpusBundle:
    """Build train/dev/test splits.

    Train and dev sentences draw lexicon words with Zipfian frequencies;
    ``rare_keywords`` (Non-OOV) are excluded from that draw and inserted into
    exactly ``sizes.rare_train_count`` training sentences each. The test split
    embeds every keyword ``sizes.test_occurrences`` times in carrier sentences.
    """
    lex_set = set(lexicon)
    overlap = sorted(lex_set.intersection(heldout_keywords))
    if overlap:
        raise SynthError(f"OOV keywords present in the training lexicon: {overlap}")
    missing = sorted(set(rare_keywords) - lex_set)
    if missing:
        raise SynthError(f"Non-OOV keywords missing from the lexicon: {missing}")
    for w in list(lexicon) + list(heldout_keywords):
        if not w or any(ch not in cfg.alphabet or ch == DELIMITER for ch in w):
            raise SynthError(f"word {w!r} is not spellable in the alphabet")

    rare = set(rare_keywords)
    common = [w for w in lexicon if w not in rare]
    weights = 1.0 / np.arange(1, len(common) + 1) ** 0.8
    weights /= weights.sum()
    rng = stream(cfg.seed, "corpus")
    lo, hi = sizes.words_per_sentence

    def sentence(n_words: int) -> list[str]:
        idx = rng.choice(len(common), size=n_words, p=weights)
        return [common[int(i)] for i in idx]

    train_text = [sentence(int(rng.integers(lo, hi + 1))) for _ in range(sizes.train)]
    for kw in rare_keywords:
        for slot in rng.choice(sizes.train, size=sizes.rare_train_count, replace=False):
            words = train_text[int(slot)]
            words[int(rng.integers(len(words)))] = kw
    dev_text = [sentence(int(rng.integers(lo, hi + 1))) for _ in range(sizes.dev)]

    test_text = []
    keywords = {**{k: True for k in heldout_keywords}, **{k: False for k in rare_keywords}}
    for kw in keywords:
        for _ in range(sizes.test_occurrences):
            words = sentence(int(rng.integers(lo - 1, hi)))
            words.insert(int(rng.integers(len(words) + 1)), kw)
            test_text.append(words)
    order = rng.permutation(len(test_text))
    test_text = [test_text[int(i)] for i in order]

    def render(split: str, texts: list[list[str]]) -> list[Utterance]:
        out = []
        for i, words in enumerate(texts):
            text = " ".join(words)
            draw = stream(cfg.seed, "noise", zlib.crc32(split.encode()), i)
            out.append(Utterance(f"{split}-{i:05d}", text, synthesize(text, cfg, draw)))
        return out

    return CorpusBundle(
        train=render("train", train_text),
        dev=render("dev", dev_text),
        test=render("test", test_text),
        keywords=keywords,
        lexicon=list(lexicon),
    )


# -- on-disk corpus ----------------------------------------------------------------


def write_features(path: str | Path, features: np.ndarray) -> None:
    write_grid(path, features, magic=_FEAT_MAGIC)


def read_features(path: str | Path) -> np.ndarray:
    return read_grid(path, magic=_FEAT_MAGIC)


def write_split(directory: str | Path, name: str, utts: Sequence[Utterance]) -> Path:
    """Write ``<name>.tsv`` (utt_id, text, feature_file) plus one FEAT file per utterance."""
    directory = Path(directory)
    feat_dir = directory / name
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.tsv"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for u in utts:
            rel = f"{name}/{u.id}.feat"
            write_features(directory / rel, u.features)
            fh.write(f"{u.id}\t{u.text}\t{rel}\n")
    return manifest


def read_split(directory: str | Path, name: str) -> list[Utterance]:
    directory = Path(directory)
    out = []
    for line in (directory / f"{name}.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt_id, text, rel = line.split("\t")
        out.append(Utterance(utt_id, text, read_features(directory / rel)))
    return out
