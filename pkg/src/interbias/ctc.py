"""CTC primitives: vocabulary, collapsing, loss/gradient, greedy and Viterbi decoding.

All lattice computations run in log-space over the extended label sequence
``(blank, y1, blank, y2, ..., yL, blank)`` of length ``2L + 1``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BLANK_SYMBOL = "<blank>"
PROB_FLOOR = 1e-30
NEG_INF = -np.inf

_GRID_MAGIC = b"PGRD"


class InvalidInputError(ValueError):
    """Raised for malformed grids, token ids or vocabularies."""


class AlignmentError(RuntimeError):
    """Raised when a label sequence has no valid CTC alignment over a grid."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token inventory V; the blank is appended as the last entry of V'."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        if len(set(tokens)) != len(tokens):
            raise InvalidInputError("vocabulary tokens must be unique")
        if BLANK_SYMBOL in tokens:
            raise InvalidInputError(f"{BLANK_SYMBOL} is reserved for the blank")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @property
    def blank_id(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        """|V'|, the number of output classes including blank."""
        return len(self.tokens) + 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise InvalidInputError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.blank_id:
                out.append(BLANK_SYMBOL)
            elif 0 <= i < len(self.tokens):
                out.append(self.tokens[i])
            else:
                raise InvalidInputError(f"token id {i} out of range")
        return out

    def fingerprint(self) -> int:
        """CRC32 of the vocabulary file contents; used to pair checkpoints with vocabularies."""
        return zlib.crc32(self.to_text().encode("utf-8"))

    def to_text(self) -> str:
        return "\n".join(self.tokens + (BLANK_SYMBOL,)) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[-1] != BLANK_SYMBOL:
            raise InvalidInputError(f"{path}: final line must be {BLANK_SYMBOL}")
        return cls(tuple(lines[:-1]))


@dataclass
class PosteriorGrid:
    """T x |V'| row-stochastic matrix of per-frame token posteriors."""

    probs: np.ndarray
    vocab: Vocabulary

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != self.vocab.size:
            raise InvalidInputError(
                f"grid shape {probs.shape} incompatible with |V'|={self.vocab.size}"
            )
        if not np.all(np.isfinite(probs)) or probs.min(initial=0.0) < -1e-12 or probs.max(initial=0.0) > 1 + 1e-12:
            raise InvalidInputError("grid entries must lie in [0, 1]")
        if probs.shape[0] and not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-6):
            raise InvalidInputError("grid rows must sum to 1")
        self.probs = probs

    @property
    def num_frames(self) -> int:
        return self.probs.shape[0]

    def log_probs(self) -> np.ndarray:
        return np.log(np.maximum(self.probs, PROB_FLOOR))


def _check_ids(ids: Sequence[int], limit: int) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= limit):
        raise InvalidInputError(f"token id out of range [0, {limit})")
    return arr


def collapse(path: Sequence[int], vocab: Vocabulary) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    arr = _check_ids(path, vocab.size)
    out = []
    prev = None
    for k in arr.tolist():
        if k != prev and k != vocab.blank_id:
            out.append(k)
        prev = k
    return out


def _check_target(target: Sequence[int], vocab: Vocabulary) -> np.ndarray:
    arr = _check_ids(target, vocab.size)
    if np.any(arr == vocab.blank_id):
        raise InvalidInputError("label sequence must not contain the blank")
    return arr


def min_frames(target: Sequence[int]) -> int:
    """Smallest T admitting an alignment: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def extend_labels(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_mask(ext: np.ndarray, blank: int) -> np.ndarray:
    """States s that may be entered from s-2 (non-blank and differing from two back)."""
    allow = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


def ctc_forward_backward(log_probs: np.ndarray, target: np.ndarray, blank: int):
    """Log-space alpha/beta over the extended lattice of one utterance.

    Returns ``(loss, occupancy)`` where occupancy[t, k] is the posterior
    probability that frame t emits token k under the CTC path posterior.
    ``loss`` is ``inf`` (and occupancy ``None``) when no path exists.
    """
    T, V = log_probs.shape
    ext = extend_labels(target, blank)
    S = len(ext)
    if T < min_frames(target):
        return math.inf, None
    skip = _skip_mask(ext, blank)
    emit = log_probs[:, ext]  # (T, S)

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate(([NEG_INF], prev[:-1]))
        a2 = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:S], NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt[1:], [NEG_INF]))
        b2 = np.where(skip_from, np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:S], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]

    log_like = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else NEG_INF)
    if not np.isfinite(log_like):
        return math.inf, None
    # alpha*beta double-counts the emission at t
    state_post = np.exp(alpha + beta - emit - log_like)
    occupancy = np.zeros((T, V))
    np.add.at(occupancy.T, ext, state_post.T)
    return float(-log_like), occupancy


def ctc_loss(grid: PosteriorGrid, target: Sequence[int]) -> float:
    """Negative log-likelihood of ``target`` summed over all alignments.

    Returns ``math.inf`` when the grid is too short to carry the target;
    callers treat that as the infeasible-sample signal.
    """
    tgt = _check_target(target, grid.vocab)
    if grid.num_frames == 0:
        return 0.0 if tgt.size == 0 else math.inf
    loss, _ = ctc_forward_backward(grid.log_probs(), tgt, grid.vocab.blank_id)
    return loss


def ctc_loss_grad(grid: PosteriorGrid, target: Sequence[int]) -> np.ndarray:
    """Gradient of :func:`ctc_loss` with respect to each grid probability z[t, k]."""
    tgt = _check_target(target, grid.vocab)
    loss, occupancy = ctc_forward_backward(grid.log_probs(), tgt, grid.vocab.blank_id)
    if occupancy is None:
        raise AlignmentError(f"no alignment of {len(tgt)} labels in {grid.num_frames} frames")
    return -occupancy / np.maximum(grid.probs, PROB_FLOOR)


def batch_ctc(logits: np.ndarray, lengths: Sequence[int], targets: Sequence[Sequence[int]], blank: int):
    """CTC losses and logit gradients for a padded batch.

    Args:
        logits: (B, T, V') unnormalized scores.
        lengths: valid frame count per item.
        targets: label sequences.

    Returns:
        (losses, dlogits): losses is (B,) with ``inf`` for infeasible items
        and ``nan`` for items with non-finite logits; dlogits is
        d(loss_b)/d(logits) with zero rows for padding and for those items.
    """
    B, T, V = logits.shape
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(log_probs)

    ext_len = [2 * len(y) + 1 for y in targets]
    S = max(ext_len)
    ext = np.full((B, S), blank, dtype=np.int64)
    skip = np.zeros((B, S), dtype=bool)
    for b, y in enumerate(targets):
        e = extend_labels(np.asarray(y, dtype=np.int64), blank)
        ext[b, : len(e)] = e
        skip[b, : len(e)] = _skip_mask(e, blank)
    emit = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    lengths = np.asarray(lengths, dtype=np.int64)
    ext_len = np.asarray(ext_len, dtype=np.int64)
    state_ok = np.arange(S)[None, :] < ext_len[:, None]

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = np.where(ext_len > 1, emit[:, 0, 1], NEG_INF)
    pad2 = np.full((B, 2), NEG_INF)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a1 = np.concatenate((pad2[:, :1], prev[:, :-1]), axis=1)
        a2 = np.where(skip, np.concatenate((pad2, prev[:, :-2]), axis=1)[:, :S], NEG_INF)
        cur = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[:, t]
        alpha[:, t] = np.where(state_ok, cur, NEG_INF)

    rows = np.arange(B)
    last = lengths - 1
    beta = np.full((B, T, S), NEG_INF)
    beta[rows, last, ext_len - 1] = emit[rows, last, ext_len - 1]
    two = ext_len > 1
    beta[rows[two], last[two], ext_len[two] - 2] = emit[rows[two], last[two], ext_len[two] - 2]
    skip_from = np.zeros((B, S), dtype=bool)
    skip_from[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[:, t + 1]
        b1 = np.concatenate((nxt[:, 1:], pad2[:, :1]), axis=1)
        b2 = np.where(skip_from, np.concatenate((nxt[:, 2:], pad2), axis=1)[:, :S], NEG_INF)
        cur = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[:, t]
        active = (t < last)[:, None]
        beta[:, t] = np.where(active & state_ok, cur, beta[:, t])

    end_a = alpha[rows, last, ext_len - 1]
    end_b = np.where(two, alpha[rows, last, np.maximum(ext_len - 2, 0)], NEG_INF)
    log_like = np.logaddexp(end_a, end_b)
    feasible = np.isfinite(log_like)
    losses = np.where(feasible, -log_like, np.inf)
    losses[np.isnan(log_like)] = np.nan

    safe_ll = np.where(feasible, log_like, 0.0)
    with np.errstate(invalid="ignore"):
        state_post = np.exp(alpha + beta - emit - safe_ll[:, None, None])
    state_post = np.where(np.isfinite(state_post), state_post, 0.0)
    occupancy = np.zeros((B, T, V))
    bidx = np.broadcast_to(rows[:, None, None], (B, T, S))
    tidx = np.broadcast_to(np.arange(T)[None, :, None], (B, T, S))
    np.add.at(occupancy, (bidx, tidx, np.broadcast_to(ext[:, None, :], (B, T, S))), state_post)
    frame_ok = (np.arange(T)[None, :] < lengths[:, None]) & feasible[:, None]
    dlogits = np.where(frame_ok[..., None], probs - occupancy, 0.0)
    return losses, dlogits


def greedy_decode(grid: PosteriorGrid) -> list[int]:
    """Per-frame argmax (lowest index wins ties) followed by :func:`collapse`."""
    return collapse(np.argmax(grid.probs, axis=1), grid.vocab)


def viterbi_align(target: Sequence[int], grid: PosteriorGrid) -> list[int]:
    """Most probable frame path among those collapsing to ``target``.

    Ties prefer staying on the current lattice state, then the one-step move.
    """
    vocab = grid.vocab
    tgt = _check_target(target, vocab)
    T = grid.num_frames
    blank = vocab.blank_id
    if T < min_frames(tgt) or (T == 0 and tgt.size):
        raise AlignmentError(f"no alignment of {len(tgt)} labels in {T} frames")
    if T == 0:
        return []
    ext = extend_labels(tgt, blank)
    S = len(ext)
    skip = _skip_mask(ext, blank)
    emit = grid.log_probs()[:, ext]

    score = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    score[0, 0] = emit[0, 0]
    if S > 1:
        score[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = score[t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))[:S], NEG_INF)
        cand = np.stack([stay, step, jump])  # argmax picks the first maximum
        choice = np.argmax(cand, axis=0)
        score[t] = cand[choice, np.arange(S)] + emit[t]
        back[t] = choice

    if S > 1 and score[T - 1, S - 2] > score[T - 1, S - 1]:
        s = S - 2
    else:
        s = S - 1
    if not np.isfinite(score[T - 1, s]):
        raise AlignmentError("grid assigns zero probability to every alignment")
    states = [s]
    for t in range(T - 1, 0, -1):
        s -= back[t, s]
        states.append(s)
    states.reverse()
    return ext[states].tolist()


def path_log_prob(path: Sequence[int], grid: PosteriorGrid) -> float:
    lp = grid.log_probs()
    return float(sum(lp[t, k] for t, k in enumerate(path)))


def onehot(path: Sequence[int], size: int) -> np.ndarray:
    arr = np.zeros((len(path), size))
    arr[np.arange(len(path)), np.asarray(path, dtype=np.int64)] = 1.0
    return arr


def write_grid(path: str | Path, probs: np.ndarray, magic: bytes = _GRID_MAGIC) -> None:
    """Binary container: magic, u32 rows, u32 cols, float32 row-major payload (little-endian)."""
    arr = np.ascontiguousarray(probs, dtype="<f4")
    if arr.ndim != 2:
        raise InvalidInputError("grid must be two-dimensional")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", *arr.shape))
        fh.write(arr.tobytes())


def read_grid(path: str | Path, magic: bytes = _GRID_MAGIC) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise InvalidInputError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    rows, cols = struct.unpack("<II", data[4:12])
    payload = data[12:]
    if len(payload) != 4 * rows * cols:
        raise InvalidInputError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def save_posteriorgram(path: str | Path, grid: PosteriorGrid) -> None:
    write_grid(path, grid.probs)


def load_posteriorgram(path: str | Path, vocab: Vocabulary) -> PosteriorGrid:
    probs = read_grid(path)
    # float32 storage; renormalize so rows stay stochastic at float64 precision
    probs = probs / probs.sum(axis=1, keepdims=True)
    return PosteriorGrid(probs, vocab)
