"""Self-conditioned CTC encoder with intermediate heads and a conditioning hook.

The encoder is a stack of pre-norm blocks (layer norm, single-head
self-attention, feed-forward, each with a residual connection). After every
layer ``n`` in ``cond_layers`` the shared output head produces an intermediate
posterior grid ``Z(n)``; an optional hook may rewrite it, and the shared
conditioning projection of the (possibly rewritten) grid is added back to the
hidden sequence before layer ``n + 1``.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .ctc import PosteriorGrid, Vocabulary, batch_ctc, greedy_decode
from .rng import stream

log = logging.getLogger(__name__)

# (layer index, intermediate grid) -> grid used for conditioning
Conditioner = Callable[[int, PosteriorGrid], PosteriorGrid]

_CKPT_MAGIC = b"SCND"
_CKPT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    """Raised when the training loss becomes NaN or infinite."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture hyperparameters.

    ``context`` is the half-width of the frame-splicing window of the input
    projection; ``positional`` toggles sinusoidal position encodings added to
    the projected input. With ``final_norm`` a shared layer norm is applied to
    the residual stream before every use of the output head.
    """

    num_layers: int = 4
    dim: int = 32
    input_dim: int = 16
    ff_dim: int = 64
    context: int = 2
    cond_layers: tuple[int, ...] = (1, 2, 3)
    positional: bool = True
    final_norm: bool = True

    def __post_init__(self):
        cond = tuple(sorted(set(int(n) for n in self.cond_layers)))
        if any(n < 1 or n >= self.num_layers for n in cond):
            raise ValueError(f"cond_layers must lie in 1..{self.num_layers - 1}, got {cond}")
        if self.num_layers > 32:
            raise ValueError("at most 32 layers (checkpoint bitmask width)")
        object.__setattr__(self, "cond_layers", cond)


@dataclass
class TrainConfig:
    lambda_: float = 0.5
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.lambda_ < 1.0:
            raise ValueError(f"lambda must lie strictly inside (0, 1), got {self.lambda_}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class ForwardTrace:
    final_grid: PosteriorGrid
    intermediate_grids: dict[int, PosteriorGrid]
    intermediate_greedy: dict[int, list[int]]
    # grids actually fed to the conditioning projection (after the hook)
    conditioned_grids: dict[int, PosteriorGrid] = field(default_factory=dict)

    @property
    def final_greedy(self) -> list[int]:
        return greedy_decode(self.final_grid)


def _param_shapes(cfg: EncoderConfig, vocab_size: int) -> list[tuple[str, tuple[int, ...]]]:
    D, F = cfg.dim, cfg.ff_dim
    shapes = [
        ("in_proj.weight", (cfg.input_dim * (2 * cfg.context + 1), D)),
        ("in_proj.bias", (D,)),
    ]
    for n in range(1, cfg.num_layers + 1):
        p = f"layer{n}."
        shapes += [
            (p + "ln1.gamma", (D,)),
            (p + "ln1.beta", (D,)),
            (p + "attn.wq", (D, D)),
            (p + "attn.wk", (D, D)),
            (p + "attn.wv", (D, D)),
            (p + "attn.wo", (D, D)),
            (p + "ln2.gamma", (D,)),
            (p + "ln2.beta", (D,)),
            (p + "ff.w1", (D, F)),
            (p + "ff.b1", (F,)),
            (p + "ff.w2", (F, D)),
            (p + "ff.b2", (D,)),
        ]
    if cfg.final_norm:
        shapes += [("out_norm.gamma", (D,)), ("out_norm.beta", (D,))]
    shapes += [
        ("head.weight", (D, vocab_size)),
        ("head.bias", (vocab_size,)),
        ("cond.weight", (vocab_size, D)),
        ("cond.bias", (D,)),
    ]
    return shapes


class EncoderModel:
    """Parameters plus architecture; ``params`` keeps the documented checkpoint order."""

    def __init__(self, vocab: Vocabulary, config: EncoderConfig, params: dict[str, np.ndarray]):
        self.vocab = vocab
        self.config = config
        expected = _param_shapes(config, vocab.size)
        if [n for n, _ in expected] != list(params):
            raise ValueError("parameter names/order do not match the architecture")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.params = params

    @classmethod
    def init(
        cls,
        vocab: Vocabulary,
        config: EncoderConfig | None = None,
        seed: int = 0,
        cond_init_scale: float = 1.0,
    ) -> "EncoderModel":
        """Randomly initialized model.

        Args:
            cond_init_scale: multiplier on the initial conditioning projection.
                Values above 1 make later layers rely more on the intermediate
                posteriors from the start of training.
        """
        config = config or EncoderConfig()
        rng = stream(seed, "init")
        params = {}
        for name, shape in _param_shapes(config, vocab.size):
            if name.endswith(("gamma",)):
                params[name] = np.ones(shape)
            elif len(shape) == 1:
                params[name] = np.zeros(shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        params["cond.weight"] *= cond_init_scale
        return cls(vocab, config, params)

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @property
    def cond_layers(self) -> tuple[int, ...]:
        return self.config.cond_layers

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.vocab, self.config, {k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- checkpoint -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write the binary checkpoint; parameters are stored as float32."""
        cfg = self.config
        mask = sum(1 << (n - 1) for n in cfg.cond_layers)
        header = struct.pack(
            "<4sIIIIIIIIII",
            _CKPT_MAGIC,
            _CKPT_VERSION,
            cfg.num_layers,
            cfg.dim,
            self.vocab.size,
            mask,
            cfg.input_dim,
            cfg.context,
            cfg.ff_dim,
            int(cfg.positional) | int(cfg.final_norm) << 1,
            self.vocab.fingerprint(),
        )
        with open(path, "wb") as fh:
            fh.write(header)
            for value in self.params.values():
                fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary) -> "EncoderModel":
        data = Path(path).read_bytes()
        head = struct.calcsize("<4sIIIIIIIIII")
        if len(data) < head:
            raise CheckpointError(f"{path}: truncated header")
        magic, version, N, D, V, mask, din, ctx, ff, flags, fp = struct.unpack("<4sIIIIIIIIII", data[:head])
        if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: not a version-{_CKPT_VERSION} checkpoint")
        if V != vocab.size or fp != vocab.fingerprint():
            raise CheckpointError(f"{path}: checkpoint vocabulary does not match ({V} classes, hash {fp:#x})")
        cond = tuple(n + 1 for n in range(32) if mask >> n & 1)
        cfg = EncoderConfig(N, D, din, ff, ctx, cond, bool(flags & 1), bool(flags & 2))
        params, offset = {}, head
        for name, shape in _param_shapes(cfg, V):
            count = int(np.prod(shape))
            chunk = data[offset : offset + 4 * count]
            if len(chunk) != 4 * count:
                raise CheckpointError(f"{path}: truncated at {name}")
            params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
            offset += 4 * count
        if offset != len(data):
            raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
        return cls(vocab, cfg, params)

    def round_to_float32(self) -> None:
        """Round parameters in place so the in-memory model equals its saved form."""
        for k, v in self.params.items():
            self.params[k] = v.astype(np.float32).astype(np.float64)


def _positional(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, D, 2) / D))
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)[:, : D // 2]
    return pe


def splice(feats: np.ndarray, context: int) -> np.ndarray:
    """Stack each frame with ``context`` neighbours on either side (edge frames repeated)."""
    if context == 0:
        return feats
    T = feats.shape[-2]
    idx = np.clip(np.arange(T)[:, None] + np.arange(-context, context + 1)[None, :], 0, T - 1)
    out = feats[..., idx, :]  # (..., T, 2c+1, Din)
    return out.reshape(*feats.shape[:-2], T, -1)


def _pad(features: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    T = int(lengths.max())
    batch = np.zeros((len(features), T, features[0].shape[1]))
    for b, f in enumerate(features):
        L = f.shape[0]
        batch[b, :L] = f
        # replicate the last frame into padding so spliced edges match the unpadded case
        batch[b, L:] = f[-1]
    return batch, lengths


def _stack(
    model: EncoderModel,
    P: dict[str, ag.Tensor],
    feats: np.ndarray,
    lengths: np.ndarray,
    conditioner: Conditioner | None = None,
):
    """Run the encoder over a padded batch.

    Returns ``(final_logits, {n: intermediate_logits}, {n: conditioned_probs})``.
    """
    cfg = model.config
    B, T, _ = feats.shape
    # splicing past a sequence end must see the replicated last frame, not padding of a
    # longer neighbour; _pad already replicates, so splice on the padded batch is exact
    x = ag.matmul(ag.Tensor(splice(feats, cfg.context)), P["in_proj.weight"]) + P["in_proj.bias"]
    if cfg.positional:
        x = x + _positional(T, cfg.dim)
    key_mask = (np.arange(T)[None, :] < lengths[:, None])[:, None, :]  # (B, 1, T)
    scale = 1.0 / math.sqrt(cfg.dim)

    def head(h: ag.Tensor) -> ag.Tensor:
        if cfg.final_norm:
            h = ag.layer_norm(h, P["out_norm.gamma"], P["out_norm.beta"])
        return ag.matmul(h, P["head.weight"]) + P["head.bias"]

    inter_logits: dict[int, ag.Tensor] = {}
    cond_probs: dict[int, np.ndarray] = {}
    for n in range(1, cfg.num_layers + 1):
        p = f"layer{n}."
        h = ag.layer_norm(x, P[p + "ln1.gamma"], P[p + "ln1.beta"])
        q = ag.matmul(h, P[p + "attn.wq"])
        k = ag.matmul(h, P[p + "attn.wk"])
        v = ag.matmul(h, P[p + "attn.wv"])
        att = ag.softmax(ag.matmul(q, ag.transpose(k)) * scale, key_mask)
        x = x + ag.matmul(ag.matmul(att, v), P[p + "attn.wo"])
        h = ag.layer_norm(x, P[p + "ln2.gamma"], P[p + "ln2.beta"])
        ff = ag.relu(ag.matmul(h, P[p + "ff.w1"]) + P[p + "ff.b1"])
        x = x + ag.matmul(ff, P[p + "ff.w2"]) + P[p + "ff.b2"]

        if n in cfg.cond_layers:
            logits = head(x)
            inter_logits[n] = logits
            z = ag.softmax(logits)
            if conditioner is not None:
                rewritten = z.data.copy()
                for b in range(B):
                    L = int(lengths[b])
                    grid = PosteriorGrid(z.data[b, :L], model.vocab)
                    rewritten[b, :L] = conditioner(n, grid).probs
                z_used = ag.Tensor(rewritten)
            else:
                z_used = z
            cond_probs[n] = z_used.data
            x = x + ag.matmul(z_used, P["cond.weight"]) + P["cond.bias"]

    final = head(x)
    return final, inter_logits, cond_probs


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    model: EncoderModel,
    features: np.ndarray,
    conditioner: Conditioner | None = None,
) -> ForwardTrace:
    """Encode one utterance of shape (T, input_dim)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.config.input_dim:
        raise ValueError(
            f"expected (T, {model.config.input_dim}) features, got shape {features.shape}"
        )
    if features.shape[0] == 0:
        raise ValueError("empty feature sequence")
    P = {k: ag.Tensor(v) for k, v in model.params.items()}
    final, inter, cond = _stack(model, P, features[None], np.array([features.shape[0]]), conditioner)
    vocab = model.vocab
    grids = {n: PosteriorGrid(_softmax_np(t.data[0]), vocab) for n, t in inter.items()}
    return ForwardTrace(
        final_grid=PosteriorGrid(_softmax_np(final.data[0]), vocab),
        intermediate_grids=grids,
        intermediate_greedy={n: greedy_decode(g) for n, g in grids.items()},
        conditioned_grids={n: PosteriorGrid(c[0], vocab) for n, c in cond.items()},
    )


def intermediate_predictions(trace: ForwardTrace, min_layer: int) -> dict[int, list[int]]:
    """Greedy intermediate hypotheses from layers ``n >= min_layer``."""
    return {n: list(y) for n, y in sorted(trace.intermediate_greedy.items()) if n >= min_layer}


def loss_and_grads(
    model: EncoderModel,
    batch: Sequence[tuple[np.ndarray, Sequence[int]]],
    lambda_: float,
):
    """Mixed intermediate-CTC objective averaged over the feasible items of a batch.

    Returns ``(loss, grads, n_feasible)``; ``grads`` maps parameter names to
    arrays. Items whose targets cannot fit in their frames are skipped.
    """
    cfg = model.config
    feats, lengths = _pad([f for f, _ in batch])
    targets = [list(y) for _, y in batch]
    P = {k: ag.parameter(v) for k, v in model.params.items()}
    final, inter, _ = _stack(model, P, feats, lengths)
    blank = model.vocab.blank_id

    heads = [(final, 1.0 if not cfg.cond_layers else 1.0 - lambda_)]
    heads += [(t, lambda_ / len(cfg.cond_layers)) for t in inter.values()]
    per_head = [batch_ctc(t.data, lengths, targets, blank) for t, _ in heads]
    # +inf marks a target that cannot fit; NaN must surface as divergence, not be skipped
    feasible = np.all([l != math.inf for l, _ in per_head], axis=0)
    n_ok = int(feasible.sum())
    if n_ok == 0:
        return math.nan, None, 0

    total = 0.0
    terms = []
    for (tensor, weight), (losses, dlogits) in zip(heads, per_head):
        w = weight / n_ok
        total += w * float(losses[feasible].sum())
        g = dlogits * feasible[:, None, None] * w
        terms.append(ag.external_loss(tensor, 0.0, g))
    root = terms[0]
    for t in terms[1:]:
        root = root + t
    root.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return total, grads, n_ok


def objective(model: EncoderModel, features: np.ndarray, target: Sequence[int], lambda_: float) -> float:
    """Mixed objective for a single utterance (no gradient)."""
    loss, _, n = loss_and_grads(model, [(features, target)], lambda_)
    return loss if n else math.inf


def train(
    model: EncoderModel,
    corpus: Sequence[tuple[np.ndarray, Sequence[int]]],
    cfg: TrainConfig,
    on_epoch: Callable[[int, float, EncoderModel], None] | None = None,
) -> tuple[EncoderModel, list[float]]:
    """Mini-batch gradient descent on the mixed objective.

    Biasing is inference-only, so training always runs without a conditioner
    hook. Returns a trained copy of ``model`` and the per-epoch mean loss.
    """
    model = model.copy()
    min_needed = [len(y) + sum(a == b for a, b in zip(y, list(y)[1:])) for _, y in corpus]
    usable = [i for i, (f, _) in enumerate(corpus) if f.shape[0] >= min_needed[i]]
    skipped = len(corpus) - len(usable)
    if skipped:
        log.warning("skipping %d utterances too short for their transcripts", skipped)
    if not usable:
        raise ValueError("no trainable utterances")

    history: list[float] = []
    order_rng = stream(cfg.seed, "shuffle")
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(usable)
        epoch_loss, epoch_items = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [corpus[i] for i in order[start : start + cfg.batch_size]]
            loss, grads, n_ok = loss_and_grads(model, batch, cfg.lambda_)
            if n_ok == 0:
                continue
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss {loss} at epoch {epoch}, batch offset {start}")
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if not math.isfinite(norm):
                raise TrainingDivergedError(f"gradient norm {norm} at epoch {epoch}, batch offset {start}")
            step = cfg.learning_rate
            if cfg.clip_norm and norm > cfg.clip_norm:
                step *= cfg.clip_norm / norm
            for k, g in grads.items():
                model.params[k] -= step * g
            epoch_loss += loss * n_ok
            epoch_items += n_ok
        mean = epoch_loss / max(epoch_items, 1)
        history.append(mean)
        log.info("epoch %d loss %.4f", epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean, model)
    return model, history


def decode_greedy_batch(model: EncoderModel, features: Iterable[np.ndarray]) -> list[list[int]]:
    return [forward(model, f).final_greedy for f in features]
