"""Flat ``key = value`` run configuration.

Keys are dotted (``train.epochs``); values are Python literals, comma lists
(``2,3,5``) or bare strings. ``#`` starts a comment. Unknown keys are errors so
typos do not silently fall back to defaults.
"""

from __future__ import annotations

import ast
import json
from pathlib import Path
from typing import Any

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workdir": "run",
    # synthetic audio and language
    "synth.feature_dim": 16,
    "synth.frames_per_char": (1, 3),
    "synth.noise_std": 0.5,
    "synth.homophone_distance": 1.0,
    "synth.edge_silence": (0, 2),
    "language.lexicon_size": 300,
    "language.n_oov": 24,
    "language.n_nonoov": 12,
    "language.rule_exceptions": 0.0,
    "corpus.train": 2000,
    "corpus.dev": 200,
    "corpus.test_occurrences": 10,
    "corpus.words_per_sentence": (3, 5),
    "corpus.rare_train_count": 2,
    # encoder
    "model.num_layers": 4,
    "model.dim": 32,
    "model.ff_dim": 64,
    "model.context": 2,
    "model.cond_layers": (1, 2, 3),
    "model.positional": True,
    "model.final_norm": True,
    "model.cond_init_scale": 5.0,
    "train.lambda": 0.5,
    "train.learning_rate": 0.05,
    "train.epochs": 8,
    "train.batch_size": 16,
    "train.clip_norm": 5.0,
    "train.dev_cer_gate": 0.05,
    # language model
    "lm.order": 5,
    "lm.k": 0.1,
    # biasing
    "bias.w_bias": 0.9,
    "bias.m_bias": 3,
    "bias.renditions": 1,
    "bias.drop_conflicts": True,
    # decoding
    "decode.beam_size": 10,
    "decode.lm_weight": 0.5,
    "decode.length_penalty": 0.2,
    "decode.kbbs_weight": 3.0,
    "decode.token_min_logp": -16.0,
    "decode.nbest": 1,
    "eval.sweep_beam_sizes": (2, 3, 5, 10, 20),
}


class ConfigError(ValueError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if "," in text:
        return tuple(parse_value(part) for part in text.split(",") if part.strip())
    return text


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, tuple):
        if value == "":
            return ()
        if not isinstance(value, (tuple, list)):
            value = (value,)
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if default is not None and value is not None and not isinstance(value, type(default)):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def parse(text: str) -> dict[str, Any]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {n}: expected key = value")
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = _coerce(key, parse_value(value))
    return out


def load(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Defaults, then the file (key = value text or a JSON run manifest), then overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        if text.lstrip().startswith("{"):
            snapshot = json.loads(text)["config"]
            for key, value in snapshot.items():
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}: unknown key {key!r}")
                cfg[key] = _coerce(key, value)
        else:
            cfg.update(parse(text))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def dump(cfg: dict[str, Any]) -> str:
    lines = []
    for key in DEFAULTS:
        value = cfg[key]
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        else:
            text = repr(value) if isinstance(value, str) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
