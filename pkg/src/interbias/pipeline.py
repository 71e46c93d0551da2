"""End-to-end experiment steps driven by a flat configuration dict.

Both the command line and the acceptance tests go through these functions, so
an in-process run and a CLI run with the same configuration produce the same
artifacts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable

from . import config as config_mod
from .biasing import BiasConfig, KeywordList, harvest_triggers
from .decoding import DecodeConfig
from .encoder import EncoderConfig, EncoderModel, TrainConfig, decode_greedy_batch, train
from .evaluate import EvalReport, ExperimentConfig, corpus_cer, run_experiment
from .lm import NgramModel, fit
from .synth import (
    CorpusBundle,
    CorpusSizes,
    Language,
    SynthConfig,
    Synthesizer,
    Utterance,
    decode_ids,
    encode_text,
    make_corpus,
    make_language,
)

log = logging.getLogger(__name__)


def synth_config(cfg: dict[str, Any]) -> SynthConfig:
    return SynthConfig(
        feature_dim=cfg["synth.feature_dim"],
        frames_per_char=tuple(cfg["synth.frames_per_char"]),
        noise_std=cfg["synth.noise_std"],
        seed=cfg["seed"],
        homophone_distance=cfg["synth.homophone_distance"],
        edge_silence=tuple(cfg["synth.edge_silence"]),
    )


def language(cfg: dict[str, Any]) -> Language:
    return make_language(
        seed=cfg["seed"],
        lexicon_size=cfg["language.lexicon_size"],
        n_oov=cfg["language.n_oov"],
        n_nonoov=cfg["language.n_nonoov"],
        rule_exceptions=cfg["language.rule_exceptions"],
    )


def corpus(cfg: dict[str, Any]) -> CorpusBundle:
    lang = language(cfg)
    sizes = CorpusSizes(
        train=cfg["corpus.train"],
        dev=cfg["corpus.dev"],
        test_occurrences=cfg["corpus.test_occurrences"],
        words_per_sentence=tuple(cfg["corpus.words_per_sentence"]),
        rare_train_count=cfg["corpus.rare_train_count"],
    )
    return make_corpus(synth_config(cfg), lang.lexicon, lang.oov_keywords, sizes, lang.nonoov_keywords)


def encoder_config(cfg: dict[str, Any]) -> EncoderConfig:
    return EncoderConfig(
        num_layers=cfg["model.num_layers"],
        dim=cfg["model.dim"],
        input_dim=cfg["synth.feature_dim"],
        ff_dim=cfg["model.ff_dim"],
        context=cfg["model.context"],
        cond_layers=tuple(cfg["model.cond_layers"]),
        positional=cfg["model.positional"],
        final_norm=cfg["model.final_norm"],
    )


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        lambda_=cfg["train.lambda"],
        learning_rate=cfg["train.learning_rate"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["seed"],
        clip_norm=cfg["train.clip_norm"],
    )


def bias_config(cfg: dict[str, Any]) -> BiasConfig:
    return BiasConfig(w_bias=cfg["bias.w_bias"], m_bias=cfg["bias.m_bias"])


def experiment_config(cfg: dict[str, Any], methods=None, modes=None) -> ExperimentConfig:
    beam = DecodeConfig(
        beam_size=cfg["decode.beam_size"],
        lm_weight=cfg["decode.lm_weight"],
        length_penalty=cfg["decode.length_penalty"],
        kbbs_weight=0.0,
        token_min_logp=cfg["decode.token_min_logp"],
    )
    kwargs = {}
    if methods is not None:
        kwargs["methods"] = tuple(methods)
    if modes is not None:
        kwargs["modes"] = tuple(modes)
    return ExperimentConfig(
        bias=bias_config(cfg),
        beam=beam,
        kbbs_weight=cfg["decode.kbbs_weight"],
        sweep_beam_sizes=tuple(cfg["eval.sweep_beam_sizes"]),
        **kwargs,
    )


def train_model(
    cfg: dict[str, Any],
    train_utts: list[Utterance],
    on_epoch: Callable[[int, float, EncoderModel], None] | None = None,
    init: EncoderModel | None = None,
) -> tuple[EncoderModel, list[float]]:
    scfg = synth_config(cfg)
    vocab = scfg.vocab
    data = [(u.features, encode_text(u.text, vocab)) for u in train_utts]
    model = init or EncoderModel.init(vocab, encoder_config(cfg), cfg["seed"], cfg["model.cond_init_scale"])
    model, history = train(model, data, train_config(cfg), on_epoch)
    # checkpoints store float32; rounding here keeps in-process and on-disk runs identical
    model.round_to_float32()
    return model, history


def dev_cer(model: EncoderModel, utts: list[Utterance]) -> float:
    hyps = decode_greedy_batch(model, [u.features for u in utts])
    return corpus_cer([decode_ids(h, model.vocab) for h in hyps], [u.text for u in utts])


def fit_lm(cfg: dict[str, Any], train_utts: list[Utterance], vocab) -> NgramModel:
    return fit((encode_text(u.text, vocab) for u in train_utts), cfg["lm.order"], vocab, cfg["lm.k"])


def triggers(cfg: dict[str, Any], keywords: list[str], model: EncoderModel) -> tuple[KeywordList, dict[str, str]]:
    return harvest_triggers(
        keywords,
        model,
        Synthesizer(synth_config(cfg)),
        bias_config(cfg),
        renditions=cfg["bias.renditions"],
        drop_conflicts=cfg["bias.drop_conflicts"],
    )


@dataclass
class RunResult:
    corpus: CorpusBundle
    model: EncoderModel
    history: list[float]
    dev_cer: float
    lm: NgramModel
    keywords: KeywordList
    report: EvalReport


def run_all(
    cfg: dict[str, Any] | None = None,
    methods=None,
    modes=None,
    sweep: bool = True,
) -> RunResult:
    """Generate data, train, harvest triggers and evaluate in one process."""
    cfg = cfg or config_mod.load()
    bundle = corpus(cfg)
    model, history = train_model(cfg, bundle.train)
    vocab = model.vocab
    lm = fit_lm(cfg, bundle.train, vocab)
    kl, _ = triggers(cfg, list(bundle.keywords), model)
    exp = experiment_config(cfg, methods, modes)
    report = run_experiment(bundle.test, model, kl, bundle.keywords, lm, exp, sweep=sweep)
    return RunResult(bundle, model, history, dev_cer(model, bundle.dev), lm, kl, report)
