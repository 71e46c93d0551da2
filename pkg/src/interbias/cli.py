"""Command-line driver: ``interbias gen|train|triggers|decode|eval``.

Every command reads the same ``key = value`` configuration (or a previously
written run manifest), writes its artifacts under ``workdir`` and records a
``<command>.manifest.json`` next to them. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np

from . import config as config_mod
from . import pipeline
from .biasing import KeywordConflictError, KeywordList, interbias_hook, substitute
from .ctc import AlignmentError, InvalidInputError, Vocabulary, greedy_decode, path_log_prob
from .decoding import DecodeConfig, KeywordTrie, prefix_beam_search
from .encoder import CheckpointError, EncoderModel, TrainingDivergedError, forward
from .evaluate import METHODS, MODES, run_experiment
from .lm import NgramModel
from .synth import SynthError, decode_ids, read_split, write_split

log = logging.getLogger("interbias")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# -- paths and manifests -----------------------------------------------------------


class Layout:
    def __init__(self, workdir: str | Path):
        self.root = Path(workdir)
        self.corpus = self.root / "corpus"
        self.vocab = self.corpus / "vocab.txt"
        self.keyword_meta = self.corpus / "keywords.tsv"
        self.lexicon = self.corpus / "lexicon.txt"
        self.model = self.root / "model.ckpt"
        self.loss = self.root / "loss.csv"
        self.lm = self.root / "lm.txt"
        self.triggers = self.root / "triggers.tsv"
        self.decode = self.root / "decode"
        self.report_csv = self.root / "report.csv"
        self.report_txt = self.root / "report.txt"

    def manifest(self, command: str) -> Path:
        return self.root / f"{command}.manifest.json"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(layout: Layout, command: str, cfg: dict[str, Any], inputs: list[Path], outputs: list[Path]) -> Path:
    """Record the resolved configuration and artifact hashes of one command."""
    snapshot = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "version": _version(),
        "numpy": np.__version__,
        "config": snapshot,
        "inputs": {str(p): _sha256(p) for p in inputs if p.is_file()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
    }
    path = layout.manifest(command)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the earlier pipeline step first)")
    return path


def _guard_overwrite(paths: list[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)}; pass --force")


def _load_vocab(layout: Layout) -> Vocabulary:
    return Vocabulary.load(_require(layout.vocab, "vocabulary"))


def _load_keyword_flags(layout: Layout) -> dict[str, bool]:
    flags = {}
    for line in _require(layout.keyword_meta, "keyword metadata").read_text(encoding="utf-8").splitlines():
        if line:
            kw, flag = line.split("\t")
            flags[kw] = flag == "oov"
    return flags


def _load_model(layout: Layout, vocab: Vocabulary) -> EncoderModel:
    return EncoderModel.load(_require(layout.model, "model checkpoint"), vocab)


# -- commands ----------------------------------------------------------------------


def cmd_gen(args, cfg: dict[str, Any]) -> int:
    layout = Layout(cfg["workdir"])
    outputs = [layout.corpus / f"{s}.tsv" for s in ("train", "dev", "test")] + [layout.vocab, layout.keyword_meta]
    _guard_overwrite(outputs, args.force)
    bundle = pipeline.corpus(cfg)
    layout.corpus.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        write_split(layout.corpus, name, bundle.split(name))
    pipeline.synth_config(cfg).vocab.save(layout.vocab)
    layout.keyword_meta.write_text(
        "".join(f"{k}\t{'oov' if v else 'non-oov'}\n" for k, v in bundle.keywords.items()), encoding="utf-8"
    )
    layout.lexicon.write_text("".join(w + "\n" for w in bundle.lexicon), encoding="utf-8")
    write_manifest(layout, "gen", cfg, [], outputs + [layout.lexicon])
    print(f"wrote {len(bundle.train)}/{len(bundle.dev)}/{len(bundle.test)} utterances to {layout.corpus}")
    return EXIT_OK


def cmd_train(args, cfg: dict[str, Any]) -> int:
    layout = Layout(cfg["workdir"])
    vocab = _load_vocab(layout)
    init = None
    if args.resume:
        init = _load_model(layout, vocab)
    else:
        _guard_overwrite([layout.model, layout.loss], args.force)
    train_utts = read_split(_require(layout.corpus, "corpus"), "train")
    dev_utts = read_split(layout.corpus, "dev")

    rows = []

    def on_epoch(epoch: int, loss: float, _model) -> None:
        rows.append((epoch, loss))
        log.info("epoch %d loss %.4f", epoch, loss)

    model, _ = pipeline.train_model(cfg, train_utts, on_epoch, init=init)
    model.save(layout.model)
    with open(layout.loss, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows((e, f"{l:.6f}") for e, l in rows)
    pipeline.fit_lm(cfg, train_utts, vocab).save(layout.lm)
    # score the checkpoint as stored, so later commands see the same numbers
    cer = pipeline.dev_cer(EncoderModel.load(layout.model, vocab), dev_utts)
    write_manifest(layout, "train", cfg, [layout.corpus / "train.tsv", layout.vocab], [layout.model, layout.loss, layout.lm])
    print(f"dev CER {100 * cer:.2f}% (gate {100 * cfg['train.dev_cer_gate']:.2f}%)")
    if cer > cfg["train.dev_cer_gate"]:
        raise NumericalError(f"dev CER {cer:.4f} above the configured gate {cfg['train.dev_cer_gate']}")
    return EXIT_OK


def cmd_triggers(args, cfg: dict[str, Any]) -> int:
    layout = Layout(cfg["workdir"])
    out = Path(args.output) if args.output else layout.triggers
    _guard_overwrite([out], args.force)
    vocab = _load_vocab(layout)
    model = _load_model(layout, vocab)
    if args.keywords:
        src = Path(args.keywords)
        if not src.is_file():
            raise UsageError(f"keyword file not found: {src}")
        keywords = [w.strip() for w in src.read_text(encoding="utf-8").splitlines() if w.strip()]
    else:
        keywords = list(_load_keyword_flags(layout))
    kl, errors = pipeline.triggers(cfg, keywords, model)
    for kw, err in errors.items():
        print(f"skipped {kw!r}: {err}", file=sys.stderr)
    kl.save(out)
    write_manifest(layout, "triggers", cfg, [layout.model], [out])
    print(f"wrote {len(kl)} keywords to {out}")
    return EXIT_OK


def _keyword_list(args, layout: Layout, needed: bool) -> KeywordList | None:
    path = Path(args.keywords) if args.keywords else layout.triggers
    if not path.is_file():
        if needed:
            raise UsageError(f"keyword file not found: {path} (needed for textsub, interbias and kbbs)")
        return None
    return KeywordList.load(path)


def cmd_decode(args, cfg: dict[str, Any]) -> int:
    layout = Layout(cfg["workdir"])
    method, mode = args.method, args.mode
    needs_kw = method in ("textsub", "interbias") or mode == "kbbs"
    keywords = _keyword_list(args, layout, needs_kw)
    beam = cfg["decode.beam_size"] if mode != "greedy" else 1
    out = Path(args.output) if args.output else layout.decode / f"{args.split}-{method}-{mode}-b{beam}.tsv"
    _guard_overwrite([out], args.force)
    vocab = _load_vocab(layout)
    model = _load_model(layout, vocab)
    utts = read_split(_require(layout.corpus, "corpus"), args.split)
    lm = NgramModel.load(_require(layout.lm, "language model"), vocab) if mode != "greedy" else None
    bias = pipeline.bias_config(cfg)
    hook = interbias_hook(keywords, bias, vocab) if method == "interbias" else None
    trie = KeywordTrie.from_words(keywords.keywords, vocab) if mode == "kbbs" else None
    dcfg = DecodeConfig(
        beam_size=beam,
        lm_weight=cfg["decode.lm_weight"],
        length_penalty=cfg["decode.length_penalty"],
        kbbs_weight=cfg["decode.kbbs_weight"] if mode == "kbbs" else 0.0,
        token_min_logp=cfg["decode.token_min_logp"],
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for u in utts:
            grid = forward(model, u.features, hook).final_grid
            if mode == "greedy":
                path = grid.probs.argmax(axis=1)
                nbest = [(greedy_decode(grid), path_log_prob(path, grid))]
            else:
                hyps = prefix_beam_search(grid, dcfg, lm, trie)[: cfg["decode.nbest"]]
                nbest = [(list(h.prefix), h.score) for h in hyps]
            for rank, (ids, score) in enumerate(nbest, 1):
                if method == "textsub":
                    ids = substitute(ids, keywords, vocab)[0]
                fh.write(f"{u.id}\t{rank}\t{score:.6f}\t{decode_ids(ids, vocab)}\n")
    inputs = [layout.model, layout.corpus / f"{args.split}.tsv"] + ([layout.lm] if lm else [])
    write_manifest(layout, "decode", cfg, inputs, [out])
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args, cfg: dict[str, Any]) -> int:
    layout = Layout(cfg["workdir"])
    out_csv = Path(args.output) if args.output else layout.report_csv
    out_txt = out_csv.with_suffix(".txt")
    _guard_overwrite([out_csv], args.force)
    methods = tuple(args.method) if args.method else METHODS
    modes = tuple(args.mode) if args.mode else MODES
    needs_kw = any(m in ("textsub", "interbias") for m in methods) or "kbbs" in modes
    keywords = _keyword_list(args, layout, needs_kw) or KeywordList()
    vocab = _load_vocab(layout)
    model = _load_model(layout, vocab)
    flags = _load_keyword_flags(layout)
    utts = read_split(_require(layout.corpus, "corpus"), args.split)
    lm = NgramModel.load(_require(layout.lm, "language model"), vocab)
    exp = pipeline.experiment_config(cfg, methods, modes)
    sweep = args.beam_size is None
    if args.beam_size is not None:
        exp = type(exp)(**{**exp.__dict__, "beam_sizes": tuple(args.beam_size)})
    report = run_experiment(utts, model, keywords, flags, lm, exp, sweep=sweep)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    out_csv.write_text(report.to_csv(), encoding="utf-8")
    out_txt.write_text(report.table() + "\n", encoding="utf-8")
    write_manifest(layout, "eval", cfg, [layout.model, layout.lm, layout.corpus / f"{args.split}.tsv"], [out_csv, out_txt])
    print(report.table())
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("beam sizes must be positive")
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file or a *.manifest.json to replay")
    common.add_argument("--seed", type=int)
    common.add_argument("--workdir")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="interbias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="train the encoder and the n-gram LM")
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")

    p = sub.add_parser("triggers", parents=[common], help="harvest keyword triggers via synthesis")
    p.add_argument("--keywords", help="file with one keyword per line (default: corpus keywords)")
    p.add_argument("--output")

    p = sub.add_parser("decode", parents=[common], help="decode a split to a hypothesis TSV")
    p.add_argument("--method", choices=METHODS, default="selfcond")
    p.add_argument("--mode", choices=MODES, default="greedy")
    p.add_argument("--beam-size", type=int)
    p.add_argument("--w-bias", type=float)
    p.add_argument("--kbbs-weight", type=float)
    p.add_argument("--keywords", help="trigger TSV (default: <workdir>/triggers.tsv)")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--output")

    p = sub.add_parser("eval", parents=[common], help="score methods and decode modes to a report CSV")
    p.add_argument("--method", action="append", choices=METHODS)
    p.add_argument("--mode", action="append", choices=MODES)
    p.add_argument("--beam-size", type=_int_list, help="comma-separated beam sizes for beam/kbbs cells")
    p.add_argument("--w-bias", type=float)
    p.add_argument("--kbbs-weight", type=float)
    p.add_argument("--keywords", help="trigger TSV (default: <workdir>/triggers.tsv)")
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--output")
    return parser


def resolve_config(args) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = config_mod.parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workdir is not None:
        overrides["workdir"] = args.workdir
    if getattr(args, "w_bias", None) is not None:
        overrides["bias.w_bias"] = args.w_bias
    if getattr(args, "kbbs_weight", None) is not None:
        overrides["decode.kbbs_weight"] = args.kbbs_weight
    beam = getattr(args, "beam_size", None)
    if isinstance(beam, int):
        overrides["decode.beam_size"] = beam
    return config_mod.load(args.config, overrides)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "triggers": cmd_triggers, "decode": cmd_decode, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, KeywordConflictError, SynthError, InvalidInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingDivergedError, AlignmentError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
