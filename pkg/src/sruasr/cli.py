"""Command-line entry point: ``sruasr <command> [options]``.

Exit codes: 0 success, 1 usage or validation error, 2 data or runtime error.
Every command is a pure function of its flags, input files and ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__, synthetic
from .acoustic import (
    MultistreamConfig,
    MultistreamModel,
    SpecAugmentConfig,
    load_acoustic,
    multistream_forward,
    read_features,
    save_acoustic,
    spec_augment,
    write_matrices,
)
from .checkpoint import dump_json
from .errors import ConfigurationError, DataError, SruAsrError, UsageError
from .lm.model import LmConfig, load_lm, save_lm, sequence_logprobs
from .rescoring import (
    DEFAULT_GRID,
    LM_FIELDS,
    MAX_N,
    Lambdas,
    attach_references,
    corpus_wer,
    dump_jsonl,
    edit_align,
    evaluate,
    grid_search,
    hypothesis_record,
    read_nbest,
    read_nbest_records,
    read_references,
    rescore,
)
from .tensor import Rng
from .text import (
    BpeModel,
    BpeTokenizer,
    CharTokenizer,
    NgramModel,
    WordTokenizer,
    normalize_text,
    read_corpus,
    train_bpe,
)
from .training import TrainConfig, train_lm, write_curve

log = logging.getLogger("sruasr")


class ArgParser(argparse.ArgumentParser):
    """Argument errors exit with 1 rather than argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc.msg}") from exc


def _corpus(path, what: str) -> list[str]:
    try:
        lines = read_corpus(path)
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror}") from exc
    if not lines:
        raise DataError(f"{what} {path} is empty")
    return lines


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# train-bpe -------------------------------------------------------------------

def cmd_train_bpe(args) -> int:
    corpus = _corpus(args.corpus, "corpus")
    model = train_bpe(corpus, args.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "bpe.json")
    model.vocabulary().save(out / "vocab.txt")
    n_sym = len(model.symbols())
    print(f"merges: {len(model.merges)}  symbols: {n_sym} (+{len(model.vocabulary()) - n_sym} specials)  -> {out}")
    return 0


# train-lm --------------------------------------------------------------------

def _build_tokenizer(spec: str, corpus, word_vocab: int | None):
    if spec == "char":
        return CharTokenizer.build(corpus)
    if spec == "word":
        return WordTokenizer.build(corpus, word_vocab)
    path = Path(spec)
    if path.is_dir():
        path = path / "bpe.json"
    try:
        return BpeTokenizer(BpeModel.load(path))
    except OSError as exc:
        raise DataError(f"cannot read BPE model {path}: {exc.strerror}") from exc


def _split_config(payload: dict) -> tuple[dict, dict]:
    unknown = set(payload) - {"model", "train"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected 'model' and 'train'")
    model = dict(payload.get("model", {}))
    allowed = {f.name for f in fields(LmConfig)} - {"vocab_size"}
    if set(model) - allowed:
        raise UsageError(f"unknown model options {sorted(set(model) - allowed)}")
    return model, dict(payload.get("train", {}))


def cmd_train_lm(args) -> int:
    payload = _read_json(args.config) if args.config else {}
    model_opts, train_opts = _split_config(payload)
    if args.seed is not None:
        train_opts["seed"] = args.seed
    tconf = TrainConfig.from_dict(train_opts)
    train_text = _corpus(args.corpus, "training corpus")
    dev_text = _corpus(args.dev, "dev corpus")
    tokenizer = _build_tokenizer(args.tokenizer, train_text, args.word_vocab_size)
    train_ids = [tokenizer.encode(s) for s in train_text]
    dev_ids = [tokenizer.encode(s) for s in dev_text]
    mconf = LmConfig(vocab_size=len(tokenizer.vocab), **model_opts)
    mconf.validate()

    bigram = NgramModel(2, tokenizer.vocab, 1.0).fit(train_ids).perplexity(dev_ids)
    result = train_lm(train_ids, dev_ids, mconf, tconf, tokenizer.vocab.bos, tokenizer.vocab.eos)

    out = Path(args.out)
    save_lm(out, result.model, tokenizer, tconf.seed)
    write_curve(out / "curve.csv", result.curve)
    _write_text(out / "train_config.json", dump_json({"model": asdict(mconf), "train": asdict(tconf)}))
    if not args.no_plots:
        from .plotting import plot_curve

        plot_curve(result.curve, out / "curve.png", baseline=bigram)
    final = result.curve[-1].dev_ppl
    print(f"tokenizer: {tokenizer.kind}  vocabulary: {len(tokenizer.vocab)}  parameters: {result.model.n_params()}")
    print(f"steps: {len(result.step_losses)}  final dev perplexity: {final:.4f}")
    print(f"add-1 bigram dev perplexity: {bigram:.4f}  ({'below' if final < bigram else 'NOT below'} baseline)")
    return 0


# score-nbest -----------------------------------------------------------------

def cmd_score_nbest(args) -> int:
    try:
        model, tokenizer = load_lm(args.lm_checkpoint)
    except (KeyError, TypeError) as exc:
        raise DataError(f"cannot read checkpoint {args.lm_checkpoint}: {exc}") from exc
    if args.tokenizer:
        tokenizer = _build_tokenizer(args.tokenizer, [], None)
        if len(tokenizer.vocab) != model.config.vocab_size:
            raise DataError("tokenizer vocabulary does not match the checkpoint")
    records = read_nbest_records(args.nbest)
    texts = [normalize_text(str(r.get("text", ""))) for r in records]
    ids = [tokenizer.encode(t) for t in texts]
    unknown = sum(tokenizer.count_unknown(t) for t in texts)
    scores = sequence_logprobs(model, ids, tokenizer.vocab.bos, tokenizer.vocab.eos)
    for rec, score in zip(records, scores):
        rec.setdefault("lm", {})
        rec["lm"][args.field] = score
    _write_text(args.out, dump_jsonl(records))
    if unknown:
        log.warning("%d out-of-vocabulary pieces were scored as <unk>", unknown)
    print(f"scored {len(records)} hypotheses into field {args.field}  (<unk> pieces: {unknown})")
    return 0


# rescore / grid-search -------------------------------------------------------

def _lambdas(args) -> Lambdas:
    if args.lambdas_file:
        payload = _read_json(args.lambdas_file)
        try:
            return Lambdas(float(payload["alpha"]), float(payload["beta"]), float(payload["gamma"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{args.lambdas_file} must hold numeric alpha, beta and gamma") from exc
    if args.lambdas is None:
        raise UsageError("give --lambdas ALPHA BETA GAMMA or --lambdas-file")
    return Lambdas(*args.lambdas)


def _load_nbest(args, refs_required: bool):
    refs = None
    if args.refs:
        try:
            refs = read_references(args.refs)
        except OSError as exc:
            raise DataError(f"cannot read references {args.refs}: {exc.strerror}") from exc
    elif refs_required:
        raise UsageError("--refs is required")
    try:
        corpus = read_nbest(args.nbest, args.max_n)
    except OSError as exc:
        raise DataError(f"cannot read N-best file {args.nbest}: {exc.strerror}") from exc
    if refs is not None:
        corpus = attach_references(corpus, refs)
    return corpus


def cmd_rescore(args) -> int:
    lam = _lambdas(args)
    corpus = _load_nbest(args, refs_required=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    onebest, reranked = [], []
    for nb in corpus:
        result = rescore(nb, lam, args.top_k, args.posterior_pool)
        by_rank = {h.original_rank: i for i, h in enumerate(result.ranked)}
        onebest.append(f"{nb.utt_id}\t{result.hypotheses[0].text}\n")
        for final_rank, h in enumerate(result.hypotheses):
            i = by_rank[h.original_rank]
            extra = {"final_rank": final_rank, "score": result.scores[i]}
            if i < len(result.posteriors):
                extra["posterior"] = float(result.posteriors[i])
            if i < len(result.expected_errors):
                extra["expected_wer"] = result.expected_errors[i]
            reranked.append(hypothesis_record(nb.utt_id, h, **extra))
    _write_text(out / "onebest.txt", "".join(onebest))
    _write_text(out / "reranked.jsonl", dump_jsonl(reranked))
    print(f"rescored {len(corpus)} utterances with alpha={lam.alpha:g} beta={lam.beta:g} gamma={lam.gamma:g}")
    if any(nb.reference is not None for nb in corpus):
        report = evaluate(corpus, lam, args.top_k, args.posterior_pool)
        _write_text(out / "report.json", dump_json(report))
        with open(out / "stages.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["stage", "wer"])
            for name in ["incoming"] + report["stage_order"]:
                writer.writerow([name, repr(report["stages"][name])])
        if not args.no_plots:
            from .plotting import plot_stages

            plot_stages(report["stages"], report["stage_order"], out / "stages.png")
        for name in report["stage_order"]:
            print(f"  {name:<9} WER {100 * report['stages'][name]:6.2f}%")
        if report["flagged_empty_references"]:
            log.warning("empty references: %s", ", ".join(report["flagged_empty_references"]))
    return 0


def _grid_spec(path) -> dict:
    if not path:
        return DEFAULT_GRID
    payload = _read_json(path)
    for key in payload:
        if key not in ("alpha", "beta", "gamma"):
            raise UsageError(f"unknown grid axis {key!r}")
    grid = dict(DEFAULT_GRID)
    grid.update(payload)
    return grid


def cmd_grid_search(args) -> int:
    corpus = _load_nbest(args, refs_required=True)
    result = grid_search(corpus, _grid_spec(args.grid), args.top_k, args.posterior_pool)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best = result.best
    _write_text(
        out / "best_lambdas.json",
        dump_json({"alpha": best.alpha, "beta": best.beta, "gamma": best.gamma, "dev_wer": result.best_wer}),
    )
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "beta", "gamma", "errors", "ref_words", "wer"])
        for lam, edits, words in result.table:
            writer.writerow([lam.alpha, lam.beta, lam.gamma, edits, words, repr(edits / words if words else 0.0)])
    if not args.no_plots:
        from .plotting import plot_grid

        plot_grid(result.table, out / "grid.png")
    print(
        f"best alpha={best.alpha:g} beta={best.beta:g} gamma={best.gamma:g}  "
        f"dev WER {100 * result.best_wer:.2f}% over {len(result.table)} grid points"
    )
    return 0


# wer -------------------------------------------------------------------------

def cmd_wer(args) -> int:
    try:
        hyp = read_references(args.hyp)
        ref = read_references(args.ref)
    except OSError as exc:
        raise DataError(f"cannot read {exc.filename}: {exc.strerror}") from exc
    missing = sorted(set(ref) - set(hyp))
    extra = sorted(set(hyp) - set(ref))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"no hypothesis for: {', '.join(missing)}")
        if extra:
            parts.append(f"no reference for: {', '.join(extra)}")
        raise DataError("utterance ids differ; " + "; ".join(parts))
    alignments = []
    print(f"{'utt':<16} {'ref':>4} {'sub':>4} {'ins':>4} {'del':>4} {'wer%':>7}")
    for utt in sorted(ref):
        a = edit_align(hyp[utt].split(), ref[utt].split())
        alignments.append(a)
        flag = "  (empty reference)" if a.empty_reference else ""
        print(f"{utt:<16} {a.ref_len:>4} {a.substitutions:>4} {a.insertions:>4} {a.deletions:>4} {100 * a.wer:>7.2f}{flag}")
    print(f"WER {100 * corpus_wer(alignments):.2f}%  ({sum(a.distance for a in alignments)} errors / {sum(a.ref_len for a in alignments)} words)")
    return 0


# acoustic model --------------------------------------------------------------

def _am_config(path) -> MultistreamConfig:
    if not path:
        return MultistreamConfig()
    try:
        return MultistreamConfig.from_dict(_read_json(path))
    except (TypeError, KeyError) as exc:
        raise UsageError(f"{path}: bad acoustic model config ({exc})") from exc


def cmd_init_am(args) -> int:
    model = MultistreamModel.init(_am_config(args.config), args.seed, positive=args.positive)
    save_acoustic(args.out, model, args.seed)
    print(f"wrote acoustic model ({sum(t.size for t in model.named_tensors().values())} values) -> {args.out}")
    return 0


def cmd_am_forward(args) -> int:
    if args.model:
        model = load_acoustic(args.model)
    else:
        model = MultistreamModel.init(_am_config(args.config), args.seed)
    items = []
    for utt, feat in read_features(args.features):
        if feat.shape[1] != model.config.feat_dim:
            raise DataError(f"utterance {utt}: {feat.shape[1]} bins, model expects {model.config.feat_dim}")
        items.append((utt, multistream_forward(feat, model)))
    write_matrices(args.out, items, key="logits")
    print(f"wrote logits for {len(items)} utterances -> {args.out}")
    return 0


def cmd_spec_augment(args) -> int:
    try:
        cfg = SpecAugmentConfig(**_read_json(args.config)) if args.config else SpecAugmentConfig()
    except TypeError as exc:
        raise UsageError(f"{args.config}: bad SpecAugment config ({exc})") from exc
    rng = Rng(args.seed)
    items = [(utt, spec_augment(feat, cfg, rng)) for utt, feat in read_features(args.features)]
    write_matrices(args.out, items)
    print(f"masked {len(items)} utterances -> {args.out}")
    return 0


def cmd_make_fixtures(args) -> int:
    out = synthetic.write_fixtures(args.out, args.seed)
    print(f"wrote synthetic fixtures -> {out}")
    return 0


# parser ----------------------------------------------------------------------

def _add_rescore_flags(p, with_lambdas: bool) -> None:
    p.add_argument("--nbest", required=True, help="N-best JSONL (one hypothesis per line)")
    p.add_argument("--top-k", type=int, default=20, help="hypotheses reranked by expected WER (default 20)")
    p.add_argument("--max-n", type=int, default=MAX_N, help="keep at most this many hypotheses per utterance")
    p.add_argument(
        "--posterior-pool",
        choices=["all", "top_k"],
        default="all",
        help="normalize posteriors over all hypotheses (default) or only the top-k",
    )
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    if with_lambdas:
        p.add_argument("--lambdas", type=float, nargs=3, metavar=("ALPHA", "BETA", "GAMMA"))
        p.add_argument("--lambdas-file", help="JSON with alpha, beta, gamma (e.g. grid-search output)")


def build_parser() -> ArgParser:
    parser = ArgParser(prog="sruasr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgParser)
    sub.required = True

    p = sub.add_parser("train-bpe", help="learn BPE merges from a corpus")
    p.add_argument("--corpus", required=True, help="text file, one sentence per line")
    p.add_argument("--vocab-size", type=int, required=True, help="target symbol count: characters, </w> and merges (the 3 specials are added on top)")
    p.add_argument("--out", required=True, help="output directory for bpe.json and vocab.txt")
    p.set_defaults(func=cmd_train_bpe)

    p = sub.add_parser("train-lm", help="train a self-attentive SRU language model")
    p.add_argument("--corpus", required=True, help="training text, one sentence per line")
    p.add_argument("--dev", required=True, help="dev text for perplexity")
    p.add_argument("--tokenizer", default="char", help="'char', 'word', or a BPE model (bpe.json or its directory)")
    p.add_argument("--word-vocab-size", type=int, default=None, help="cap for the word vocabulary")
    p.add_argument("--config", help='JSON with optional "model" and "train" sections')
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--no-plots", action="store_true", help="skip curve.png")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("score-nbest", help="add SRU LM log-probabilities to an N-best file")
    p.add_argument("--nbest", required=True)
    p.add_argument("--lm-checkpoint", required=True)
    p.add_argument("--tokenizer", help="BPE model overriding the one stored with the checkpoint")
    p.add_argument("--field", required=True, choices=[f for f in LM_FIELDS if f != "tdnn_lstm"])
    p.add_argument("--out", required=True, help="output N-best JSONL")
    p.set_defaults(func=cmd_score_nbest)

    p = sub.add_parser("rescore", help="fuse scores, rank, and rerank by expected WER")
    _add_rescore_flags(p, with_lambdas=True)
    p.add_argument("--refs", help="optional references ('utt<TAB>text'); adds report.json and stages.csv")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("grid-search", help="pick lambdas minimizing dev WER")
    _add_rescore_flags(p, with_lambdas=False)
    p.add_argument("--refs", required=True, help="references ('utt<TAB>text')")
    p.add_argument("--grid", help='JSON {"alpha": [...], "beta": [...], "gamma": [...]}; missing axes use defaults')
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("wer", help="corpus WER of a hypothesis file against references")
    p.add_argument("--hyp", required=True, help="'utt<TAB>text' lines")
    p.add_argument("--ref", required=True, help="'utt<TAB>text' lines")
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("init-am", help="write a randomly initialized multistream acoustic model")
    p.add_argument("--config", help="MultistreamConfig JSON (defaults: 6-9-12, 17 layers per stream)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive", action="store_true", help="non-negative weights (receptive-field probes)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_am)

    p = sub.add_parser("am-forward", help="per-frame acoustic model outputs")
    p.add_argument("--features", required=True, help='JSONL {"utt", "frames": [[...], ...]}')
    p.add_argument("--model", help="acoustic checkpoint; default: random model from --seed")
    p.add_argument("--config", help="MultistreamConfig JSON for the random model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help='JSONL {"utt", "logits"}')
    p.set_defaults(func=cmd_am_forward)

    p = sub.add_parser("spec-augment", help="time and frequency masking of feature matrices")
    p.add_argument("--features", required=True)
    p.add_argument("--config", help="JSON with n_time_masks, max_time_width, n_freq_masks, max_freq_width")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spec_augment)

    p = sub.add_parser("make-fixtures", help="regenerate the synthetic corpora and N-best lists")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"sruasr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (SruAsrError, OSError, ValueError) as exc:
        print(f"sruasr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
