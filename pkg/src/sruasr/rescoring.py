"""N-best rescoring: WER alignment, AM/LM score fusion, expected-WER reranking.

Pipeline per utterance:

1. combined score = am_logp + alpha * log P_LM, where log P_LM mixes a
   sentence-level linear interpolation of the BPE and word SRU models
   (weight gamma) geometrically with the TDNN-LSTM score (weight beta);
2. rank by combined score (stable, ties by incoming rank);
3. rerank the top-k by expected word error under the normalized
   posteriors of all N hypotheses.

All scores are natural logs.
"""

from __future__ import annotations

import functools
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError
from .text import normalize_text

log = logging.getLogger(__name__)

LM_FIELDS = ("tdnn_lstm", "sru_bpe", "sru_word", "ngram")
MAX_N = 100


@dataclass
class Hypothesis:
    words: tuple[str, ...]
    am_logp: float
    lm_logps: dict[str, float] = field(default_factory=dict)
    original_rank: int = 0

    @property
    def text(self) -> str:
        return " ".join(self.words)


@dataclass
class NBestList:
    utt_id: str
    hypotheses: list[Hypothesis]
    reference: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.hypotheses:
            raise DataError(f"utterance {self.utt_id}: empty N-best list")
        ranks = [h.original_rank for h in self.hypotheses]
        if len(set(ranks)) != len(ranks):
            raise DataError(f"utterance {self.utt_id}: duplicate hypothesis ranks")
        for h in self.hypotheses:
            if not math.isfinite(h.am_logp):
                raise DataError(f"utterance {self.utt_id}: non-finite am_logp at rank {h.original_rank}")
            for key, value in h.lm_logps.items():
                if not math.isfinite(value):
                    raise DataError(f"utterance {self.utt_id}: non-finite {key} at rank {h.original_rank}")


@dataclass(frozen=True, order=True)
class Lambdas:
    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise UsageError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"{name} must lie in [0, 1], got {v}")

    def as_list(self) -> list[float]:
        return [self.alpha, self.beta, self.gamma]


@dataclass
class Alignment:
    distance: int
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int
    empty_reference: bool = False

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            return float(self.distance)
        return self.distance / self.ref_len


# alignment -------------------------------------------------------------------

def edit_align(hyp: Sequence[str], ref: Sequence[str]) -> Alignment:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    On the backtrace, among moves that stay on a minimal path, a diagonal
    move (match or substitution) is preferred to an insertion, and an
    insertion to a deletion.  An empty reference scores every hypothesis
    word as an insertion and is flagged.
    """
    n, m = len(ref), len(hyp)
    if n == 0:
        return Alignment(m, 0, m, 0, 0, empty_reference=True)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = dp[i], dp[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dp[i, j] == dp[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return Alignment(int(dp[n, m]), int(subs), ins, dels, n)


def corpus_wer(alignments: Iterable[Alignment]) -> float:
    """Pooled WER: total edits over total reference words."""
    dist = length = 0
    for a in alignments:
        dist += a.distance
        length += a.ref_len
    if length == 0:
        return float(dist)
    return dist / length


# score fusion ----------------------------------------------------------------

def required_fields(lam: Lambdas) -> list[str]:
    if lam.alpha == 0:
        return []
    need = []
    if lam.beta > 0:
        if lam.gamma > 0:
            need.append("sru_bpe")
        if lam.gamma < 1:
            need.append("sru_word")
    if lam.beta < 1:
        need.append("tdnn_lstm")
    return need


def _field(h: Hypothesis, key: str, utt: str) -> float:
    try:
        return h.lm_logps[key]
    except KeyError:
        raise DataError(f"utterance {utt} rank {h.original_rank}: missing lm score '{key}'") from None


def sru_logp(h: Hypothesis, gamma: float, utt: str = "?") -> float:
    """Sentence-level linear interpolation of the BPE and word SRU models."""
    if gamma == 1.0:
        return _field(h, "sru_bpe", utt)
    if gamma == 0.0:
        return _field(h, "sru_word", utt)
    a = math.log(gamma) + _field(h, "sru_bpe", utt)
    b = math.log1p(-gamma) + _field(h, "sru_word", utt)
    top = max(a, b)
    return top + math.log(math.exp(a - top) + math.exp(b - top))


def lm_logp(h: Hypothesis, lam: Lambdas, utt: str = "?") -> float:
    if lam.beta == 1.0:
        return sru_logp(h, lam.gamma, utt)
    if lam.beta == 0.0:
        return _field(h, "tdnn_lstm", utt)
    return lam.beta * sru_logp(h, lam.gamma, utt) + (1.0 - lam.beta) * _field(h, "tdnn_lstm", utt)


def combine_scores(h: Hypothesis, lam: Lambdas, utt: str = "?") -> float:
    if lam.alpha == 0:
        return h.am_logp
    return h.am_logp + lam.alpha * lm_logp(h, lam, utt)


def rank_nbest(nbest: NBestList, lam: Lambdas) -> list[Hypothesis]:
    """Descending combined score; exact ties fall back to the incoming rank."""
    scored = [(combine_scores(h, lam, nbest.utt_id), h) for h in nbest.hypotheses]
    scored.sort(key=lambda sh: (-sh[0], sh[1].original_rank))
    return [h for _, h in scored]


def posteriors(scores: Sequence[float]) -> np.ndarray:
    """Normalized posteriors from log scores (max-shifted softmax)."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / math.fsum(e)


@functools.lru_cache(maxsize=1 << 18)
def pair_wer(hyp: tuple[str, ...], ref: tuple[str, ...]) -> float:
    """WER of ``hyp`` against ``ref``; memoized since grid search repeats the same pairs."""
    return edit_align(hyp, ref).wer


def expected_errors(
    candidates: Sequence[Hypothesis], pool: Sequence[Hypothesis], post: np.ndarray
) -> list[float]:
    """E[err(S)] = sum_i P(S_i) err(S | S_i) with err the WER against S_i."""
    out = []
    for cand in candidates:
        terms = [p * pair_wer(cand.words, ref.words) for p, ref in zip(post, pool)]
        out.append(math.fsum(terms))
    return out


@dataclass
class Reranked:
    hypotheses: list[Hypothesis]  # final order
    ranked: list[Hypothesis]  # combined-score order; scores, posteriors and errors follow it
    scores: list[float]
    posteriors: np.ndarray
    expected_errors: list[float]


def expected_wer_rerank(
    ranked: Sequence[Hypothesis],
    lam: Lambdas,
    top_k: int = 20,
    utt: str = "?",
    posterior_pool: str = "all",
) -> Reranked:
    """Reorder the first ``top_k`` of ``ranked`` by ascending expected WER.

    Posteriors are normalized over every hypothesis (``posterior_pool="all"``)
    or only over the top-k (``"top_k"``); the references in the expectation
    are the same pool.  Ties keep the incoming order and hypotheses below
    ``top_k`` do not move.
    """
    if top_k < 1:
        raise UsageError(f"top_k must be >= 1, got {top_k}")
    if posterior_pool not in ("all", "top_k"):
        raise UsageError(f"posterior_pool must be 'all' or 'top_k', got {posterior_pool!r}")
    ranked = list(ranked)
    scores = [combine_scores(h, lam, utt) for h in ranked]
    k = min(top_k, len(ranked))
    pool = ranked if posterior_pool == "all" else ranked[:k]
    post = posteriors(scores[: len(pool)])
    errs = expected_errors(ranked[:k], pool, post)
    order = sorted(range(k), key=lambda i: (errs[i], i))
    final = [ranked[i] for i in order] + ranked[k:]
    return Reranked(final, ranked, scores, post, errs)


def rescore(nbest: NBestList, lam: Lambdas, top_k: int = 20, posterior_pool: str = "all") -> Reranked:
    return expected_wer_rerank(rank_nbest(nbest, lam), lam, top_k, nbest.utt_id, posterior_pool)


# corpus evaluation -----------------------------------------------------------

STAGES = ("am_only", "lm_fused", "mbr")


def stage_selections(nbest: NBestList, lam: Lambdas, top_k: int = 20, posterior_pool: str = "all") -> dict:
    """1-best hypothesis after each pipeline stage."""
    am_only = rank_nbest(nbest, Lambdas(0.0, 1.0, 1.0))[0]
    fused = rank_nbest(nbest, lam)
    mbr = expected_wer_rerank(fused, lam, top_k, nbest.utt_id, posterior_pool).hypotheses[0]
    incoming = min(nbest.hypotheses, key=lambda h: h.original_rank)
    return {"incoming": incoming, "am_only": am_only, "lm_fused": fused[0], "mbr": mbr}


def _need_reference(nbest: NBestList) -> tuple[str, ...]:
    if nbest.reference is None:
        raise DataError(f"utterance {nbest.utt_id}: no reference transcript")
    return nbest.reference


def evaluate(corpus: Sequence[NBestList], lam: Lambdas, top_k: int = 20, posterior_pool: str = "all") -> dict:
    """Staged WER report over a corpus with references.

    ``stages`` holds the pooled WER of the 1-best after AM-only ranking,
    after LM fusion and after expected-WER reranking; ``corpus_wer`` is the
    last of these.  ``incoming`` (the list's own first hypothesis) is
    reported for information.  Utterances appear in id order.
    """
    per_stage = {name: [] for name in ("incoming",) + STAGES}
    utterances = []
    for nbest in sorted(corpus, key=lambda nb: nb.utt_id):
        ref = _need_reference(nbest)
        picks = stage_selections(nbest, lam, top_k, posterior_pool)
        entry = {"utt": nbest.utt_id, "reference": " ".join(ref)}
        for name, hyp in picks.items():
            per_stage[name].append(edit_align(hyp.words, ref))
        final = per_stage["mbr"][-1]
        entry.update(
            hypothesis=picks["mbr"].text,
            original_rank=picks["mbr"].original_rank,
            distance=final.distance,
            substitutions=final.substitutions,
            insertions=final.insertions,
            deletions=final.deletions,
            ref_len=final.ref_len,
            wer=final.wer,
            empty_reference=final.empty_reference,
        )
        utterances.append(entry)
    stages = {name: corpus_wer(al) for name, al in per_stage.items()}
    return {
        "lambdas": {"alpha": lam.alpha, "beta": lam.beta, "gamma": lam.gamma},
        "top_k": top_k,
        "corpus_wer": stages["mbr"],
        "stages": stages,
        "stage_order": list(STAGES),
        "n_utterances": len(utterances),
        "n_ref_words": sum(u["ref_len"] for u in utterances),
        "flagged_empty_references": [u["utt"] for u in utterances if u["empty_reference"]],
        "utterances": utterances,
    }


def _frange(lo: float, hi: float, step: float) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


DEFAULT_GRID = {
    "alpha": _frange(0.0, 2.0, 0.2),
    "beta": _frange(0.0, 1.0, 0.1),
    "gamma": _frange(0.0, 1.0, 0.1),
}


@dataclass
class GridResult:
    best: Lambdas
    best_wer: float
    table: list[tuple[Lambdas, int, int]]  # (lambdas, total edits, total reference words)


def grid_search(
    corpus: Sequence[NBestList],
    grid: dict[str, Sequence[float]] | None = None,
    top_k: int = 20,
    posterior_pool: str = "all",
) -> GridResult:
    """Exhaustive search for the lambdas minimizing pooled dev WER.

    WER is compared as integer edit totals, so equal-WER points tie
    exactly; ties go to the lexicographically smallest (alpha, beta, gamma).
    """
    grid = DEFAULT_GRID if grid is None else grid
    axes = [sorted(set(float(v) for v in grid.get(k, ())) ) for k in ("alpha", "beta", "gamma")]
    if any(not axis for axis in axes):
        raise UsageError("grid must give at least one value for each of alpha, beta and gamma")
    refs = [_need_reference(nb) for nb in corpus]
    if not corpus:
        raise DataError("grid search needs a non-empty dev corpus")
    total_words = sum(len(r) for r in refs)
    table = []
    best_key = None
    for a, b, g in itertools.product(*axes):
        lam = Lambdas(a, b, g)
        edits = 0
        for nb, ref in zip(corpus, refs):
            pick = rescore(nb, lam, top_k, posterior_pool).hypotheses[0]
            edits += edit_align(pick.words, ref).distance
        table.append((lam, edits, total_words))
        key = (edits, a, b, g)
        if best_key is None or key < best_key:
            best_key = key
    best = Lambdas(*best_key[1:])
    return GridResult(best, best_key[0] / total_words if total_words else float(best_key[0]), table)


# file formats ----------------------------------------------------------------

def hypothesis_from_record(rec: dict, line_no: int = 0) -> tuple[str, Hypothesis]:
    try:
        utt = str(rec["utt"])
        rank = int(rec["rank"])
        am = float(rec["am_logp"])
        text = normalize_text(str(rec["text"]))
        lm = {str(k): float(v) for k, v in (rec.get("lm") or {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"N-best line {line_no}: malformed record ({exc})") from exc
    return utt, Hypothesis(tuple(text.split()), am, lm, rank)


def read_nbest_records(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from exc
    return out


def read_nbest(path, max_n: int = MAX_N, references: dict[str, str] | None = None) -> list[NBestList]:
    """Group JSONL hypotheses by utterance, keeping the ``max_n`` best incoming ranks."""
    groups: dict[str, list[Hypothesis]] = {}
    for line_no, rec in enumerate(read_nbest_records(path), 1):
        utt, hyp = hypothesis_from_record(rec, line_no)
        groups.setdefault(utt, []).append(hyp)
    if not groups:
        raise DataError(f"{path}: no hypotheses")
    out = []
    for utt in sorted(groups):
        hyps = sorted(groups[utt], key=lambda h: h.original_rank)
        if len(hyps) > max_n:
            log.info("utterance %s: keeping %d of %d hypotheses", utt, max_n, len(hyps))
            hyps = hyps[:max_n]
        ref = None
        if references is not None and utt in references:
            ref = tuple(references[utt].split())
        out.append(NBestList(utt, hyps, ref))
    return out


def hypothesis_record(utt: str, h: Hypothesis, **extra) -> dict:
    rec = {"utt": utt, "rank": h.original_rank, "text": h.text, "am_logp": h.am_logp, "lm": dict(h.lm_logps)}
    rec.update(extra)
    return rec


def dump_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def read_references(path) -> dict[str, str]:
    refs = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            utt, sep, text = line.partition("\t")
            if not sep:
                utt, _, text = line.partition(" ")
            if utt in refs:
                raise DataError(f"{path}:{line_no}: duplicate utterance id {utt}")
            refs[utt] = normalize_text(text)
    return refs


def attach_references(corpus: Sequence[NBestList], refs: dict[str, str]) -> list[NBestList]:
    missing = [nb.utt_id for nb in corpus if nb.utt_id not in refs]
    if missing:
        raise DataError(f"no reference for utterances: {', '.join(missing)}")
    return [NBestList(nb.utt_id, nb.hypotheses, tuple(refs[nb.utt_id].split())) for nb in corpus]
