"""Seeded synthetic corpora and N-best lists for demos and tests.

Sentences come from a small phrase grammar over a fixed word list, so a
language model trained on them can tell grammatical word sequences from
corrupted ones.  N-best lists are built around a reference sentence:
every hypothesis is the reference with a few random word edits, scored by
a noisy stand-in acoustic model that only weakly prefers the truth.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .tensor import Rng

DETERMINERS = ["THE", "A", "HIS", "HER", "THAT", "EVERY", "ONE"]
ADJECTIVES = [
    "OLD", "YOUNG", "LITTLE", "GREAT", "DARK", "QUIET", "BRIGHT", "COLD", "WARM", "HEAVY",
    "GENTLE", "STRANGE", "PALE", "TALL", "SMALL", "GREEN",
]
NOUNS = [
    "MAN", "WOMAN", "CHILD", "DOG", "HORSE", "HOUSE", "RIVER", "ROAD", "DOOR", "WINDOW",
    "GARDEN", "CAPTAIN", "KING", "LETTER", "SHIP", "TREE", "FIRE", "STONE", "VILLAGE", "FOREST",
    "MORNING", "NIGHT", "BOOK", "TABLE", "FRIEND", "MOTHER", "FATHER", "SOLDIER", "BIRD", "HILL",
]
VERBS = [
    "SAW", "FOUND", "TOOK", "HELD", "OPENED", "CLOSED", "WATCHED", "FOLLOWED", "CARRIED", "LEFT",
    "REACHED", "KNEW", "HEARD", "PASSED", "LOVED", "BUILT",
]
INTRANSITIVE = ["WAITED", "SLEPT", "LAUGHED", "STOOD", "WALKED", "SPOKE", "TURNED", "RESTED"]
PREPOSITIONS = ["IN", "ON", "NEAR", "BY", "UNDER", "ACROSS", "THROUGH", "BEYOND"]
ADVERBS = ["SLOWLY", "AGAIN", "SOON", "THEN", "QUICKLY", "ALONE"]
CONJUNCTIONS = ["AND", "BUT", "WHILE"]
PRONOUNS = ["HE", "SHE", "THEY", "WE", "I"]

LEXICON = sorted(
    set(DETERMINERS + ADJECTIVES + NOUNS + VERBS + INTRANSITIVE + PREPOSITIONS + ADVERBS + CONJUNCTIONS + PRONOUNS)
)


def _pick(rng: Rng, words):
    return words[rng.integers(len(words))]


def _noun_phrase(rng: Rng) -> list[str]:
    out = [_pick(rng, DETERMINERS)]
    if rng.uniform() < 0.5:
        out.append(_pick(rng, ADJECTIVES))
    out.append(_pick(rng, NOUNS))
    return out


def _clause(rng: Rng) -> list[str]:
    subject = [_pick(rng, PRONOUNS)] if rng.uniform() < 0.3 else _noun_phrase(rng)
    if rng.uniform() < 0.65:
        out = subject + [_pick(rng, VERBS)] + _noun_phrase(rng)
    else:
        out = subject + [_pick(rng, INTRANSITIVE)]
    if rng.uniform() < 0.45:
        out += [_pick(rng, PREPOSITIONS)] + _noun_phrase(rng)
    if rng.uniform() < 0.2:
        out.append(_pick(rng, ADVERBS))
    return out


def sentence(rng: Rng) -> str:
    words = _clause(rng)
    if rng.uniform() < 0.25:
        words += [_pick(rng, CONJUNCTIONS)] + _clause(rng)
    return " ".join(words)


def corpus(n_sentences: int, seed: int) -> list[str]:
    rng = Rng(seed)
    return [sentence(rng) for _ in range(n_sentences)]


def corpus_of_size(n_bytes: int, seed: int) -> list[str]:
    """Sentences until the text (one per line) reaches ``n_bytes``."""
    rng = Rng(seed)
    out, size = [], 0
    while size < n_bytes:
        s = sentence(rng)
        out.append(s)
        size += len(s) + 1
    return out


def _corrupt(words: list[str], n_edits: int, rng: Rng) -> list[str]:
    words = list(words)
    for _ in range(n_edits):
        op = rng.uniform()
        if op < 0.6 or len(words) < 2:
            pos = rng.integers(len(words))
            words[pos] = _pick(rng, LEXICON)
        elif op < 0.8:
            del words[rng.integers(len(words))]
        else:
            words.insert(rng.integers(len(words) + 1), _pick(rng, LEXICON))
    return words


def nbest_lists(
    n_utts: int,
    seed: int,
    n_best: int = 12,
    am_noise: float = 2.0,
    utt_prefix: str = "utt",
) -> tuple[list[dict], dict[str, str]]:
    """Hypothesis records (N-best JSONL schema) and references.

    The acoustic score of a hypothesis is a per-utterance constant minus
    ``1.5 * edits`` plus Gaussian noise of scale ``am_noise``, so the
    acoustic 1-best is often wrong.  The ``tdnn_lstm`` field charges 2.5
    nats per word and 1.2 per edit, with its own independent noise.  Hypotheses are listed in acoustic-score order.
    """
    rng = Rng(seed)
    records, refs = [], {}
    for u in range(n_utts):
        utt = f"{utt_prefix}{u:03d}"
        ref = sentence(rng).split()
        refs[utt] = " ".join(ref)
        texts = [ref]
        seen = {tuple(ref)}
        tries = 0
        while len(texts) < n_best and tries < 50 * n_best:
            tries += 1
            cand = _corrupt(ref, 1 + rng.integers(3), rng)
            if cand and tuple(cand) not in seen:
                seen.add(tuple(cand))
                texts.append(cand)
        hyps = []
        for words in texts:
            edits = _edit_count(words, ref)
            am = -40.0 * len(ref) - 1.5 * edits + float(rng.normal(1, am_noise)[0])
            tl = -2.5 * len(words) - 1.2 * edits + float(rng.normal(1, 1.5)[0])
            hyps.append((am, words, tl))
        hyps.sort(key=lambda h: -h[0])
        for rank, (am, words, tl) in enumerate(hyps):
            records.append(
                {"utt": utt, "rank": rank, "text": " ".join(words), "am_logp": am, "lm": {"tdnn_lstm": tl}}
            )
    return records, refs


def _edit_count(hyp: list[str], ref: list[str]) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def mbr_example() -> list[dict]:
    """Three hypotheses whose posteriors are .35/.33/.32 when only the AM counts."""
    return [
        {"utt": "mbr", "rank": 0, "text": "A B", "am_logp": math.log(0.35), "lm": {}},
        {"utt": "mbr", "rank": 1, "text": "C B", "am_logp": math.log(0.33), "lm": {}},
        {"utt": "mbr", "rank": 2, "text": "C D", "am_logp": math.log(0.32), "lm": {}},
    ]


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_refs(path, refs: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{u}\t{t}\n" for u, t in sorted(refs.items())), encoding="utf-8")


def write_fixtures(directory, seed: int = 7) -> Path:
    """Regenerate every shipped fixture file under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "lm_train.txt").write_text("\n".join(corpus(1500, seed)) + "\n", encoding="utf-8")
    (d / "lm_dev.txt").write_text("\n".join(corpus(150, seed + 1)) + "\n", encoding="utf-8")
    (d / "char_train.txt").write_text("\n".join(corpus_of_size(100_000, seed + 2)) + "\n", encoding="utf-8")
    (d / "char_dev.txt").write_text("\n".join(corpus_of_size(10_000, seed + 3)) + "\n", encoding="utf-8")
    dev_records, dev_refs = nbest_lists(30, seed + 4, utt_prefix="dev")
    test_records, test_refs = nbest_lists(30, seed + 5, utt_prefix="test")
    write_jsonl(d / "nbest_dev.jsonl", dev_records)
    write_refs(d / "refs_dev.txt", dev_refs)
    write_jsonl(d / "nbest_test.jsonl", test_records)
    write_refs(d / "refs_test.txt", test_refs)
    write_jsonl(d / "nbest_mbr.jsonl", mbr_example())
    return d
