"""Stacked self-attentive SRU language model.

Each block computes ``u = causal_mha(x)`` and feeds it to the SRU
recurrence in place of the linear projection; the block output is the SRU
output ``h`` (the recurrence already carries the highway term, so no extra
residual or normalization is added).  Order information comes from the
recurrence alone.  Every utterance starts from a zero cell state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..checkpoint import load_checkpoint, save_checkpoint
from ..errors import ConfigurationError, DataError
from ..tensor import Rng, log_softmax, mm, seqsum, softmax
from ..text import BpeModel, BpeTokenizer, CharTokenizer, Tokenizer, Vocabulary, WordTokenizer
from .attention import MhaParams, mha_backward, mha_record
from .sru import SruCell, sru_cell_backward, sru_record

BLOCK_PARAMS = ("wq", "wk", "wv", "wo", "v", "v_prime", "b", "b_prime")


@dataclass
class LmConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 2
    d_proj: int = 64
    tie_weights: bool = False
    dropout: float = 0.0

    def validate(self):
        if self.vocab_size < 4:
            raise ConfigurationError(f"vocabulary of {self.vocab_size} tokens is too small")
        if self.layers < 1 or self.d < 1:
            raise ConfigurationError("model needs at least one layer and a positive width")
        if self.heads < 1 or self.d_proj % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide projected width {self.d_proj}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class SelfAttentiveSruBlock:
    mha: MhaParams
    cell: SruCell

    def forward(self, x: np.ndarray) -> np.ndarray:
        u, _ = mha_record(x, self.mha)
        h, _ = sru_record(x, self.cell, u, np.zeros(x.shape[:-2] + (self.cell.d,)))
        return h


class LmModel:
    """Parameters live in ``self.params`` (insertion-ordered); blocks are views.

    With ``tie_weights`` the output projection is ``embed.T`` and has no
    storage of its own, so the two can never drift apart.
    """

    def __init__(self, config: LmConfig, params: dict[str, np.ndarray]):
        config.validate()
        self.config = config
        self.params = params
        expected = self.param_names()
        if list(params) != expected:
            raise ConfigurationError(f"parameter names {list(params)} do not match {expected}")

    def param_names(self) -> list[str]:
        names = ["embed"]
        for i in range(self.config.layers):
            names += [f"block{i}.{p}" for p in BLOCK_PARAMS]
        if not self.config.tie_weights:
            names.append("out_w")
        names.append("out_b")
        return names

    @classmethod
    def init(cls, config: LmConfig, seed: int = 0) -> "LmModel":
        config.validate()
        rng = Rng(seed)
        d, V = config.d, config.vocab_size
        params = {"embed": rng.normal((V, d), 1.0)}
        for i in range(config.layers):
            mha = MhaParams.init(d, config.d_proj, 3 * d, config.heads, rng)
            cell = SruCell.init(d, rng)
            for name in BLOCK_PARAMS:
                params[f"block{i}.{name}"] = getattr(mha if name.startswith("w") else cell, name)
        if not config.tie_weights:
            params["out_w"] = rng.normal((d, V), 1.0 / np.sqrt(d))
        params["out_b"] = np.zeros(V)
        return cls(config, params)

    @property
    def blocks(self) -> list[SelfAttentiveSruBlock]:
        out = []
        for i in range(self.config.layers):
            p = {name: self.params[f"block{i}.{name}"] for name in BLOCK_PARAMS}
            mha = MhaParams(self.config.heads, p["wq"], p["wk"], p["wv"], p["wo"])
            out.append(SelfAttentiveSruBlock(mha, SruCell(p["v"], p["v_prime"], p["b"], p["b_prime"])))
        return out

    def output_weight(self) -> np.ndarray:
        return self.params["embed"].T if self.config.tie_weights else self.params["out_w"]

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "LmModel":
        return LmModel(self.config, {k: v.copy() for k, v in self.params.items()})


def _check_ids(model: LmModel, ids) -> None:
    V = model.config.vocab_size
    for i in ids:
        if not 0 <= int(i) < V:
            raise DataError(f"token id {i} is outside the vocabulary of size {V}")


def forward(model: LmModel, inputs: np.ndarray, rng: Rng | None = None):
    """Logits ``(B, T, V)`` for integer inputs ``(B, T)`` plus a backward cache.

    ``rng`` switches on training-mode dropout on block outputs when the
    configured rate is non-zero.
    """
    inputs = np.asarray(inputs, dtype=np.int64)
    x = model.params["embed"][inputs]
    caches = []
    rate = model.config.dropout
    for block in model.blocks:
        u, mcache = mha_record(x, block.mha)
        h, tape = sru_record(x, block.cell, u, np.zeros(x.shape[:-2] + (block.cell.d,)))
        keep = None
        if rng is not None and rate > 0.0:
            keep = (rng.uniform(h.shape) >= rate) / (1.0 - rate)
            h = h * keep
        caches.append((mcache, tape, keep))
        x = h
    logits = mm(x, model.output_weight()) + model.params["out_b"]
    return logits, (inputs, caches, x)


def loss_and_grads(model: LmModel, inputs, targets, weights, rng: Rng | None = None):
    """Weighted next-token negative log-likelihood and its gradient.

    ``weights`` is ``(B, T)``; padding positions carry weight 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    logits, (inputs, caches, top) = forward(model, inputs, rng)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float(seqsum((picked * weights).ravel()))

    dlogits = softmax(logits)
    np.put_along_axis(
        dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1
    )
    dlogits *= weights[..., None]

    grads = {name: np.zeros_like(p) for name, p in model.params.items()}
    V = model.config.vocab_size
    flat_d = dlogits.reshape(-1, V)
    grads["out_b"] = seqsum(flat_d, axis=0)
    d_out_w = mm(top.reshape(-1, top.shape[-1]).T, flat_d)
    if model.config.tie_weights:
        grads["embed"] += d_out_w.T
    else:
        grads["out_w"] = d_out_w
    dx = mm(dlogits, model.output_weight().T)

    for i in range(model.config.layers - 1, -1, -1):
        block = model.blocks[i]
        mcache, tape, keep = caches[i]
        if keep is not None:
            dx = dx * keep
        g_sru = sru_cell_backward(tape, block.cell, dx)
        dx_mha, g_mha = mha_backward(mcache, block.mha, g_sru["u"])
        for name in ("v", "v_prime", "b", "b_prime"):
            grads[f"block{i}.{name}"] = g_sru[name]
        for name, g in g_mha.items():
            grads[f"block{i}.{name}"] = g
        dx = g_sru["x"] + dx_mha

    np.add.at(grads["embed"], inputs, dx)
    return loss, grads


def _wrap(bos: int, eos: int, ids: Sequence[int]):
    return [bos] + list(ids), list(ids) + [eos]


def conditional_logprobs(model: LmModel, ids: Sequence[int], bos: int = 0) -> np.ndarray:
    """``(len(ids) + 1, V)`` log-distributions; row ``t`` conditions on ``<s> w_1..w_t``."""
    _check_ids(model, ids)
    logits, _ = forward(model, np.array([[bos] + list(ids)]))
    return log_softmax(logits[0])


def sequence_logprobs(
    model: LmModel, corpus: Sequence[Sequence[int]], bos: int = 0, eos: int = 1, batch_size: int = 32
) -> list[float]:
    """Natural-log probability of each utterance, ``</s>`` included.

    Utterances are batched by length; results equal one-at-a-time scoring
    bit for bit because every position is computed independently of padding.
    """
    for ids in corpus:
        _check_ids(model, ids)
    order = sorted(range(len(corpus)), key=lambda i: (len(corpus[i]), i))
    out = [0.0] * len(corpus)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        T = max(len(corpus[i]) for i in chunk) + 1
        inputs = np.full((len(chunk), T), eos, dtype=np.int64)
        targets = np.full((len(chunk), T), eos, dtype=np.int64)
        for row, i in enumerate(chunk):
            src, tgt = _wrap(bos, eos, corpus[i])
            inputs[row, : len(src)] = src
            targets[row, : len(tgt)] = tgt
        logits, _ = forward(model, inputs)
        logp = log_softmax(logits)
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        for row, i in enumerate(chunk):
            out[i] = float(seqsum(picked[row, : len(corpus[i]) + 1]))
    return out


def lm_logprob(model: LmModel, ids: Sequence[int], bos: int = 0, eos: int = 1) -> float:
    """``sum_t log P(w_t | <s> w_<t)`` over the tokens and the closing ``</s>``."""
    return sequence_logprobs(model, [list(ids)], bos, eos)[0]


def perplexity(model: LmModel, corpus: Sequence[Sequence[int]], bos: int = 0, eos: int = 1) -> float:
    """Pooled perplexity: ``exp(-sum logprob / sum (len + 1))``.

    Each utterance contributes its tokens plus one ``</s>`` prediction;
    ``<s>`` is context only and is not counted.
    """
    if not corpus:
        raise DataError("perplexity needs a non-empty corpus")
    total = math.fsum(sequence_logprobs(model, corpus, bos, eos))
    count = sum(len(ids) + 1 for ids in corpus)
    return math.exp(-total / count)


# checkpoints ---------------------------------------------------------------

def save_lm(directory, model: LmModel, tokenizer: Tokenizer, seed: int | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tokenizer.vocab.save(directory / "vocab.txt")
    tok = {"kind": tokenizer.kind, "vocab": "vocab.txt", "bpe": None}
    if isinstance(tokenizer, BpeTokenizer):
        tokenizer.model.save(directory / "bpe.json")
        tok["bpe"] = "bpe.json"
    manifest = {
        "format": "sruasr-checkpoint/1",
        "kind": "sru_lm",
        "config": asdict(model.config),
        "tokenizer": tok,
        "seed": seed,
    }
    return save_checkpoint(directory, manifest, model.params)


def load_tokenizer(kind: str, vocab: Vocabulary, bpe_path=None) -> Tokenizer:
    if kind == "char":
        return CharTokenizer(vocab)
    if kind == "word":
        return WordTokenizer(vocab)
    if kind == "bpe":
        if bpe_path is None:
            raise DataError("a BPE tokenizer needs its merge file")
        return BpeTokenizer(BpeModel.load(bpe_path), vocab)
    raise DataError(f"unknown tokenizer kind {kind!r}")


def load_lm(directory) -> tuple[LmModel, Tokenizer]:
    directory = Path(directory)
    manifest, tensors = load_checkpoint(directory)
    if manifest.get("kind") != "sru_lm":
        raise DataError(f"{directory} is not a language-model checkpoint")
    config = LmConfig(**manifest["config"])
    tok = manifest["tokenizer"]
    vocab = Vocabulary.load(directory / tok["vocab"])
    bpe = directory / tok["bpe"] if tok.get("bpe") else None
    tokenizer = load_tokenizer(tok["kind"], vocab, bpe)
    if len(vocab) != config.vocab_size:
        raise DataError(f"vocabulary has {len(vocab)} tokens but the model expects {config.vocab_size}")
    return LmModel(config, tensors), tokenizer

