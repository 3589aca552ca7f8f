from .attention import MhaParams, causal_mha
from .model import (
    LmConfig,
    LmModel,
    SelfAttentiveSruBlock,
    conditional_logprobs,
    lm_logprob,
    load_lm,
    perplexity,
    save_lm,
    sequence_logprobs,
)
from .sru import SruCell, SruTape, linear_u, sru_cell_backward, sru_cell_forward, sru_record

__all__ = [
    "MhaParams",
    "causal_mha",
    "LmConfig",
    "LmModel",
    "SelfAttentiveSruBlock",
    "conditional_logprobs",
    "lm_logprob",
    "load_lm",
    "perplexity",
    "save_lm",
    "sequence_logprobs",
    "SruCell",
    "SruTape",
    "linear_u",
    "sru_cell_backward",
    "sru_cell_forward",
    "sru_record",
]
