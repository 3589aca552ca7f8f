"""Self-attentive SRU language modelling, multistream CNN acoustic forward path and N-best rescoring."""

__version__ = "0.1.0"
