"""Graph-embedded local self-attention encoder for 3JHH coupling prediction."""

__version__ = "0.1.0"
