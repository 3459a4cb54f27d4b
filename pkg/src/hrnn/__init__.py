"""Autoregressive 8-bit audio model: complex gated linear recurrences under a causal pooling pyramid."""

__version__ = "0.1.0"
