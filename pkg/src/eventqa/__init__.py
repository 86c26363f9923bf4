"""eventqa: question answering over structured event sequences.

A desk-scale pipeline: per-feature event embeddings, a causal sequence
encoder, a fixed-size query connector, and a small text model that answers
templated questions about a client's event history.
"""

__version__ = "0.1.0"
