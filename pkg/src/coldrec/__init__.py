"""Cold-start sequential recommendation with frozen content embeddings and bounded deltas."""

__version__ = "0.1.0"
