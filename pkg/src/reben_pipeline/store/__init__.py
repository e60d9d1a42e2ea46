"""Tensor record serialization and the embedded key-value store."""
