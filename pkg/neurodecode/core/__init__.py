"""Tensor algebra, layers and optimizers."""
