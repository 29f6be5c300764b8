"""Saliency-ranked L1 sparsity on BN scales and structured filter pruning on numpy."""

from .model import FilterId, Model, NetworkSpec, build_plain_cnn, build_residual_cnn, count_flops, count_params

__all__ = ["FilterId", "Model", "NetworkSpec", "build_plain_cnn", "build_residual_cnn", "count_flops", "count_params"]
