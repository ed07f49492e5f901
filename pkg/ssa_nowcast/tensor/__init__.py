"""Differentiable tensor kernels and their verification."""
