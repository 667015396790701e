"""Differentiable vector-quantized autoencoders for streamline bundles."""
