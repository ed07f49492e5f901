"""Layers and the SSA-UNet model."""
