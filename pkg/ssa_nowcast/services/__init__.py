"""Workflow services: data, training, evaluation, explanation, checkpoints."""
