"""Desk-scale one-step diffusion distillation for real-world image
super-resolution: toy teacher models trained from scratch, a one-step
student produced via low-rank finetuning with latent-space score
distillation, plus the degradation pipeline, losses, metrics, and CLI
needed to run the whole recipe."""

__version__ = "0.1.0"
