"""Novelty-guarded model-predictive planning at desk scale.

A frozen image autoencoder gives latents, a small MLP predicts the next
latent, a VAE scores how unfamiliar each predicted latent is, and a CEM
planner trades goal progress against that score.
"""

__version__ = "0.1.0"
