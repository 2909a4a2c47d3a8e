"""Long-tail facial-expression video augmentation on a synthetic face domain.

Two stages: AU-prior prompt construction feeding an autoregressive latent
video diffusion sampler, whose sampling hyperparameters are picked by a
policy trained with audited multi-part rewards.
"""

__version__ = "0.1.0"
