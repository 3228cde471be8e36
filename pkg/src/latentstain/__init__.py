"""HER2 scoring from H&E patches via latent IHC feature hallucination."""

__version__ = "0.1.0"
