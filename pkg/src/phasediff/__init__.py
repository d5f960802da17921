"""Prior-conditioned classification diffusion with meta-learned frame re-weighting."""

__version__ = "0.1.0"
