"""Sound field magnitude reconstruction: modal room simulator, Helmholtz kernel
baseline and a conditional diffusion model."""

__version__ = "0.1.0"
