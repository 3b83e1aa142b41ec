"""Front speeds of KPP reaction-diffusion fronts in random shear flows."""

__version__ = "0.1.0"
