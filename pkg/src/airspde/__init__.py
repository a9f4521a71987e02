"""Daily PM10 mapping with a spatio-temporal SPDE latent Gaussian model."""

from airspde._blas import pin_openblas_core

pin_openblas_core()

__version__ = "0.1.0"
