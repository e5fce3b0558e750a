"""Recurrent GRU-style video denoiser with a small numpy autograd engine."""

__version__ = "0.1.0"
