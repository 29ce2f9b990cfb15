"""Membership-inference auditing for diffusion-based tabular synthesizers."""

__version__ = "0.1.0"
