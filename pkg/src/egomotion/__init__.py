"""Unified egocentric motion reconstruction, forecasting, and generation.

A conditional motion-diffusion stack over a head-centric sequence
representation, together with the multi-view fitting pipeline, synthetic
data generators, the evaluation metric suite, and a reproducible CLI.
"""

__version__ = "0.1.0"
