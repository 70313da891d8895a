"""Differentiable 3D morphable face engine.

Linear face synthesis, SH illumination, differentiable rasterization, a
weakly supervised loss suite, multi-scale attention network blocks, and
analysis-by-synthesis coefficient fitting, all in double precision with
finite-difference-verified gradients.
"""

__version__ = "0.1.0"
