"""Relightable articulated volumetric-primitive rendering.

An OLAT teacher decoder learns point-light appearance on a set of
volumetric primitives riding a skinned coarse mesh; a fast student decoder
conditioned on visibility-aware envmap features is distilled from it.
"""

__version__ = "0.1.0"
