"""Desk-scale neural view synthesis toolchain.

A from-scratch stack for learning to render novel views of small
synthetic scenes: a reverse-mode tensor engine, pinhole/epipolar
geometry, a convolutional image encoder, transformer-based view and ray
aggregation, volume rendering baselines, a procedural scene generator
with a ground-truth raytracer, and training/evaluation drivers.
"""

__version__ = "0.1.0"
