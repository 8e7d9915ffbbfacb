"""Respiratory-cessation classification pipeline.

End-to-end desk-scale pipeline: synthetic RFID observation streams from a
programmable breathing mannequin model, RCS-derived feature engineering,
a small 1D-CNN trained from scratch, k-bit quantized inference with
energy/size accounting, conversion to a spiking network, event-driven
simulation on a modeled tile-based neuromorphic substrate, and
accuracy-energy design-space exploration.
"""

__version__ = "0.1.0"
