"""Multi-view RGB-D manipulation policy library.

Disentangled semantic/geometric encoding over multi-view RGB-D, gated
fusion of raw-depth features with a frozen depth-expert prior, a rotary
3D-position-aware transformer, and heatmap-based action decoding, together
with a synthetic tabletop environment, a sensor-noise robustness harness,
and a behavior-cloning trainer.
"""

__version__ = "0.1.0"
