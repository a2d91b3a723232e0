"""Recurrent Highway Network laboratory.

Cells with hand-derived BPTT, Gershgorin analysis of temporal Jacobians, and
desk-scale training experiments.
"""

__version__ = "0.1.0"
