"""Offline RL laboratory with uncertainty-gated expert sampling.

The package trains ensembles of Q-networks from fixed replay datasets and
switches between a cheap sub-optimal buffer and an expensive expert buffer
based on the ensemble's epistemic uncertainty.  Every learned component is
paired with an exact dynamic-programming oracle on tabular MDPs, including
occupancy measures and concentrability coefficients.
"""

__version__ = "0.1.0"
