"""Toolkit for tuning extended-state-observer control loops.

Simulates two benchmark plants under observer-based disturbance-rejection
control, generates labeled performance datasets, trains a neural
performance estimator on them, and selects observer eigenvalue triples
minimizing weighted integral criteria.  Error-bound certificates for the
observer and the closed loop round out the package.
"""

__version__ = "0.1.0"
