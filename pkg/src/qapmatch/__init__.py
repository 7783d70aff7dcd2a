"""Solver toolkit for quadratic assignment style graph matching.

Pairwise and multi-graph matching on association graphs: learned
message-passing solvers with differentiable assignment heads, spectral and
random-walk baselines, plus synthetic point-registration and QAPLIB-format
benchmark harnesses.
"""

__version__ = "0.1.0"
