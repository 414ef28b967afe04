"""
conicwave: classical trajectories, Hamilton-Jacobi modifiers, and
modified wave-operator experiments on an asymptotically conic end.
"""

__version__ = "0.1.0"
