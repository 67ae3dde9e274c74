"""Desk-scale hierarchical reasoning model on Sudoku.

Subpackages cover the Sudoku engine, the equivalence-transformation group,
a minimal reverse-mode tensor library, the recurrent model itself, deep
supervision training, guess-scaling inference, and latent-trajectory
analysis tooling.
"""

__version__ = "0.1.0"
