"""Math word problem solving with a joint number-infilling training task.

The package has three layers: a symbolic substrate (expr, corpus), a small
reverse-mode autodiff engine (autodiff), and the models plus training
machinery built on it (solver, reexam, fusion, harness).
"""

from . import autodiff, corpus, expr, fusion, harness, reexam, solver

__all__ = ["autodiff", "corpus", "expr", "fusion", "harness", "reexam", "solver"]
__version__ = "0.1.0"
