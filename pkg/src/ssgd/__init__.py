"""Simple stochastic bilevel optimization: hypergradient estimators, SSGD and baselines."""
from __future__ import annotations

__version__ = "0.1.0"
