"""Stochastic optimization of X-risks.

X-risks are compositional objectives in which every example is compared
against a large reference set: AUROC, AP, partial AUC, NDCG and MAP, top-K
and precision-at-recall criteria, and global contrastive losses.  The
package compiles them into one of four problem families and optimizes
them with moving-average (SOX) solvers.
"""

from . import data, metrics, objective, optimizer, scorer, surrogate

__version__ = "0.1.0"

__all__ = ["data", "metrics", "objective", "optimizer", "scorer", "surrogate", "__version__"]
