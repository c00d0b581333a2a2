"""Federated-learning privacy-audit simulator.

Trains small models under synchronous FedAvg, records the complete
per-client/per-round update trace a semi-honest server would observe,
runs a suite of membership-inference attacks against that trace (a
one-tailed likelihood-ratio attack in two variants plus six single-signal
baselines), applies configurable gradient- and data-level defenses, and
evaluates everything with ROC/AUC, TPR at a low-FPR operating point,
privacy-utility Pareto fronts, and the 2-D hypervolume indicator.
"""

__version__ = "0.1.0"
