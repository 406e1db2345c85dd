"""Federated conditional conformal prediction.

Modules: ``numerics`` (MLP, Adam, seeded streams, conformal quantile),
``flow`` (conditional coupling flow), ``conformal`` (CQR and set pullback),
``federated`` (in-process federated averaging), ``data`` (scenarios, CSV),
``experiment`` (end-to-end runs and reports) and ``cli``.
"""

__version__ = "0.1.0"
