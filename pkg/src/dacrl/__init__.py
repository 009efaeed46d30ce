"""Deconfounding actor-critic toolkit for ventilator dynamic treatment regimes.

Submodules:

- ``data``: trajectories, the 7x7x7 action space, value bins, cohort splits
- ``synthetic``: confounded autoregressive cohort generator with an optimal-action oracle
- ``encoder``: event embeddings and the recurrent health-state encoder
- ``resampling``: mortality risk model and survivor matching for balanced batches
- ``rewards``: propensity weights, behavior clone, short- and long-term rewards
- ``trainer``: the actor-critic loop and its ablations
- ``adaptation``: dynamics-matching transfer to a new cohort
- ``evaluation``: WIS, estimated mortality, ACC metrics and figures
- ``cli``: the ``dacrl`` command
"""

__version__ = "0.1.0"
