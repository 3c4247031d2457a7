"""Graph-regularized semi-supervised training of feed-forward networks.

Modules follow the pipeline: :mod:`data` (datasets and synthetic manifolds),
:mod:`graph` (k-NN affinity graphs), :mod:`partition` (balanced min-cut
partitioning), :mod:`batching` (mini-blocks, meta-batches and neighbour-batch
sampling), :mod:`model` (network, objective, gradients), :mod:`trainer` and
:mod:`cli`.
"""

__version__ = "0.1.0"
