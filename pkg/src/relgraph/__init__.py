"""Scene-graph prediction on synthetic scenes.

The package is organized as: ``tensor`` (float64 autodiff core), ``scenes``
(synthetic scene generator and dataset files), ``model`` (the prediction
network and its losses), ``train`` (deterministic training loop and
checkpoints), ``evaluate`` (recall@K, attention diagnostics, ablations) and
``cli`` (reproducible command-line runs).
"""

__version__ = "0.1.0"
