"""Independent innovation analysis for nonlinear vector autoregressive series.

Subpackages: nnet (dense MLP kernel), simgen (ground-truth generators),
contrastive (GCL/TCL estimators), hmm (EM estimator), baselines (AD-NVAR,
NSVICA), evaluate (recovery metrics), figures (chart rendering), cli.
"""

__version__ = "0.1.0"
