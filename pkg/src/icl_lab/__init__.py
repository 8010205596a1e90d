"""Desk-scale in-context-learning laboratory.

Submodules:
  tensor      float64 autodiff on numpy arrays
  optim       AdamW, gradient clipping, cosine schedule
  seeding     deterministic seed derivation
  tasks       function families and prompt construction
  dynamics    discrete-time dynamical systems and trajectories
  baselines   classical per-prompt estimators
  models      four sequence architectures over a shared embedding
  training    curriculum, config, and the training loop
  evaluation  MSE-vs-context reports, OOD prompts, paired comparisons
  cli         command-line entry point

The package root stays import-light on purpose: the CLI must be able to pin
BLAS thread counts before numpy is first loaded.
"""

__version__ = "0.1.0"

__all__ = [
    "baselines",
    "cli",
    "dynamics",
    "evaluation",
    "models",
    "optim",
    "seeding",
    "tasks",
    "tensor",
    "training",
]
