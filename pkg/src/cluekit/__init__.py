"""cluekit: counterfactual latent uncertainty explanations at desk scale.

Subpackages:
  diffcore  - minimal reverse-mode autodiff engine
  models    - VAE + deep-ensemble bundle, training, persistence
  clue      - constrained latent-space counterfactual search
  diversity - six diversity metrics over counterfactual sets
  divclue   - diversity-regularized generation (simultaneous/sequential/penalty)
  glam      - amortized latent translation mappers and baselines
  data      - synthetic dataset generators and certainty partitioning
  cli       - command-line orchestration
"""

from . import diffcore, models, clue, diversity, divclue, glam, data  # noqa: F401

__version__ = "0.1.0"
