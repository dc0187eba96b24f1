"""Particle-based mean-field variational inference via Wasserstein gradient flow.

The package is organized around a small set of layers:

- :mod:`mfwgf.measures` — empirical measures (particle clouds) and
  Wasserstein-2 distances between them (exact assignment, sorted 1-D,
  debiased Sinkhorn), plus mixture-label alignment.
- :mod:`mfwgf.model` — the abstract Bayesian latent-variable model and the
  model-generic inference pieces: responsibilities, sample potential, drift.
- :mod:`mfwgf.gmm`, :mod:`mfwgf.mor` — concrete model plug-ins (repulsive
  Gaussian mixture; symmetric mixture of regressions).
- :mod:`mfwgf.engine` — the alternating E-step / Wasserstein-gradient M-step
  iteration with Langevin and explicit-KDE particle schemes.
- :mod:`mfwgf.baselines` — Gibbs samplers, K-means initialization, cloud
  construction.
- :mod:`mfwgf.flowlab` — a 1-D discretization laboratory (Fokker–Planck,
  JKO, explicit and Langevin one-step maps) for scheme-error and
  contraction checks.
- :mod:`mfwgf.cli` — config-driven experiment runner.
"""

__version__ = "0.1.0"

from mfwgf.measures import (
    ParticleCloud,
    W2Report,
    align_components,
    w2_1d,
    w2_exact,
    w2_point_mass,
    w2_sinkhorn,
)
from mfwgf.model import (
    Dataset,
    LatentModelSpec,
    Responsibilities,
    drift,
    responsibilities,
    sample_potential,
)

__all__ = [
    "ParticleCloud",
    "W2Report",
    "w2_point_mass",
    "w2_1d",
    "w2_exact",
    "w2_sinkhorn",
    "align_components",
    "LatentModelSpec",
    "Dataset",
    "Responsibilities",
    "responsibilities",
    "sample_potential",
    "drift",
    "__version__",
]
