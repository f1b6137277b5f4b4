"""Post-selection inference for linear mixed models after cAIC selection.

Library layout:

- ``lmm``: model types, likelihoods, mixed-model equations, fitting, MSE.
- ``caic``: conditional AIC with variance-estimation penalty, selection.
- ``regions``: quadratic selection regions for the selected model.
- ``sampler``: seeded truncated multivariate-normal sampling.
- ``intervals``: post-selection and naive confidence intervals.
- ``simulation``: nested-error-regression coverage studies.
- ``dataio``: clustered CSV ingestion, log-shift transform, reports.
"""

from . import caic, dataio, intervals, lmm, regions, sampler, simulation

__all__ = ["lmm", "caic", "regions", "sampler", "intervals", "simulation", "dataio"]
__version__ = "0.1.0"
