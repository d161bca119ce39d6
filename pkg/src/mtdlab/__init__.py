"""Moving target defense toolkit: randomized plant models, detectors, attacks,
covariance design and identifiability checks."""
__version__ = "0.1.0"
