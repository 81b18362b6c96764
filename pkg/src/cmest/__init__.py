"""Unbiased estimators of completely monotone functions of an exponential-family parameter."""
from .errors import DomainError, ParseError, QuadratureWarning
from .estimator import (Estimate, EstimatorSpec, LocationShift, SignFlip, Truncation, estimate,
                        estimate_generic, estimate_location, estimate_ratio_bivariate,
                        estimate_ratio_independent, estimate_signflip, estimate_truncated, evaluate)
from .models import ExpFamilyModel, Support, parse_model, sample
from .qfunc import QFunction, eval_q, parse_q

__version__ = "0.1.0"
