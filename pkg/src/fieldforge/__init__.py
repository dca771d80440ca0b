"""Stochastic preconditioning for neural field optimization."""

from .diffcore import AdamState, ParamStore, Tape, adam_step, grad_check
from .domain import DomainBounds, reflect_into_domain
from .fields import FieldConfig, HashgridConfig, MlpConfig, build_field, geometric_init
from .precond import AlphaGrid, Constant, ExpDecay, Preconditioner, Step, blur_estimate, sample_noise

__version__ = "0.1.0"
