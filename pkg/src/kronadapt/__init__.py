"""Kronecker adapters with explicit component design ``(r1, r2, r)``."""
from .errors import (ConfigError, DegenerateSpectrumError, InfeasibleBudgetError, KronError,
                     NumericalError, ParameterError, ParseError, PreconditionError, ShapeError)
from .kron import (KronComponentPair, KronConfig, KSVDResult, inverse_kreshape, kreshape,
                   kron_apply, kron_product, ksvd, max_attainable_rank, param_count)
from .adapter import (InitStrategy, KronAdapterState, forward, gd_step, gradients,
                      grad_norm_probe, init_adapter, load_state, loss, save_state)
from .planner import BudgetQuery, PlanResult, enumerate_feasible, rank_configs

__version__ = "0.1.0"
