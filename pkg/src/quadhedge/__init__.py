"""Robust super-replication with quadratic costs and an insider lookahead."""
from .errors import (
    BlockTooShort,
    BudgetExhausted,
    CapExceeded,
    CflViolation,
    InvalidMeasure,
    InvalidParams,
    InvalidProbability,
    NegativeInput,
    NoConvergence,
    NumericalError,
    OutOfOmega,
    QuadHedgeError,
    ShapeMismatch,
    UnstableDetected,
    ValidationError,
)
from .market import (
    DiscretizationParams,
    ModelParams,
    PathView,
    Payoff,
    ScenarioTree,
    build_tree,
    eval_payoff,
    stock_prices,
    stopping_times,
)
from .hedging import (
    InfoIndex,
    PathStrategy,
    Strategy,
    WealthLedger,
    insider_block_strategy,
    lemma43_rhs,
    wealth,
)
from .controls import VolControl
from .dual import MeasuredTree, QnReport, dual_search, dual_value, qn_from_control, qn_sample
from .primal import SolveReport, SolverOptions, superrep_bruteforce, superrep_price, verify_superhedge
from .limit import (
    HjbGrid,
    LimitObjective,
    g_penalty,
    hamiltonian,
    hjb_value,
    insider_value,
    large_n_asymptote,
    mc_lower_bound,
    optimize_control,
)
from .kernels import BACKEND

__version__ = "0.1.0"
