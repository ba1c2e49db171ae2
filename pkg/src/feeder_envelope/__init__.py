"""Network-admissible convex dispatch envelopes for radial feeders.

The pipeline: parse and order a radial feeder, build its branch-flow
sensitivity operators, bracket the squared-current nonlinearity around an
exact load-flow operating point, assemble the robust dispatch program, and
iterate expansion points until the dispatch agrees with the exact
equations.  Every reported dispatch is validated against the nonlinear
load flow.
"""

from .bounds import (
    CurrentEnvelope,
    JacobianBlocks,
    OperatingPoint,
    build_envelope,
    hessian,
    hessian_eigs,
    jacobian,
    operating_point,
)
from .feeder import (
    BranchOrientationWarning,
    FeederFormatError,
    FeederModel,
    load_feeder,
    order_radial,
)
from .loadflow import (
    InjectionProfile,
    LoadFlowDivergence,
    LoadFlowState,
    ResidualReport,
    Violation,
    VoltageCollapseError,
    check_admissible,
    residuals,
    solve_loadflow,
)
from .matrices import OrderingError, SensitivityMatrices, build_sensitivities
from .opf import (
    BatterySpec,
    DispatchSchedule,
    EnvelopeBreach,
    Generator,
    Horizon,
    OpfBuilderError,
    OpfInfeasibleError,
    RobustOpfSolution,
    Scenario,
    ScenarioFormatError,
    SolverLimitError,
    ValidationReport,
    build_p3,
    build_p4,
    dispatch_injections,
    extract_schedule,
    extract_solution,
    forecast_injections,
    load_scenario,
    scenario_for_step,
    validate_dispatch,
)
from .qp import (
    QpInconclusiveError,
    QpNumericalError,
    QpProblem,
    QpSettings,
    QpSolution,
    detect_infeasible,
    dump_problem,
    solve_qp,
    summarize_certificate,
)
from .tightening import (
    FlexibilityEnvelope,
    TighteningTrace,
    TraceRecord,
    flexibility_envelope,
    tighten,
    tighten_schedule,
)

__version__ = "0.1.0"

__all__ = [
    "BatterySpec",
    "BranchOrientationWarning",
    "CurrentEnvelope",
    "DispatchSchedule",
    "EnvelopeBreach",
    "FeederFormatError",
    "FeederModel",
    "FlexibilityEnvelope",
    "Generator",
    "Horizon",
    "InjectionProfile",
    "JacobianBlocks",
    "LoadFlowDivergence",
    "LoadFlowState",
    "OperatingPoint",
    "OpfBuilderError",
    "OpfInfeasibleError",
    "OrderingError",
    "QpInconclusiveError",
    "QpNumericalError",
    "QpProblem",
    "QpSettings",
    "QpSolution",
    "ResidualReport",
    "RobustOpfSolution",
    "Scenario",
    "ScenarioFormatError",
    "SensitivityMatrices",
    "SolverLimitError",
    "TighteningTrace",
    "TraceRecord",
    "ValidationReport",
    "Violation",
    "VoltageCollapseError",
    "build_envelope",
    "build_p3",
    "build_p4",
    "build_sensitivities",
    "check_admissible",
    "detect_infeasible",
    "dispatch_injections",
    "dump_problem",
    "extract_schedule",
    "extract_solution",
    "flexibility_envelope",
    "forecast_injections",
    "hessian",
    "hessian_eigs",
    "jacobian",
    "load_feeder",
    "load_scenario",
    "operating_point",
    "order_radial",
    "residuals",
    "scenario_for_step",
    "solve_loadflow",
    "solve_qp",
    "summarize_certificate",
    "tighten",
    "tighten_schedule",
    "validate_dispatch",
]
