"""timemix: parabolic PDE/SPDE solvers with time-mixing boundary conditions.

The library solves linear second-order parabolic equations, deterministic or
driven by a finite family of Wiener processes, whose boundary condition in
time ties the solution to a weighted mix of its own values at several times
(initial, terminal, interior, or integrated). The mixed condition is reduced
to a dense fixed-point system on the unknown endpoint datum, solved directly
or by a convergent power series, with solvability certificates checked from
the coefficient data.
"""

__version__ = "0.1.0"

from .cauchy import (
    EnergyReport,
    Trajectory,
    assemble_schedule,
    energy_report_first,
    energy_report_second,
    propagator_matrix,
    solve_backward_cauchy,
    solve_forward_cauchy,
)
from .discretization import (
    CoefficientSet,
    Field,
    Grid,
    TimeGrid,
    build_grid,
)
from .lattice import (
    AdaptedField,
    NoiseLattice,
    build_lattice,
    conditional_expectation,
    dump_lattice,
    expectation,
    martingale_part,
    stochastic_integral,
)
from .mixing import (
    NonlocalCondition,
    NonlocalReport,
    SingularSystemError,
    SolveVerdict,
    VerdictStatus,
    apply_mixing,
    mixing_response_matrix,
    neumann_iterate,
    singular_value_report,
    solve_nonlocal,
    solve_verdict,
)
from .portfolio import (
    DeltaHedgeStats,
    HedgeReport,
    MarketParams,
    MarketPaths,
    delta_hedge_residual,
    market_coefficients,
    simulate_market,
    solve_hedge_spde,
    stagnation_check,
    wealth_process,
)
from .probe import (
    FkPathBatch,
    MartingaleReport,
    duality_residual,
    fk_simulate,
    martingale_test,
    path_values,
    snapped_states,
    solve_adjoint_forward,
)
from .spde import (
    SpdeProblem,
    SpdeSolution,
    definition_residual,
    solve_backward_spde,
    solve_forward_spde,
)

__all__ = [
    "AdaptedField",
    "CoefficientSet",
    "DeltaHedgeStats",
    "EnergyReport",
    "Field",
    "FkPathBatch",
    "Grid",
    "HedgeReport",
    "MarketParams",
    "MarketPaths",
    "MartingaleReport",
    "NoiseLattice",
    "NonlocalCondition",
    "NonlocalReport",
    "SingularSystemError",
    "SolveVerdict",
    "SpdeProblem",
    "SpdeSolution",
    "TimeGrid",
    "Trajectory",
    "VerdictStatus",
    "__version__",
    "apply_mixing",
    "assemble_schedule",
    "build_grid",
    "build_lattice",
    "conditional_expectation",
    "definition_residual",
    "delta_hedge_residual",
    "dump_lattice",
    "duality_residual",
    "energy_report_first",
    "energy_report_second",
    "expectation",
    "fk_simulate",
    "market_coefficients",
    "martingale_part",
    "martingale_test",
    "mixing_response_matrix",
    "neumann_iterate",
    "path_values",
    "propagator_matrix",
    "simulate_market",
    "singular_value_report",
    "snapped_states",
    "solve_adjoint_forward",
    "solve_backward_cauchy",
    "solve_backward_spde",
    "solve_forward_cauchy",
    "solve_forward_spde",
    "solve_hedge_spde",
    "solve_nonlocal",
    "solve_verdict",
    "stagnation_check",
    "stochastic_integral",
    "wealth_process",
]
