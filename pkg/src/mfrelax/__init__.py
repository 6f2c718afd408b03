"""Relaxed controls for mean-field (McKean-Vlasov) stochastic control:
particle simulation, adjoint equations, maximum-principle checks and a
successive-approximation optimizer."""

__version__ = "0.1.0"

from .adjoint import (AdjointFirst, AdjointSecond, RegressionBasis, RegressionError,  # noqa: E402
                      solve_first_order, solve_second_order)
from .controls import (ChatteringSchedule, CoarsenedRelaxedControl, FeedbackControl,  # noqa: E402
                       FeedbackRelaxedControl, RelaxedControl, StateBinning, StrictControl,
                       TabularRelaxedControl, TabularStrictControl, TimeGrid, as_relaxed, chattering,
                       constant_control, constant_relaxed, control_distance, control_from_text,
                       control_to_text, delta_embedding, normalize_weights, tabulate)
from .cost import (CostEstimate, GapRow, chattered_strict, cost_scale, estimate_cost,  # noqa: E402
                   particle_costs, simulate, value_gap_experiment)
from .lq_oracle import LqRiccatiOracle  # noqa: E402
from .optimizer import (OptimizerConfig, OptimizerTrace, minimizing_sequence_report,  # noqa: E402
                        optimize)
from .problems import (ActionGrid, LqParams, ProblemSpec, ValidationReport,  # noqa: E402
                       make_chattering_problem, make_lq_meanfield, validate_problem)
from .simulate import (MartingaleMeasurePath, PathBundle, SimConfig, SimulationError,  # noqa: E402
                       martingale_measure, orthogonality_check, quadratic_variation_check,
                       simulate_relaxed, simulate_strict)
from .smp import (SmpReport, h_function, h_function_table, hamiltonian,  # noqa: E402
                  near_optimality_check, smp_residual)
