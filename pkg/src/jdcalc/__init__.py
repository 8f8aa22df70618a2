"""jdcalc: pathwise verification of Ito-Wentzell calculus for jump diffusions.

Simulates coupled state / random-field / density dynamics under shared
Wiener and Poisson noise and numerically certifies the identities relating
them: the composite-differential (generalized Ito-Wentzell) formula, the
integral-invariant kernel equation, and the Gaussian delta-approximation
error bound.
"""

from .errors import (ConfigurationError, CouplingError, DivergenceError,
                     InsufficientDataError, JdcalcError, NegativityError,
                     NonMonotoneJumpError, NumericalError, PresetLookupError,
                     StabilityError)
from .noise import (JumpStream, MarkMeasure, NoisePath, TimeGrid, WienerPath,
                    make_rng, normal_mark_measure, point_mark_measure,
                    refine_wiener, sample_jumps, sample_noise_path,
                    sample_wiener, uniform_mark_measure)
from .fields import (CoefficientSet, FieldCoefficientSet, Preset,
                     ValidationReport, catalog_lookup, catalog_names,
                     kernel_preset_names, scalar_field_coeffs,
                     scalar_state_coeffs, validate_preset)
from .sde import StatePath, JumpRecord, flow_map, flow_terminal, integrate
from .randomfield import (FieldContext, FieldSnapshot, FieldValue,
                          post_jump_snapshot, pre_jump_snapshot,
                          snapshot_at_node, terminal_snapshot)
from .itowentzell import (ConvergenceResult, IWTermBreakdown, ResidualReport,
                          classic_ladder, convergence_study, residual_ladder,
                          rhs_accumulate, verify_identity, verify_on_noise)
from .invariantkernel import (DensityGrid, DualityReport, JumpMap, MassTrace,
                              apply_jump, gaussian_density_grid,
                              jump_map_for_event, run_density,
                              sample_truncated_gaussian, stable_time_grid,
                              step_continuous, verify_duality)
from .mollifier import (BoundReport, MollifierSpec, bound_study, certify_bound,
                        mollify, mollify_derivative)

__version__ = "0.1.0"
