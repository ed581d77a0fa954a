"""Sequential design of computer experiments for Bayesian calibration.

A cheap emulator-based posterior stands in for the simulator-based one;
the gap between the two shrinks fastest when new simulator runs are
placed where the residual sum of squares is small, which the sequential
loops here target through an expected-improvement criterion.
"""

__version__ = "0.1.0"

from .benchmarks import forrester2d, generate_field_data, get_problem, gfunction6d
from .calibration import (ApproxPosterior, DiscrepancyCov, FieldData, PriorSpec,
                          Simulator, approx_log_posterior, expected_ss,
                          sum_of_squares, target_log_posterior,
                          weighted_sum_of_squares)
from .design import (AlgoResult, CalibrationProblem, EiState, GridSpec,
                     SelectionResult, covering_distance, crit_tradeoff,
                     crit_variance, ei_estimate, hyperrect_prob, maximin_lhd,
                     run_algorithm1, run_algorithm2, select_theta, write_trace_csv)
from .experiment import ExperimentConfig, run_experiment, validate_summary
from .gp import (Design, DegenerateDesignError, DuplicatePointError, FieldPredictor,
                 GpConfig, GpHyperparams, InputPoint, InputSpace, KernelSpec,
                 TrainedEmulator, build_correlation_matrix, fit_hyperparameters,
                 kernel_eval, loo_diagnostics, marginal_log_likelihood, predict,
                 sample_paths, train_emulator)
from .mcmc import Chain, batch_means_se, credible_interval, sample
from .metrics import CoverageResult, KlEstimate, coverage, coverage_rate, kl_knn

__all__ = [name for name in dir() if not name.startswith("_")]
