"""Spectral Galerkin simulation of the stochastic heat equation with scalar
multiplicative noise under finite-dimensional localized feedback."""

__version__ = "0.1.0"

from .basis import Domain1D, EigenBasis, count_modes, eigenvalue, project_high, project_low
from .errors import (BlowUpError, ConfigError, DegenerateFitError, SingularGramError,
                     TruncationError, UnreliableFitWarning)
from .estimators import (DecayFit, LyapunovSample, convergence_order, estimate_as_exponent,
                         feedback_energy, fit_mean_square_decay, sup_statistic)
from .feedback import (ClosedLoopDrift, FeedbackLaw, apply_feedback, build_feedback,
                       closed_loop_drift, uncontrolled_drift)
from .null_control import ControlledRun, NullControlPlan, build_plan, calibrate_gamma, run_plan
from .region import (ControlRegion, CouplingMatrix, SpectralCalibration, build_coupling,
                     calibrate_spectral_constant, gram_entry, parse_region)
from .sde import (Ensemble, SimConfig, Trajectory, exact_transform_path, simulate_ensemble,
                  simulate_path, step_euler, step_milstein)
