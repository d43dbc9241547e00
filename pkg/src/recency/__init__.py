"""Cross-sectional HIV incidence estimation from recency tests.

Standard and weighted estimators for external and internal target
populations, mixed subtypes and partially missing recency tests, with
bootstrap intervals and a Monte Carlo simulation engine.
"""

from .assay import (SUBTYPE_A, SUBTYPE_B, CalibrationEstimate, CalibrationPanel, GammaSurvival,
                    GammaSurvivalWithPlateau, RecencyAssay, Tabulated, estimate_frr, estimate_mdri, frr,
                    mdri, phi)
from .bootstrap import (BootstrapPlan, DataSources, Sample, log_interval, lognormal_from_ci,
                        nonparametric_ci, parametric_ci)
from .errors import (DegenerateDesignError, DomainError, ExtrapolationError, FeasibilityError, NumericError,
                     PreconditionError, RankError, RecencyError, SchemaError, SeparationError, StratumError)
from .estimators import (CountSummary, IncidenceResult, PlimParams, counts_by_subtype, extended_incidence,
                         incidence_external_target, incidence_internal_target, kassanjee, modified_extended,
                         modified_internal, modified_kassanjee, plim_extended, plim_standard,
                         plim_subtype_old, plim_true_mean, prevention_efficacy, standard_incidence,
                         subtype_external, subtype_internal, subtype_old, subtype_stratified, subtype_weighted)
from .numkernel import GammaParams, RngStream, integrate, logistic_fit, reg_lower_gamma
from .records import Records, SubjectRecord
from .simulate import (PopulationTable, SimConfig, bundled_table, enrollment_probabilities,
                       gen_calibration_panel, gen_cross_sectional, gen_external_target,
                       gen_internal_enrollment, load_table, run_replication, simulate_trial,
                       truncate_enrollment)
from .weights import WeightModel, constant_weight, evaluate_weight, fit_weight_external, fit_weight_internal

__version__ = "0.1.0"
