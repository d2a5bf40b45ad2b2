from .errors import NearMissError, ConfigError, DataError, NumericError, exit_code_for
from .logger import Logger
from .dynamics import VehicleState, ControlInput, VehicleSpec, JointState, IntegrationConfig, rk4_step, \
    simulate_horizon
from .geometry import CornerSet, BoundaryPolyline, global_corners, densify
from .kinematics import RawTrack, ProcessedTrack, KinematicsConfig, TrackProcessor
from .NearMissDetector import NearMissDetector, NearMissEvent, DetectionConfig, check_vv, check_vi, detect
from .BlockExtractor import BlockExtractor, BlockRecord, BlockConfig, GroupSpec, standardize_covariates
from .gev import GevParams, CoefficientSet, gev_logpdf, gev_cdf, gev_ppf, gev_sample, link_params
from .HierarchicalGev import HierarchicalGevModel, ModelSpec, PriorConfig, MCMCConfig, PosteriorChain, \
    FitMetrics, run_mcmc, log_posterior, bgr_diagnostic, fit_metrics
from .RiskEstimator import RiskEstimator, CORConfig, CORResult, GroupCOR, exceedance_prob, group_cor, \
    total_cf, roc_auc, threshold_sweep
from .synth import SyntheticCorridorSpec, synthesize_records, synthesize_corpus
from .config import PipelineConfig, load_config
name = "nearmiss"
