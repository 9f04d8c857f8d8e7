"""Fingerprint localization with posterior-mean estimators and set priors over radio-map grids."""

from .estimators import (GaussianNoiseModel, HistogramNoiseModel, PositionEstimate, Posterior,
                         knn_locate, pme, pme_locate, posterior, train_gaussian, train_histogram)
from .experiment import ExperimentConfig, EvalReport, compute_metrics, emit_report, run_experiment
from .gridmap import (Cell, CellSet, GridGeometry, RadioMap, RadioMapSet, load_radio_map_set,
                      rss_at, save_radio_map_set, window_mask)
from .priors import (Prior, approx_prior_strongest, perfect_prior_random, perfect_prior_strongest,
                     uniform_prior, window_prior)
from .scenario import (AssignmentStrategy, Measurement, NoiseScenario, assign_random_tx,
                       assign_strongest_tx, measure, sample_rx)
from .synthgen import (CityGenParams, EnvironmentMap, PropagationParams, generate_environment,
                       generate_scenario_maps, perturb_with_cars, simulate_pathloss)

__version__ = "0.1.0"
