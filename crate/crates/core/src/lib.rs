//! Resilient state estimation for power grids under coordinated measurement
//! attacks.
//!
//! The pipeline: build the linearized swing dynamics of a grid ([`grid`]),
//! decompose the semistable closed-loop matrix and compute Gramians ([`lti`]),
//! cluster measurements by the rows of a Gramian factor ([`clustering`]),
//! replace attacked measurements by cluster surrogates ([`attack`],
//! [`clustering`]), design and run a Luenberger observer on the augmented
//! measurement set ([`observer`]), and quantify the estimation and
//! approximation errors in simulation ([`sim`]).

pub mod attack;
pub mod clustering;
pub mod grid;
pub mod lti;
pub mod observer;
pub mod par;
pub mod sim;

pub use attack::{classify, inject, AttackScenario, AttackSignal, Classification};
pub use clustering::{
    approximation_error, augment_measurement_matrix, build_pi, cluster_coefficients, compute_phi,
    dissimilarity, dissimilarity_matrix, form_clusters, form_clusters_target_k,
    min_theta_for_coverage, project_outputs, surrogate_outputs, theta_for_cluster_count,
    ApproxError, ClusterSet, SimilarityFactor,
};
pub use grid::{
    assemble_state_space, build_measurement_matrix, build_ybus, default_sensors,
    load_disturbance, parse_grid_file, parse_grid_str, GridSpec, SensorQuantity, SensorSpec,
    StateIndex,
};
pub use lti::{
    decompose_semistable, h2_norm, observability_rank, pbh_singular_values, psd_factor,
    semistable_gramian, solve_lyapunov, solve_lyapunov_kron, stable_subspace, Gramian,
    GramianSide, LtiSystem, SubspaceDecomposition,
};
pub use observer::{
    design_gain, error_system_poles, run_observer, ErrorSystemReport, ObserverDesign, ObserverRun,
};
pub use sim::{
    metrics_json, parse_scenario_file, parse_scenario_str, run_pipeline, simulate,
    trajectories_csv, PipelineOutput, Scenario, SimInput, SimResult,
};
