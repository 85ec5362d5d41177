//! Particle samplers built on Stein variational dynamics.
//!
//! The crate implements Stein variational gradient descent (SVGD), Stein
//! variational Newton (SVN) and their stochastic, MCMC-corrected variants
//! (sSVGD and sSVN), together with benchmark targets that admit exact
//! sampling, convergence diagnostics and a reproducible run harness.
//!
//! A minimal sSVN run on the two-dimensional Hybrid Rosenbrock density:
//!
//! ```
//! use rand::SeedableRng;
//! use rand_chacha::ChaCha8Rng;
//! use ssvn::{
//!     ssvn_step_cholesky, Ensemble, HybridRosenbrock, HybridRosenbrockParams, KernelSpec,
//!     MetricMode, SvnOptions,
//! };
//!
//! let target = HybridRosenbrock::new(HybridRosenbrockParams::new(2, 1, 0.5, 0.5)).unwrap();
//! let kernel = KernelSpec::with_mode(2, MetricMode::AveragedGaussNewton);
//! let mut rng = ChaCha8Rng::seed_from_u64(1);
//! let mut ensemble = Ensemble::from_rows(&[[-1.0, 2.0], [0.5, 0.0], [2.0, 3.0]]).unwrap();
//! for _ in 0..10 {
//!     ensemble = ssvn_step_cholesky(&ensemble, &target, &kernel, &SvnOptions::default(), true, &mut rng)
//!         .unwrap();
//! }
//! assert_eq!(ensemble.iteration, 10);
//! ```
//!
//! The `book/` directory of the repository walks through the algorithms
//! chapter by chapter.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config_space;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod kernels;
mod linalg;
pub mod random;
pub mod svgd;
pub mod svn;
pub mod svn_cg;
pub mod targets;

pub use config_space::{apply_k, divergence_k, permute_basis, ssvgd_noise, Basis, Ensemble, Field};
pub use diagnostics::{ensemble_moments, mmd, pool_samples, pp_curve, Bandwidth, MomentTrace};
pub use error::{Error, Result};
pub use kernels::{metric_update, GramBundle, KernelSpec, MetricMode};
pub use linalg::Factor;
pub use random::{NormalSource, ZeroNoise};
pub use svgd::{svgd_step, svgd_velocity};
pub use svn::{
    assemble_svn_hessian, damp_hessian, ssvn_step_cholesky, svn_block_diagonal_step,
    v_det_finite_difference, SvnFlags, SvnOptions, SvnSystem,
};
pub use svn_cg::{cg_solve, ssvn_step_cg, CgOptions, CgOutcome, HessianOperator, LinearOperator};
pub use targets::{
    hybrid_rosenbrock_dim, DoubleBanana, DoubleBananaParams, Gaussian, HybridRosenbrock,
    HybridRosenbrockParams, Target, TargetSpec,
};
