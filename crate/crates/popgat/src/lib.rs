//! End-to-end multimodal outcome prediction on population graphs.
//!
//! The pipeline this crate implements goes from raw chest-CT volumes and
//! clinical metadata to patient-level outcome predictions (ICU admission,
//! ventilation, mortality):
//!
//! 1. a small U-Net segments each slice into background / healthy lung /
//!    ground-glass opacity / other pathology ([`segnet`]),
//! 2. class volumes from the predicted masks become radiomics features
//!    ([`radiomics`]), with cohort-level group statistics and t-tests,
//! 3. clinical metadata is imputed and standardised with a strict
//!    fit-on-train / apply-elsewhere split ([`tabular`]),
//! 4. patients are connected into a k-nearest-neighbour population graph
//!    under a mutual-information-weighted distance ([`popgraph`]),
//! 5. image, radiomics and metadata channels are fused and classified with
//!    graph attention (or ablation heads) over that graph ([`gnn`],
//!    [`fusion`]),
//! 6. a nested stratified cross-validation trainer ties it together with a
//!    staged multitask schedule ([`trainer`]), reporting through [`metrics`].
//!
//! Everything runs on the crate's own tape-based autodiff engine
//! ([`tensor`]), in `f32` or `f64`, with every random choice drawn from
//! named deterministic streams ([`rng`]) so any run reproduces exactly from
//! its config snapshot and seed.  A [`synth`] module generates synthetic
//! cohorts with known couplings so the whole pipeline can be exercised and
//! validated without patient data.

pub mod config;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod metrics;
pub mod nn;
pub mod popgraph;
pub mod radiomics;
pub mod rng;
pub mod scalar;
pub mod segnet;
pub mod synth;
pub mod tabular;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;
