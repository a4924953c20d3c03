//! Streaming test-time adaptation that stays robust when the stream carries
//! noisy (out-of-distribution or adversarial) samples.
//!
//! Adaptation only ever trains the batch-norm scale/shift parameters of a
//! pretrained classifier. Two mechanisms guard it:
//!
//! * a memory bank that admits only confident samples and keeps its
//!   predicted-class histogram balanced ([`memory`]), and
//! * an entropy step taken at a worst-case perturbation of the parameters
//!   inside an L2 ball ([`optim::esm_step`]).
//!
//! [`stream`] builds a synthetic benchmark with benign covariate-shifted data
//! plus four noisy-sample families, [`adapt`] drives a stream through a
//! method, and [`harness`] holds the config, seeding, sweep and CSV plumbing
//! used by the `sotta` binary.

// Parameter checks are written as `!(x >= 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod memory;
pub mod network;
pub mod optim;
pub mod params;
pub mod seed;
pub mod stream;
pub mod tape;
pub mod tensor;

pub use adapt::{Flags, Method, MethodConfig, StreamResult};
pub use dataset::{FeatureStats, LabeledDataset};
pub use error::{Error, Result};
pub use harness::{CsvRow, RunConfig};
pub use memory::{EvictionPolicy, InsertOutcome, MemoryBank};
pub use network::{
    BnBatchStats, BnLayerState, BnMode, Network, NetworkSpec, Prediction, PretrainConfig,
};
pub use optim::{AdamState, EsmConfig, StepReport};
pub use params::{Grads, ParamSet};
pub use seed::RngTree;
pub use stream::{Scenario, ScenarioConfig, StreamSample, World, WorldConfig};
pub use tape::{backward, GradScope, Tape, Var};
pub use tensor::Tensor;
