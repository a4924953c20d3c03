//! Config, pretraining, stream runs, sweeps and CSV/report emission.

pub mod config;
pub mod csv;
pub mod report;
pub mod sweep;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adapt::{run_stream, Method, StreamResult};
use crate::checkpoint::load_checkpoint_for;
use crate::error::Result;
use crate::gradcheck::grad_check_max_rel_err;
use crate::network::{BnMode, Network, NetworkSpec, TrainLog};
use crate::seed::{RngTree, TAG_PRETRAIN};
use crate::stream::{build_stream, Scenario, World};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use self::config::{parse_config, ConfigBuilder, RunConfig};
pub use self::csv::{read_csv, write_csv, CsvRow};
pub use self::report::render_report;
pub use self::sweep::{run_jobs, sweep, thread_count, Job, SweepSpec};

/// Builds the world and pretrains a fresh network on its source split.
///
/// The checkpoint depends only on the data, network and pretraining keys,
/// so one checkpoint serves every run seed.
pub fn pretrain(cfg: &RunConfig) -> Result<(Network, TrainLog)> {
    let world = World::new(cfg.world.clone())?;
    let tree = RngTree::new(cfg.world.seed).child(TAG_PRETRAIN);
    let mut net = Network::init(cfg.spec(), tree.derive_seed("init"))?;
    let log = net.pretrain_source(
        &world.train_set()?,
        &cfg.pretrain,
        tree.derive_seed("order"),
        Some(&world.holdout_set()?),
    )?;
    Ok((net, log))
}

/// Loads a checkpoint and checks it against the config's network shape.
pub fn load_for(cfg: &RunConfig, bytes: &[u8]) -> Result<Network> {
    load_checkpoint_for(bytes, &cfg.spec())
}

/// Builds one stream for `(scenario, seed)` and runs every method on it.
pub fn run_methods(
    cfg: &RunConfig,
    net: &Network,
    scenario: Scenario,
    methods: &[Method],
    seed: u64,
) -> Result<Vec<StreamResult>> {
    let world = World::new(cfg.world.clone())?;
    let bench = build_stream(
        &world,
        &cfg.scenario_config(scenario),
        net,
        &RngTree::new(seed),
    )?;
    methods
        .iter()
        .map(|&m| {
            let mcfg = cfg.method_config(m);
            mcfg.validate()?;
            run_stream(net, &bench.samples, &mcfg, seed)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradcheckSummary {
    pub nets: usize,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

/// Random small network for the gradient oracle: every parameter trainable,
/// non-trivial BN parameters and running statistics.
fn random_small_net(rng: &mut ChaCha8Rng) -> Result<Network> {
    let depth = rng.random_range(1..=2);
    let spec = NetworkSpec {
        input_dim: rng.random_range(2..=5),
        hidden: (0..depth).map(|_| rng.random_range(2..=6)).collect(),
        classes: rng.random_range(2..=4),
        bn_eps: 1e-5,
    };
    let mut net = Network::init(spec, rng.random())?;
    let names: Vec<String> = net.params().names().map(str::to_string).collect();
    for name in &names {
        net.params_mut().set_trainable(name, true)?;
        let t = net.params_mut().get_mut(name).expect("listed name");
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for rs in net.running_mut() {
        for v in rs.mean.data_mut() {
            *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        for v in rs.var.data_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
    Ok(net)
}

/// ReLU inputs closer to zero than this are redrawn, since a finite
/// difference that straddles the kink does not estimate the derivative.
const KINK_BAND: f64 = 1e-3;

/// A random batch whose ReLU inputs all lie outside the kink band.
fn input_away_from_kinks(net: &Network, mode: BnMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let cols = net.spec().input_dim;
    loop {
        let rows = rng.random_range(3..=6);
        let data = (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let x = Tensor::from_parts(vec![rows, cols], data);
        let pre = net.pre_activations(&x, mode)?;
        if pre
            .iter()
            .flat_map(|t| t.data())
            .all(|v| v.abs() >= KINK_BAND)
        {
            return Ok(x);
        }
    }
}

/// Gradient oracle over `nets` random networks: mean prediction entropy of a
/// random batch, alternating running-statistics and batch-statistics BN,
/// central differences with step `h`. Inputs whose ReLU arguments fall within
/// the kink band are redrawn. Every parameter is differentiated
/// except pre-BN biases under batch statistics.
pub fn gradcheck_suite(nets: usize, seed: u64, h: f64) -> Result<GradcheckSummary> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..nets {
        let net = random_small_net(&mut rng)?;
        let mode = if i % 2 == 0 {
            BnMode::Running
        } else {
            BnMode::Batch
        };
        let x = input_away_from_kinks(&net, mode, &mut rng)?;
        let mut params = net.params().clone();
        if mode == BnMode::Batch {
            // Batch normalization removes any per-column offset, so the
            // derivative with respect to a pre-BN bias is identically zero and
            // its finite difference is pure rounding noise.
            let biases: Vec<String> = params
                .names()
                .filter(|n| n.starts_with('l') && n.ends_with(".bias"))
                .map(str::to_string)
                .collect();
            for b in &biases {
                params.set_trainable(b, false)?;
            }
        }
        let f = |tape: &mut Tape, vars: &BTreeMap<String, Var>| {
            let input = tape.constant(x.clone());
            let (logits, _) = net.forward_on(tape, vars, input, mode)?;
            tape.mean_entropy(logits)
        };
        let err = grad_check_max_rel_err(f, &params, h)?;
        worst = worst.max(err);
    }
    Ok(GradcheckSummary {
        nets,
        max_rel_err: worst,
        elapsed: start.elapsed(),
    })
}
