//! Synthetic benchmark: Gaussian-blob source data, a fixed covariate shift
//! for the target domain, four families of noisy samples, and the shuffled
//! test stream.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{feature_bounds, FeatureStats, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{prediction_from_logits, BnMode, Network};
use crate::seed::{RngTree, TAG_ATTACK, TAG_SHUFFLE, TAG_STREAM};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Benign,
    Near,
    Far,
    Attack,
    Noise,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Benign,
        Scenario::Near,
        Scenario::Far,
        Scenario::Attack,
        Scenario::Noise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Benign => "benign",
            Scenario::Near => "near",
            Scenario::Far => "far",
            Scenario::Attack => "attack",
            Scenario::Noise => "noise",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `k` class centers drawn uniformly on the sphere of radius `scale`.
pub fn blob_centers(seed: u64, k: usize, d: usize, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..k)
        .flat_map(|_| {
            random_direction(&mut rng, d)
                .into_iter()
                .map(|v| v * scale)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::from_parts(vec![k, d], data)
}

/// Isotropic Gaussian samples around each center, classes interleaved.
pub fn sample_blobs(
    centers: &Tensor,
    n_per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::NoSamples);
    }
    let (k, d) = (centers.rows(), centers.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for _ in 0..n_per_class {
        for c in 0..k {
            data.extend(
                centers
                    .row_slice(c)
                    .iter()
                    .map(|&m| m + sigma * normal(&mut rng)),
            );
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![labels.len(), d], data)?, labels)
}

/// Blob dataset whose centers and samples both derive from `seed`.
pub fn gen_blobs(
    seed: u64,
    k: usize,
    d: usize,
    n_per_class: usize,
    center_scale: f64,
    sigma: f64,
) -> Result<LabeledDataset> {
    if k < 2 || d < 2 {
        return Err(Error::InvalidArgument(
            "gen_blobs needs K >= 2 and d >= 2".into(),
        ));
    }
    let tree = RngTree::new(seed);
    let centers = blob_centers(tree.derive_seed("centers"), k, d, center_scale);
    sample_blobs(&centers, n_per_class, sigma, tree.derive_seed("samples"))
}

/// Shape of the covariate shift; every term is multiplied by the strength.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftParams {
    /// Givens angles are drawn uniformly from this range (radians).
    pub angle_range: (f64, f64),
    /// Std of the per-feature log scale factors.
    pub log_scale_std: f64,
    /// Std of the isotropic part of the additive Gaussian noise, in feature units.
    pub noise_std: f64,
    /// Number of shared directions in the low-rank part of the noise.
    pub common_rank: usize,
    /// Std of the noise along each shared direction.
    pub common_std: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            angle_range: (0.1, 0.2),
            log_scale_std: 0.15,
            noise_std: 0.02,
            common_rank: 1,
            common_std: 4.5,
        }
    }
}

/// A fixed distribution-level shift: per-feature log-normal scaling, then a
/// rotation by Givens rotations on a random pairing of coordinates, then
/// additive Gaussian noise with an isotropic part and a low-rank shared part.
/// Zero strength is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    /// Row-vector transform `x -> x diag(scale) R`.
    transform: Tensor,
    noise_std: f64,
    /// `rank × d`; row `i` is a unit direction times its noise std.
    common: Tensor,
}

impl Corruption {
    pub fn from_seed(seed: u64, d: usize, strength: f64) -> Result<Self> {
        Self::with_params(seed, d, strength, &ShiftParams::default())
    }

    pub fn with_params(seed: u64, d: usize, strength: f64, p: &ShiftParams) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "shift strength must be >= 0, got {strength}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::eye(d);
        for j in 0..d {
            t.data_mut()[j * d + j] = (strength * p.log_scale_std * normal(&mut rng)).exp();
        }
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        for pair in perm.chunks_exact(2) {
            let (i, j) = (pair[0], pair[1]);
            let theta = strength * rng.random_range(p.angle_range.0..=p.angle_range.1);
            let (s, c) = theta.sin_cos();
            // right-multiply by the Givens rotation on columns i, j
            for row in 0..d {
                let (a, b) = (t.get(row, i), t.get(row, j));
                t.data_mut()[row * d + i] = c * a - s * b;
                t.data_mut()[row * d + j] = s * a + c * b;
            }
        }
        let common_std = strength * p.common_std;
        let common = (0..p.common_rank)
            .flat_map(|_| {
                random_direction(&mut rng, d)
                    .into_iter()
                    .map(move |v| v * common_std)
            })
            .collect();
        Ok(Self {
            transform: t,
            noise_std: strength * p.noise_std,
            common: Tensor::from_parts(vec![p.common_rank, d], common),
        })
    }

    /// `x diag(scale) R + noise_std * z` with `z` standard normal per entry.
    pub fn apply(&self, features: &Tensor, noise_seed: u64) -> Result<Tensor> {
        let mut out = features.matmul(&self.transform)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        if self.noise_std > 0.0 {
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v += self.noise_std * normal(&mut rng));
        }
        if self.common.rows() > 0 {
            let z = Tensor::from_parts(
                vec![out.rows(), self.common.rows()],
                (0..out.rows() * self.common.rows())
                    .map(|_| normal(&mut rng))
                    .collect(),
            );
            out = out.add(&z.matmul(&self.common)?)?;
        }
        Ok(out)
    }

    pub fn transform(&self) -> &Tensor {
        &self.transform
    }
}

/// Applies the shift drawn from `seed`; labels are preserved.
pub fn corrupt(data: &LabeledDataset, seed: u64, strength: f64) -> Result<LabeledDataset> {
    let tree = RngTree::new(seed);
    let c = Corruption::from_seed(tree.derive_seed("transform"), data.dim(), strength)?;
    data.with_features(c.apply(data.features(), tree.derive_seed("noise"))?)
}

/// What the noisy-sample generators need to know about the benign data.
#[derive(Clone, Debug)]
pub struct NoiseContext {
    /// Training class centers (raw source space).
    pub centers: Tensor,
    pub sigma: f64,
    pub center_scale: f64,
    /// Per-feature bounding box of the benign test set.
    pub bounds: (Vec<f64>, Vec<f64>),
    /// Number of unseen classes for the Near family.
    pub near_classes: usize,
    /// Minimum distance between a Near center and any training center, in units of sigma.
    pub near_gap_sigmas: f64,
    /// Magnitude of the active coordinates of Far samples.
    pub far_scale: f64,
    /// Std of the jitter added to Far samples.
    pub far_jitter: f64,
}

impl NoiseContext {
    pub fn new(
        centers: Tensor,
        sigma: f64,
        center_scale: f64,
        bounds: (Vec<f64>, Vec<f64>),
    ) -> Self {
        Self {
            centers,
            sigma,
            center_scale,
            bounds,
            near_classes: 4,
            near_gap_sigmas: 3.0,
            far_scale: center_scale,
            far_jitter: 0.1,
        }
    }
}

/// Centers for unseen classes, rejection-sampled to keep `near_gap_sigmas * sigma`
/// away from every training center.
pub fn near_centers(ctx: &NoiseContext, seed: u64) -> Result<Tensor> {
    let d = ctx.centers.cols();
    let gap = ctx.near_gap_sigmas * ctx.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(ctx.near_classes * d);
    let mut tries = 0usize;
    while out.len() < ctx.near_classes * d {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::InvalidArgument(
                "could not place unseen-class centers away from the training centers".into(),
            ));
        }
        let c: Vec<f64> = random_direction(&mut rng, d)
            .into_iter()
            .map(|v| v * ctx.center_scale)
            .collect();
        let far_enough = (0..ctx.centers.rows()).all(|r| {
            let dist2: f64 = ctx
                .centers
                .row_slice(r)
                .iter()
                .zip(&c)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            dist2.sqrt() >= gap
        });
        if far_enough {
            out.extend(c);
        }
    }
    Ok(Tensor::from_parts(vec![ctx.near_classes, d], out))
}

/// Raw noisy features for the Near, Far, or Noise family.
pub fn gen_noisy(scenario: Scenario, n: usize, seed: u64, ctx: &NoiseContext) -> Result<Tensor> {
    let d = ctx.centers.cols();
    if n == 0 {
        return Ok(Tensor::empty_rows(d));
    }
    let tree = RngTree::new(seed);
    match scenario {
        Scenario::Near => {
            let centers = near_centers(ctx, tree.derive_seed("near-centers"))?;
            let k = centers.rows();
            let per = n.div_ceil(k);
            let ds = sample_blobs(&centers, per, ctx.sigma, tree.derive_seed("near-samples"))?;
            let idx: Vec<usize> = (0..n).collect();
            Ok(ds.features().select_rows(&idx))
        }
        Scenario::Far => {
            let mut rng = ChaCha8Rng::seed_from_u64(tree.derive_seed("far"));
            let active = d.div_ceil(4);
            let mut data = Vec::with_capacity(n * d);
            let mut coords: Vec<usize> = (0..d).collect();
            for _ in 0..n {
                let mut row = vec![0.0; d];
                coords.shuffle(&mut rng);
                for &j in &coords[..active] {
                    row[j] = if rng.random::<bool>() {
                        ctx.far_scale
                    } else {
                        -ctx.far_scale
                    };
                }
                row.iter_mut()
                    .for_each(|v| *v += ctx.far_jitter * normal(&mut rng));
                data.extend(row);
            }
            Tensor::new(vec![n, d], data)
        }
        Scenario::Noise => {
            let (lo, hi) = &ctx.bounds;
            let mut rng = ChaCha8Rng::seed_from_u64(tree.derive_seed("uniform"));
            let data = (0..n * d)
                .map(|i| {
                    let j = i % d;
                    if hi[j] > lo[j] {
                        rng.random_range(lo[j]..=hi[j])
                    } else {
                        lo[j]
                    }
                })
                .collect();
            Tensor::new(vec![n, d], data)
        }
        Scenario::Benign | Scenario::Attack => Err(Error::InvalidArgument(format!(
            "`{scenario}` has no standalone noisy generator"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius around the initial malicious rows.
    pub eps: f64,
    /// Signed-gradient step size.
    pub alpha: f64,
    pub steps: usize,
    /// Rows per joint batch; half benign, half malicious.
    pub batch: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps: 0.5,
            alpha: 0.05,
            steps: 10,
            batch: 64,
        }
    }
}

/// Logits of `[benign; malicious]` with BN on the joint batch's own statistics.
pub fn joint_batch_logits(net: &Network, benign: &Tensor, malicious: &Tensor) -> Result<Tensor> {
    let joint = Tensor::vstack(&[benign, malicious])?;
    Ok(net
        .forward_mode(
            &joint,
            false,
            BnMode::Batch,
            crate::tape::GradScope::Trainable,
        )?
        .logits)
}

/// Benign-row accuracy of a batch-statistics forward on `[benign; malicious]`.
pub fn joint_benign_accuracy(
    net: &Network,
    benign: &Tensor,
    labels: &[usize],
    malicious: &Tensor,
) -> Result<f64> {
    let logits = joint_batch_logits(net, benign, malicious)?;
    let correct = (0..benign.rows())
        .filter(|&r| prediction_from_logits(logits.row_slice(r)).label == labels[r])
        .count();
    Ok(correct as f64 / benign.rows().max(1) as f64)
}

/// Distribution-invading attack on batch-statistics BN.
///
/// The malicious rows are moved by signed-gradient ascent on the benign rows'
/// cross-entropy against their own pre-attack predictions, with BN coupling
/// the two groups through the joint batch statistics. Every step is projected
/// back into the L∞ ball of radius `eps` around `malicious_init`.
pub fn dia_attack(
    net: &Network,
    benign: &Tensor,
    malicious_init: &Tensor,
    eps: f64,
    alpha: f64,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "attack needs at least one step".into(),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument("attack radius must be >= 0".into()));
    }
    if malicious_init.rows() == 0 {
        return Ok(malicious_init.clone());
    }
    let targets: Vec<usize> = {
        let logits = joint_batch_logits(net, benign, malicious_init)?;
        (0..benign.rows())
            .map(|r| prediction_from_logits(logits.row_slice(r)).label)
            .collect()
    };
    let mut x = malicious_init.clone();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let vars: std::collections::BTreeMap<String, _> = net
            .params()
            .iter()
            .map(|(n, p)| (n.to_string(), tape.constant(p.value.clone())))
            .collect();
        let b = tape.constant(benign.clone());
        let m = tape.variable(x.clone());
        let joint = tape.vstack(b, m)?;
        let (logits, _) = net.forward_on(&mut tape, &vars, joint, BnMode::Batch)?;
        let benign_logits = tape.slice_rows(logits, 0, benign.rows())?;
        let loss = tape.cross_entropy(benign_logits, &targets)?;
        let grad = tape.backward(loss)?.of(m, x.shape());
        for ((v, g), init) in x
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(malicious_init.data())
        {
            let step = if *g > 0.0 {
                alpha
            } else if *g < 0.0 {
                -alpha
            } else {
                0.0
            };
            *v = (*v + step).clamp(init - eps, init + eps);
        }
    }
    Ok(x)
}

/// `(x - mean_T) / std_T` per feature.
pub fn normalize_with(features: &Tensor, target: &FeatureStats) -> Result<Tensor> {
    target.normalize(features)
}

/// Hidden provenance of a stream sample; read only by the evaluator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub true_label: Option<usize>,
    pub is_benign: bool,
    pub scenario: Scenario,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub features: Tensor,
    provenance: Provenance,
}

impl StreamSample {
    pub fn benign(features: Tensor, label: usize, scenario: Scenario) -> Self {
        Self {
            features,
            provenance: Provenance {
                true_label: Some(label),
                is_benign: true,
                scenario,
            },
        }
    }

    pub fn noisy(features: Tensor, scenario: Scenario) -> Self {
        Self {
            features,
            provenance: Provenance {
                true_label: None,
                is_benign: false,
                scenario,
            },
        }
    }

    /// Evaluator-only view of the hidden fields.
    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Replaces the hidden label; used to check that adaptation never reads it.
    pub fn with_hidden_label(mut self, label: Option<usize>) -> Self {
        self.provenance.true_label = label;
        self
    }
}

/// Concatenates benign then noisy samples and applies a seeded Fisher–Yates shuffle.
pub fn mix_and_shuffle(
    benign: Vec<StreamSample>,
    noisy: Vec<StreamSample>,
    seed: u64,
) -> Vec<StreamSample> {
    let mut all = benign;
    all.extend(noisy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all
}

/// The fixed world shared by pretraining and every stream: class centers and
/// the target-domain shift.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub sigma: f64,
    pub shift_strength: f64,
    pub shift: ShiftParams,
    pub train_per_class: usize,
    pub holdout_per_class: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            dim: 16,
            center_scale: 4.0,
            sigma: 0.55,
            shift_strength: 1.5,
            shift: ShiftParams::default(),
            train_per_class: 500,
            holdout_per_class: 250,
        }
    }
}

#[derive(Clone, Debug)]
pub struct World {
    cfg: WorldConfig,
    centers: Tensor,
    shift: Corruption,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.dim < 2 {
            return Err(Error::InvalidArgument(
                "world needs K >= 2 and d >= 2".into(),
            ));
        }
        let tree = RngTree::new(cfg.seed);
        let centers = blob_centers(
            tree.derive_seed("centers"),
            cfg.classes,
            cfg.dim,
            cfg.center_scale,
        );
        let shift = Corruption::with_params(
            tree.derive_seed("shift"),
            cfg.dim,
            cfg.shift_strength,
            &cfg.shift,
        )?;
        Ok(Self {
            cfg,
            centers,
            shift,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn shift(&self) -> &Corruption {
        &self.shift
    }

    fn tree(&self) -> RngTree {
        RngTree::new(self.cfg.seed)
    }

    pub fn train_set(&self) -> Result<LabeledDataset> {
        sample_blobs(
            &self.centers,
            self.cfg.train_per_class,
            self.cfg.sigma,
            self.tree().derive_seed("train"),
        )
    }

    /// Clean (unshifted) held-out source data.
    pub fn holdout_set(&self) -> Result<LabeledDataset> {
        sample_blobs(
            &self.centers,
            self.cfg.holdout_per_class,
            self.cfg.sigma,
            self.tree().derive_seed("holdout"),
        )
    }

    /// Shifted samples of the given clean dataset.
    pub fn shifted(&self, clean: &LabeledDataset, noise_seed: u64) -> Result<LabeledDataset> {
        clean.with_features(self.shift.apply(clean.features(), noise_seed)?)
    }

    /// `n` benign target-domain samples, classes as balanced as `n` allows.
    pub fn target_samples(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        let k = self.cfg.classes;
        let tree = RngTree::new(seed);
        let clean = sample_blobs(
            &self.centers,
            n.div_ceil(k).max(1),
            self.cfg.sigma,
            tree.derive_seed("clean"),
        )?;
        let idx: Vec<usize> = (0..n).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| clean.labels()[i]).collect();
        let clean = LabeledDataset::new(clean.features().select_rows(&idx), labels)?;
        self.shifted(&clean, tree.derive_seed("shift-noise"))
    }

    pub fn noise_context(&self, benign_raw: &Tensor) -> NoiseContext {
        NoiseContext::new(
            self.centers.clone(),
            self.cfg.sigma,
            self.cfg.center_scale,
            feature_bounds(benign_raw),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub benign_count: usize,
    /// Noisy samples per benign sample (1.0 = equal counts).
    pub noisy_ratio: f64,
    pub near_classes: usize,
    pub attack: AttackConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Noise,
            benign_count: 2000,
            noisy_ratio: 1.0,
            near_classes: 4,
            attack: AttackConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn noisy_count(&self) -> usize {
        if self.scenario == Scenario::Benign {
            0
        } else {
            (self.benign_count as f64 * self.noisy_ratio).round() as usize
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.benign_count == 0 {
            return Err(Error::InvalidArgument(
                "benign_count must be positive".into(),
            ));
        }
        if !(self.noisy_ratio >= 0.0 && self.noisy_ratio.is_finite()) {
            return Err(Error::InvalidArgument("noisy_ratio must be >= 0".into()));
        }
        if !(self.attack.eps >= 0.0) || self.attack.steps == 0 || self.attack.batch < 2 {
            return Err(Error::InvalidArgument("invalid attack parameters".into()));
        }
        Ok(())
    }
}

/// A built test stream plus the normalization it was built with.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub samples: Vec<StreamSample>,
    pub target_stats: FeatureStats,
    pub benign_count: usize,
    pub noisy_count: usize,
}

/// Builds the shuffled stream for one scenario. Every sample (benign and
/// noisy) is normalized with the benign set's statistics. Attack samples are
/// crafted in that normalized space against `source`.
pub fn build_stream(
    world: &World,
    cfg: &ScenarioConfig,
    source: &Network,
    tree: &RngTree,
) -> Result<Benchmark> {
    cfg.validate()?;
    let gen = tree.child(TAG_STREAM);
    let benign = world.target_samples(cfg.benign_count, gen.derive_seed("benign"))?;
    let stats = benign.stats().clone();
    let benign_x = stats.normalize(benign.features())?;
    let n_noisy = cfg.noisy_count();

    let noisy_x = match cfg.scenario {
        Scenario::Benign => Tensor::empty_rows(world.config().dim),
        Scenario::Attack => craft_attack_rows(
            source,
            &benign_x,
            n_noisy,
            &cfg.attack,
            tree.derive_seed(TAG_ATTACK),
        )?,
        Scenario::Near => {
            let mut ctx = world.noise_context(benign.features());
            ctx.near_classes = cfg.near_classes;
            let raw = gen_noisy(Scenario::Near, n_noisy, gen.derive_seed("near"), &ctx)?;
            // unseen classes live in the same shifted environment
            let shifted = world.shift.apply(&raw, gen.derive_seed("near-shift"))?;
            stats.normalize(&shifted)?
        }
        sc => {
            let ctx = world.noise_context(benign.features());
            let raw = gen_noisy(sc, n_noisy, gen.derive_seed(sc.as_str()), &ctx)?;
            stats.normalize(&raw)?
        }
    };

    let benign_samples = (0..benign_x.rows())
        .map(|r| StreamSample::benign(benign_x.row_tensor(r), benign.labels()[r], cfg.scenario))
        .collect();
    let noisy_samples = (0..noisy_x.rows())
        .map(|r| StreamSample::noisy(noisy_x.row_tensor(r), cfg.scenario))
        .collect();
    Ok(Benchmark {
        samples: mix_and_shuffle(benign_samples, noisy_samples, tree.derive_seed(TAG_SHUFFLE)),
        target_stats: stats,
        benign_count: benign_x.rows(),
        noisy_count: noisy_x.rows(),
    })
}

/// Duplicates benign rows as malicious seeds and attacks them in joint
/// batches of `cfg.batch` rows (half benign, half malicious).
fn craft_attack_rows(
    source: &Network,
    benign_x: &Tensor,
    n: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    let d = benign_x.cols();
    if n == 0 {
        return Ok(Tensor::empty_rows(d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = benign_x.rows();
    let mut order: Vec<usize> = (0..nb).collect();
    order.shuffle(&mut rng);
    let dup_idx: Vec<usize> = (0..n).map(|i| order[i % nb]).collect();
    let half = cfg.batch / 2;
    let mut out = Vec::with_capacity(n * d);
    for chunk in dup_idx.chunks(half) {
        let init = benign_x.select_rows(chunk);
        let partners: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(0..nb)).collect();
        let benign_part = benign_x.select_rows(&partners);
        let attacked = dia_attack(source, &benign_part, &init, cfg.eps, cfg.alpha, cfg.steps)?;
        out.extend_from_slice(attacked.data());
    }
    Tensor::new(vec![n, d], out)
}
