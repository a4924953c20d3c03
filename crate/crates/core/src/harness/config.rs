//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! A key given twice takes its later value. Unknown keys, unparsable values
//! and violated invariants are errors that name the key and the line.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::adapt::{default_c0, Method, MethodConfig};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, PretrainConfig, DEFAULT_BN_EPS};
use crate::optim::EsmConfig;
use crate::stream::{Scenario, ScenarioConfig, WorldConfig};

/// Line number used for values that come from the command line.
pub const CLI_LINE: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptParams {
    pub method: Method,
    /// `None` means the class-count default.
    pub c0: Option<f64>,
    pub m: f64,
    pub t0: usize,
    pub memory: usize,
    pub esm: EsmConfig,
}

impl Default for AdaptParams {
    fn default() -> Self {
        Self {
            method: Method::SOTTA,
            c0: None,
            m: 0.2,
            t0: 64,
            memory: 64,
            esm: EsmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub hidden: Vec<usize>,
    pub bn_eps: f64,
    pub pretrain: PretrainConfig,
    pub stream: ScenarioConfig,
    pub adapt: AdaptParams,
    /// Master seed of a run: stream generation, shuffling, eviction, attack.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            hidden: vec![64, 64],
            bn_eps: DEFAULT_BN_EPS,
            pretrain: PretrainConfig::default(),
            stream: ScenarioConfig::default(),
            adapt: AdaptParams::default(),
            seed: 0,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in serialization order.
pub const KEYS: &[&str] = &[
    "data.seed",
    "data.classes",
    "data.dim",
    "data.center_scale",
    "data.sigma",
    "data.train_per_class",
    "data.holdout_per_class",
    "shift.strength",
    "shift.angle_min",
    "shift.angle_max",
    "shift.log_scale_std",
    "shift.noise_std",
    "shift.common_rank",
    "shift.common_std",
    "net.hidden",
    "net.bn_eps",
    "pretrain.epochs",
    "pretrain.lr",
    "pretrain.batch_size",
    "pretrain.momentum",
    "pretrain.bn_momentum",
    "pretrain.weight_decay",
    "stream.scenario",
    "stream.benign_count",
    "stream.noisy_ratio",
    "stream.near_classes",
    "attack.eps",
    "attack.alpha",
    "attack.steps",
    "attack.batch",
    "adapt.method",
    "adapt.hc",
    "adapt.uc",
    "adapt.esm",
    "adapt.c0",
    "adapt.rho",
    "adapt.lr",
    "adapt.grad_floor",
    "adapt.m",
    "adapt.t0",
    "adapt.memory",
    "run.seed",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("cannot parse `{value}` as {}", std::any::type_name::<T>()))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("cannot parse `{value}` as a boolean")),
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|v| parse::<usize>(v.trim())).collect()
}

impl RunConfig {
    /// Assigns one key. The error string is the reason only; callers attach
    /// the key and line.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let w = &mut self.world;
        match key {
            "data.seed" => w.seed = parse(v)?,
            "data.classes" => w.classes = parse(v)?,
            "data.dim" => w.dim = parse(v)?,
            "data.center_scale" => w.center_scale = parse(v)?,
            "data.sigma" => w.sigma = parse(v)?,
            "data.train_per_class" => w.train_per_class = parse(v)?,
            "data.holdout_per_class" => w.holdout_per_class = parse(v)?,
            "shift.strength" => w.shift_strength = parse(v)?,
            "shift.angle_min" => w.shift.angle_range.0 = parse(v)?,
            "shift.angle_max" => w.shift.angle_range.1 = parse(v)?,
            "shift.log_scale_std" => w.shift.log_scale_std = parse(v)?,
            "shift.noise_std" => w.shift.noise_std = parse(v)?,
            "shift.common_rank" => w.shift.common_rank = parse(v)?,
            "shift.common_std" => w.shift.common_std = parse(v)?,
            "net.hidden" => self.hidden = parse_list(v)?,
            "net.bn_eps" => self.bn_eps = parse(v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(v)?,
            "pretrain.lr" => self.pretrain.lr = parse(v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(v)?,
            "pretrain.momentum" => self.pretrain.momentum = parse(v)?,
            "pretrain.bn_momentum" => self.pretrain.bn_momentum = parse(v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse(v)?,
            "stream.scenario" => {
                self.stream.scenario = v.parse().map_err(|e: Error| e.to_string())?
            }
            "stream.benign_count" => self.stream.benign_count = parse(v)?,
            "stream.noisy_ratio" => self.stream.noisy_ratio = parse(v)?,
            "stream.near_classes" => self.stream.near_classes = parse(v)?,
            "attack.eps" => self.stream.attack.eps = parse(v)?,
            "attack.alpha" => self.stream.attack.alpha = parse(v)?,
            "attack.steps" => self.stream.attack.steps = parse(v)?,
            "attack.batch" => self.stream.attack.batch = parse(v)?,
            "adapt.method" => self.adapt.method = v.parse().map_err(|e: Error| e.to_string())?,
            "adapt.hc" | "adapt.uc" | "adapt.esm" => {
                let on = parse_bool(v)?;
                let Method::Adaptive(mut f) = self.adapt.method else {
                    return Err(format!(
                        "only applies to memory-based methods, not `{}`",
                        self.adapt.method
                    ));
                };
                match key {
                    "adapt.hc" => f.hc = on,
                    "adapt.uc" => f.uc = on,
                    _ => f.esm = on,
                }
                self.adapt.method = Method::Adaptive(f);
            }
            "adapt.c0" => {
                self.adapt.c0 = if v.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(parse(v)?)
                }
            }
            "adapt.rho" => self.adapt.esm.rho = parse(v)?,
            "adapt.lr" => self.adapt.esm.lr = parse(v)?,
            "adapt.grad_floor" => self.adapt.esm.grad_floor = parse(v)?,
            "adapt.m" => self.adapt.m = parse(v)?,
            "adapt.t0" => self.adapt.t0 = parse(v)?,
            "adapt.memory" => self.adapt.memory = parse(v)?,
            "run.seed" => self.seed = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Current value of every key, as text that [`set`](Self::set) accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.world;
        let f = |x: f64| format!("{x:?}");
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let mut out = vec![
            ("data.seed", w.seed.to_string()),
            ("data.classes", w.classes.to_string()),
            ("data.dim", w.dim.to_string()),
            ("data.center_scale", f(w.center_scale)),
            ("data.sigma", f(w.sigma)),
            ("data.train_per_class", w.train_per_class.to_string()),
            ("data.holdout_per_class", w.holdout_per_class.to_string()),
            ("shift.strength", f(w.shift_strength)),
            ("shift.angle_min", f(w.shift.angle_range.0)),
            ("shift.angle_max", f(w.shift.angle_range.1)),
            ("shift.log_scale_std", f(w.shift.log_scale_std)),
            ("shift.noise_std", f(w.shift.noise_std)),
            ("shift.common_rank", w.shift.common_rank.to_string()),
            ("shift.common_std", f(w.shift.common_std)),
            ("net.hidden", hidden.join(",")),
            ("net.bn_eps", f(self.bn_eps)),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.lr", f(self.pretrain.lr)),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.momentum", f(self.pretrain.momentum)),
            ("pretrain.bn_momentum", f(self.pretrain.bn_momentum)),
            ("pretrain.weight_decay", f(self.pretrain.weight_decay)),
            ("stream.scenario", self.stream.scenario.to_string()),
            ("stream.benign_count", self.stream.benign_count.to_string()),
            ("stream.noisy_ratio", f(self.stream.noisy_ratio)),
            ("stream.near_classes", self.stream.near_classes.to_string()),
            ("attack.eps", f(self.stream.attack.eps)),
            ("attack.alpha", f(self.stream.attack.alpha)),
            ("attack.steps", self.stream.attack.steps.to_string()),
            ("attack.batch", self.stream.attack.batch.to_string()),
            ("adapt.method", self.adapt.method.label()),
        ];
        if let Method::Adaptive(fl) = self.adapt.method {
            out.push(("adapt.hc", fl.hc.to_string()));
            out.push(("adapt.uc", fl.uc.to_string()));
            out.push(("adapt.esm", fl.esm.to_string()));
        }
        out.extend([
            (
                "adapt.c0",
                self.adapt.c0.map_or_else(|| "auto".to_string(), f),
            ),
            ("adapt.rho", f(self.adapt.esm.rho)),
            ("adapt.lr", f(self.adapt.esm.lr)),
            ("adapt.grad_floor", f(self.adapt.esm.grad_floor)),
            ("adapt.m", f(self.adapt.m)),
            ("adapt.t0", self.adapt.t0.to_string()),
            ("adapt.memory", self.adapt.memory.to_string()),
            ("run.seed", self.seed.to_string()),
        ]);
        out
    }

    /// Text form that [`parse_config`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.world.dim,
            hidden: self.hidden.clone(),
            classes: self.world.classes,
            bn_eps: self.bn_eps,
        }
    }

    pub fn c0(&self) -> f64 {
        self.adapt
            .c0
            .unwrap_or_else(|| default_c0(self.world.classes))
    }

    pub fn method_config(&self, method: Method) -> MethodConfig {
        MethodConfig {
            method,
            c0: self.c0(),
            m: self.adapt.m,
            t0: self.adapt.t0,
            capacity: self.adapt.memory,
            esm: self.adapt.esm.clone(),
        }
    }

    pub fn scenario_config(&self, scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig {
            scenario,
            ..self.stream.clone()
        }
    }

    /// Checks every cross-field invariant; returns the offending key.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let w = &self.world;
        let positive = |key: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("must be > 0, got {v}")))
            }
        };
        let non_negative = |key: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((key, format!("must be >= 0, got {v}")))
            }
        };
        if w.classes < 2 {
            return Err(("data.classes", "must be >= 2".into()));
        }
        if w.dim < 2 {
            return Err(("data.dim", "must be >= 2".into()));
        }
        positive("data.center_scale", w.center_scale)?;
        positive("data.sigma", w.sigma)?;
        if w.train_per_class == 0 {
            return Err(("data.train_per_class", "must be >= 1".into()));
        }
        if w.holdout_per_class == 0 {
            return Err(("data.holdout_per_class", "must be >= 1".into()));
        }
        non_negative("shift.strength", w.shift_strength)?;
        non_negative("shift.angle_min", w.shift.angle_range.0)?;
        if !(w.shift.angle_range.1 >= w.shift.angle_range.0) {
            return Err(("shift.angle_max", "must be >= shift.angle_min".into()));
        }
        non_negative("shift.log_scale_std", w.shift.log_scale_std)?;
        non_negative("shift.noise_std", w.shift.noise_std)?;
        non_negative("shift.common_std", w.shift.common_std)?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(("net.hidden", "needs at least one positive width".into()));
        }
        non_negative("net.bn_eps", self.bn_eps)?;
        if self.pretrain.batch_size == 0 {
            return Err(("pretrain.batch_size", "must be >= 1".into()));
        }
        non_negative("pretrain.lr", self.pretrain.lr)?;
        if !(0.0..1.0).contains(&self.pretrain.momentum) {
            return Err(("pretrain.momentum", "must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.bn_momentum) {
            return Err(("pretrain.bn_momentum", "must lie in [0, 1]".into()));
        }
        non_negative("pretrain.weight_decay", self.pretrain.weight_decay)?;
        if self.stream.benign_count == 0 {
            return Err(("stream.benign_count", "must be >= 1".into()));
        }
        non_negative("stream.noisy_ratio", self.stream.noisy_ratio)?;
        if self.stream.near_classes == 0 {
            return Err(("stream.near_classes", "must be >= 1".into()));
        }
        non_negative("attack.eps", self.stream.attack.eps)?;
        non_negative("attack.alpha", self.stream.attack.alpha)?;
        if self.stream.attack.steps == 0 {
            return Err(("attack.steps", "must be >= 1".into()));
        }
        if self.stream.attack.batch < 2 {
            return Err(("attack.batch", "must be >= 2".into()));
        }
        if let Some(c0) = self.adapt.c0 {
            if !(0.0..1.0).contains(&c0) {
                return Err(("adapt.c0", format!("must lie in [0, 1), got {c0}")));
            }
        }
        non_negative("adapt.rho", self.adapt.esm.rho)?;
        positive("adapt.lr", self.adapt.esm.lr)?;
        non_negative("adapt.grad_floor", self.adapt.esm.grad_floor)?;
        if !(0.0..=1.0).contains(&self.adapt.m) {
            return Err((
                "adapt.m",
                format!("must lie in [0, 1], got {}", self.adapt.m),
            ));
        }
        if self.adapt.t0 == 0 {
            return Err(("adapt.t0", "must be >= 1".into()));
        }
        if self.adapt.memory == 0 {
            return Err(("adapt.memory", "must be >= 1".into()));
        }
        Ok(())
    }
}

/// Accumulates assignments and remembers where each key was last set, so
/// invariant errors can point at a line.
#[derive(Clone, Debug, Default)]
pub struct ConfigBuilder {
    config: RunConfig,
    origin: BTreeMap<String, usize>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        self.config.set(key, value).map_err(|msg| Error::Config {
            line,
            key: key.to_string(),
            msg,
        })?;
        self.origin.insert(key.to_string(), line);
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    key: content.to_string(),
                    msg: "expected `key = value`".into(),
                });
            };
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    /// Applies a command-line `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config {
                line: CLI_LINE,
                key: assignment.to_string(),
                msg: "expected `key=value`".into(),
            });
        };
        self.set(key.trim(), value.trim(), CLI_LINE)
    }

    pub fn finish(self) -> Result<RunConfig> {
        self.config.check().map_err(|(key, msg)| Error::Config {
            line: self.origin.get(key).copied().unwrap_or(CLI_LINE),
            key: key.to_string(),
            msg,
        })?;
        Ok(self.config)
    }
}

/// Parses and validates a whole config file.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut b = ConfigBuilder::new();
    b.apply_text(text)?;
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::Flags;

    #[test]
    fn empty_text_gives_valid_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.c0(), 0.99);
        assert_eq!(parse_config("# only a comment\n\n   \n").unwrap(), c);
    }

    #[test]
    fn rho_is_read() {
        let c = parse_config("adapt.rho = 0.05").unwrap();
        assert_eq!(c.adapt.esm.rho, 0.05);
        let c = parse_config("adapt.rho = 0.5   # the other reported value").unwrap();
        assert_eq!(c.adapt.esm.rho, 0.5);
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let err = parse_config("adapt.m = 0.2\nadapt.rho = banana\n").unwrap_err();
        match err {
            Error::Config { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "adapt.rho");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config("\n\nadapt.rhoo = 1").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err:?}");
        assert!(parse_config("no equals sign").is_err());
    }

    #[test]
    fn invariant_violation_points_at_its_line() {
        let err = parse_config("run.seed = 1\nadapt.c0 = 1.5\n").unwrap_err();
        assert!(
            matches!(err, Error::Config { line: 2, ref key, .. } if key == "adapt.c0"),
            "{err:?}"
        );
        let err = parse_config("adapt.t0 = 0").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn later_keys_override() {
        let c = parse_config("adapt.m = 0.1\nadapt.m = 0.3\n").unwrap();
        assert_eq!(c.adapt.m, 0.3);
    }

    #[test]
    fn c0_defaults_follow_class_count() {
        assert_eq!(parse_config("data.classes = 4").unwrap().c0(), 0.99);
        assert_eq!(parse_config("data.classes = 50").unwrap().c0(), 0.66);
        assert_eq!(parse_config("data.classes = 200").unwrap().c0(), 0.33);
        assert_eq!(
            parse_config("data.classes = 200\nadapt.c0 = 0.5")
                .unwrap()
                .c0(),
            0.5
        );
    }

    #[test]
    fn ablation_flags_compose_with_method() {
        let c = parse_config("adapt.method = em\nadapt.esm = on\nadapt.hc = true").unwrap();
        assert_eq!(
            c.adapt.method,
            Method::Adaptive(Flags {
                hc: true,
                uc: false,
                esm: true
            })
        );
        assert!(parse_config("adapt.method = source\nadapt.hc = on").is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let mut b = ConfigBuilder::new();
        b.apply_text("data.sigma = 0.35\nnet.hidden = 32,16\nadapt.method = abl:uc\nadapt.c0 = 0.7\nstream.scenario = far")
            .unwrap();
        let c = b.finish().unwrap();
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(parse_config(&d.to_text()).unwrap(), d);
        for (k, _) in d.entries() {
            assert!(KEYS.contains(&k), "{k}");
        }
    }

    #[test]
    fn cli_overrides_file_values() {
        let mut b = ConfigBuilder::new();
        b.apply_text("run.seed = 3").unwrap();
        b.apply_override("run.seed=9").unwrap();
        assert_eq!(b.finish().unwrap().seed, 9);
        let mut b = ConfigBuilder::new();
        assert!(matches!(
            b.apply_override("run.seed"),
            Err(Error::Config { line: CLI_LINE, .. })
        ));
    }
}
