//! Flat `key = value` run configuration.
//!
//! Values resolve as defaults, then the config file, then `--set`
//! overrides. [`RunConfig::to_text`] writes every key back out, so a
//! resolved file reproduces the run on its own.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::EvalSpec;
use crate::numkit::Vector;
use crate::odeflow::Method;
use crate::toygen::WorldConfig;
use crate::unlearning::UnlearnConfig;

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub unlearn: UnlearnConfig,
    /// Identities to forget, in order.
    pub forget_ids: Vec<usize>,
    /// Number of run seeds used by experiments, starting at `unlearn.seed`.
    pub seeds: usize,
    pub n_per_id: usize,
    pub id_avg_samples: usize,
    pub mmd_samples: usize,
    /// Pairs per identity pair in the trajectory checks.
    pub check_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldConfig::default(),
            unlearn: UnlearnConfig::default(),
            forget_ids: vec![0],
            seeds: 5,
            n_per_id: 100,
            id_avg_samples: 50,
            mmd_samples: 200,
            check_pairs: 100,
        }
    }
}

/// Keys in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "world_seed",
    "k",
    "latent_dim",
    "obs_dim",
    "cluster_std",
    "seed",
    "adapter",
    "solver",
    "steps",
    "step_size",
    "hidden",
    "rank",
    "gradient",
    "d",
    "a_max",
    "n_a",
    "n_r",
    "lambda_l2",
    "lambda_per",
    "lambda_id",
    "lambda_u",
    "lambda_tc",
    "lambda_r",
    "epochs",
    "learning_rate",
    "forget_ids",
    "seeds",
    "n_per_id",
    "id_avg_samples",
    "mmd_samples",
    "check_pairs",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let u = &mut self.unlearn;
        let w = &mut self.world;
        match key {
            "world_seed" => w.seed = parse(key, value)?,
            "k" => w.k = parse(key, value)?,
            "latent_dim" => w.latent_dim = parse(key, value)?,
            "obs_dim" => w.obs_dim = parse(key, value)?,
            "cluster_std" => w.cluster_std = parse(key, value)?,
            "seed" => u.seed = parse(key, value)?,
            "adapter" => u.adapter = parse(key, value)?,
            "solver" => u.solver.method = parse::<Method>(key, value)?,
            "steps" => u.solver.steps = parse(key, value)?,
            "step_size" => u.solver.step_size = parse(key, value)?,
            "hidden" => u.hidden = parse(key, value)?,
            "rank" => u.rank = parse(key, value)?,
            "gradient" => u.gradient = parse(key, value)?,
            "d" => u.d = parse(key, value)?,
            "a_max" => u.a_max = parse(key, value)?,
            "n_a" => u.n_a = parse(key, value)?,
            "n_r" => u.n_r = parse(key, value)?,
            "lambda_l2" => u.lambda_l2 = parse(key, value)?,
            "lambda_per" => u.lambda_per = parse(key, value)?,
            "lambda_id" => u.lambda_id = parse(key, value)?,
            "lambda_u" => u.lambda_u = parse(key, value)?,
            "lambda_tc" => u.lambda_tc = parse(key, value)?,
            "lambda_r" => u.lambda_r = parse(key, value)?,
            "epochs" => u.epochs = parse(key, value)?,
            "learning_rate" => u.learning_rate = parse(key, value)?,
            "forget_ids" => {
                self.forget_ids = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "seeds" => self.seeds = parse(key, value)?,
            "n_per_id" => self.n_per_id = parse(key, value)?,
            "id_avg_samples" => self.id_avg_samples = parse(key, value)?,
            "mmd_samples" => self.mmd_samples = parse(key, value)?,
            "check_pairs" => self.check_pairs = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// The text form of one key's current value.
    pub fn get(&self, key: &str) -> Option<String> {
        let u = &self.unlearn;
        let w = &self.world;
        Some(match key {
            "world_seed" => w.seed.to_string(),
            "k" => w.k.to_string(),
            "latent_dim" => w.latent_dim.to_string(),
            "obs_dim" => w.obs_dim.to_string(),
            "cluster_std" => format!("{:?}", w.cluster_std),
            "seed" => u.seed.to_string(),
            "adapter" => u.adapter.to_string(),
            "solver" => u.solver.method.to_string(),
            "steps" => u.solver.steps.to_string(),
            "step_size" => format!("{:?}", u.solver.step_size),
            "hidden" => u.hidden.to_string(),
            "rank" => u.rank.to_string(),
            "gradient" => u.gradient.to_string(),
            "d" => format!("{:?}", u.d),
            "a_max" => format!("{:?}", u.a_max),
            "n_a" => u.n_a.to_string(),
            "n_r" => u.n_r.to_string(),
            "lambda_l2" => format!("{:?}", u.lambda_l2),
            "lambda_per" => format!("{:?}", u.lambda_per),
            "lambda_id" => format!("{:?}", u.lambda_id),
            "lambda_u" => format!("{:?}", u.lambda_u),
            "lambda_tc" => format!("{:?}", u.lambda_tc),
            "lambda_r" => format!("{:?}", u.lambda_r),
            "epochs" => u.epochs.to_string(),
            "learning_rate" => format!("{:?}", u.learning_rate),
            "forget_ids" => join_ids(&self.forget_ids),
            "seeds" => self.seeds.to_string(),
            "n_per_id" => self.n_per_id.to_string(),
            "id_avg_samples" => self.id_avg_samples.to_string(),
            "mmd_samples" => self.mmd_samples.to_string(),
            "check_pairs" => self.check_pairs.to_string(),
            _ => return None,
        })
    }

    /// Applies a config document; errors name the offending line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not KEY=VALUE")))?;
        self.set(key.trim(), value.trim())
            .map_err(|e| Error::Config(format!("--set {}", strip_config(e))))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.unlearn.validate()?;
        if self.forget_ids.is_empty() {
            return Err(Error::Config("forget_ids must name at least one identity".into()));
        }
        if let Some(&bad) = self.forget_ids.iter().find(|&&i| i >= self.world.k) {
            return Err(Error::Config(format!("forget_ids: identity {bad} out of range (k = {})", self.world.k)));
        }
        let mut sorted = self.forget_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.forget_ids.len() {
            return Err(Error::Config("forget_ids: duplicate identity".into()));
        }
        if self.forget_ids.len() == self.world.k {
            return Err(Error::Config("forget_ids: at least one identity must be retained".into()));
        }
        for (key, v) in [("seeds", self.seeds), ("id_avg_samples", self.id_avg_samples), ("check_pairs", self.check_pairs)] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be >= 1")));
            }
        }
        if self.n_per_id < 10 {
            return Err(Error::Config(format!("n_per_id must be >= 10, got {}", self.n_per_id)));
        }
        if self.mmd_samples < 2 {
            return Err(Error::Config(format!("mmd_samples must be >= 2, got {}", self.mmd_samples)));
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then overrides; validated.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), strip_config(e))))?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("every listed key has a value"));
            out.push('\n');
        }
        out
    }

    pub fn eval_spec(&self, sources: Vec<Vector>) -> EvalSpec {
        EvalSpec {
            forgotten: self.forget_ids.clone(),
            sources,
            n_per_id: self.n_per_id,
            id_avg_samples: self.id_avg_samples,
            mmd_samples: self.mmd_samples,
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
