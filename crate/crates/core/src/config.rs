//! Flat key=value run configuration.
//!
//! One text file drives the whole pipeline. Every key has a default; unknown
//! or duplicate keys are rejected so typos fail loudly. `#` starts a comment.
//! The effective config (defaults plus overrides) is echoed into every output
//! directory, and `RunConfig::to_text` round-trips through `parse`.

use crate::codec::CodecConfig;
use crate::denoiser::{ModelConfig, TrainConfig};
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::metrics::Connectivity;
use crate::synth::TreeSpec;
use crate::volume::SplitSpec;
use crate::voting::VotingConfig;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // synthetic dataset
    pub synth_cases: usize,
    pub dims: [usize; 3],
    pub synth_depth: usize,
    pub synth_branch_prob: f64,
    pub synth_seg_min: usize,
    pub synth_seg_max: usize,
    pub synth_curl: f64,
    pub synth_tube_radius: f64,
    pub synth_noise_sigma: f64,
    pub synth_seed: u64,
    // split
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    // codec
    pub grid: [usize; 3],
    pub max_len: usize,
    pub bit_low: f64,
    pub bit_high: f64,
    pub lambda: f64,
    pub flag_threshold: f64,
    pub pad_zero: bool,
    // diffusion
    pub t_steps: usize,
    pub t_prime: usize,
    pub schedule: ScheduleKind,
    // model
    pub model_hidden: usize,
    pub model_heads: usize,
    pub model_ff: usize,
    pub model_pool: usize,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_seed: u64,
    pub eval_every: usize,
    // voting
    pub vote_k: usize,
    pub vote_tau: usize, // 0 selects the automatic threshold
    pub seed_base: u64,
    pub vote_max_seeds: usize,
    // evaluation
    pub eval_radii: Vec<f64>,
    pub connectivity: Connectivity,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth_cases: 40,
            dims: [32, 32, 32],
            synth_depth: 3,
            synth_branch_prob: 0.7,
            synth_seg_min: 5,
            synth_seg_max: 9,
            synth_curl: 0.25,
            synth_tube_radius: 1.5,
            synth_noise_sigma: 0.1,
            synth_seed: 7,
            split_ratios: [0.7, 0.1, 0.2],
            split_seed: 0,
            grid: [8, 8, 8],
            max_len: 64,
            bit_low: -1.0,
            bit_high: 1.0,
            lambda: 0.0,
            flag_threshold: 0.0,
            pad_zero: false,
            t_steps: 1000,
            t_prime: 100,
            schedule: ScheduleKind::Cosine,
            model_hidden: 128,
            model_heads: 4,
            model_ff: 256,
            model_pool: 8,
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            train_seed: 0,
            eval_every: 1,
            vote_k: 10,
            vote_tau: 0,
            seed_base: 1000,
            vote_max_seeds: 1000,
            eval_radii: vec![1.0, 2.0, 3.0],
            connectivity: Connectivity::TwentySix,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected true/false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "synth_cases" => self.synth_cases = parse_as(key, value)?,
            "dims_x" => self.dims[0] = parse_as(key, value)?,
            "dims_y" => self.dims[1] = parse_as(key, value)?,
            "dims_z" => self.dims[2] = parse_as(key, value)?,
            "synth_depth" => self.synth_depth = parse_as(key, value)?,
            "synth_branch_prob" => self.synth_branch_prob = parse_as(key, value)?,
            "synth_seg_min" => self.synth_seg_min = parse_as(key, value)?,
            "synth_seg_max" => self.synth_seg_max = parse_as(key, value)?,
            "synth_curl" => self.synth_curl = parse_as(key, value)?,
            "synth_tube_radius" => self.synth_tube_radius = parse_as(key, value)?,
            "synth_noise_sigma" => self.synth_noise_sigma = parse_as(key, value)?,
            "synth_seed" => self.synth_seed = parse_as(key, value)?,
            "split_train" => self.split_ratios[0] = parse_as(key, value)?,
            "split_val" => self.split_ratios[1] = parse_as(key, value)?,
            "split_test" => self.split_ratios[2] = parse_as(key, value)?,
            "split_seed" => self.split_seed = parse_as(key, value)?,
            "grid_x" => self.grid[0] = parse_as(key, value)?,
            "grid_y" => self.grid[1] = parse_as(key, value)?,
            "grid_z" => self.grid[2] = parse_as(key, value)?,
            "max_len" => self.max_len = parse_as(key, value)?,
            "bit_low" => self.bit_low = parse_as(key, value)?,
            "bit_high" => self.bit_high = parse_as(key, value)?,
            "lambda" => self.lambda = parse_as(key, value)?,
            "flag_threshold" => self.flag_threshold = parse_as(key, value)?,
            "pad_zero" => self.pad_zero = parse_bool(key, value)?,
            "t_steps" => self.t_steps = parse_as(key, value)?,
            "t_prime" => self.t_prime = parse_as(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "model_hidden" => self.model_hidden = parse_as(key, value)?,
            "model_heads" => self.model_heads = parse_as(key, value)?,
            "model_ff" => self.model_ff = parse_as(key, value)?,
            "model_pool" => self.model_pool = parse_as(key, value)?,
            "epochs" => self.epochs = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "learning_rate" => self.learning_rate = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "train_seed" => self.train_seed = parse_as(key, value)?,
            "eval_every" => self.eval_every = parse_as(key, value)?,
            "vote_k" => self.vote_k = parse_as(key, value)?,
            "vote_tau" => self.vote_tau = parse_as(key, value)?,
            "seed_base" => self.seed_base = parse_as(key, value)?,
            "vote_max_seeds" => self.vote_max_seeds = parse_as(key, value)?,
            "eval_radii" => {
                self.eval_radii = value
                    .split(',')
                    .map(|tok| parse_as::<f64>(key, tok.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "connectivity" => self.connectivity = value.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Cross-field checks plus per-module invariants.
    pub fn validate(&self) -> Result<()> {
        self.codec_cfg().validate()?;
        self.tree_spec().validate()?;
        self.split_spec()?;
        self.model_cfg().validate()?;
        self.train_cfg().validate()?;
        if self.t_steps == 0 || self.t_prime == 0 || self.t_steps % self.t_prime != 0 {
            return Err(Error::Config(format!(
                "t_prime {} must divide t_steps {}",
                self.t_prime, self.t_steps
            )));
        }
        if self.vote_k == 0 {
            return Err(Error::Config("vote_k must be >= 1".into()));
        }
        if self.vote_tau > self.vote_k {
            return Err(Error::Config(format!(
                "vote_tau {} exceeds vote_k {}",
                self.vote_tau, self.vote_k
            )));
        }
        if self.vote_k > self.vote_max_seeds {
            return Err(Error::Config(format!(
                "vote_k {} exceeds vote_max_seeds {}",
                self.vote_k, self.vote_max_seeds
            )));
        }
        if self.eval_radii.is_empty() {
            return Err(Error::Config("eval_radii must be non-empty".into()));
        }
        if self.eval_radii.iter().any(|&r| r < 0.0) {
            return Err(Error::Config("eval_radii must be >= 0".into()));
        }
        Ok(())
    }

    /// Full dump in parseable form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# synthetic dataset\n");
        s.push_str(&format!("synth_cases = {}\n", self.synth_cases));
        s.push_str(&format!("dims_x = {}\n", self.dims[0]));
        s.push_str(&format!("dims_y = {}\n", self.dims[1]));
        s.push_str(&format!("dims_z = {}\n", self.dims[2]));
        s.push_str(&format!("synth_depth = {}\n", self.synth_depth));
        s.push_str(&format!("synth_branch_prob = {}\n", self.synth_branch_prob));
        s.push_str(&format!("synth_seg_min = {}\n", self.synth_seg_min));
        s.push_str(&format!("synth_seg_max = {}\n", self.synth_seg_max));
        s.push_str(&format!("synth_curl = {}\n", self.synth_curl));
        s.push_str(&format!("synth_tube_radius = {}\n", self.synth_tube_radius));
        s.push_str(&format!("synth_noise_sigma = {}\n", self.synth_noise_sigma));
        s.push_str(&format!("synth_seed = {}\n", self.synth_seed));
        s.push_str("# train/val/test split\n");
        s.push_str(&format!("split_train = {}\n", self.split_ratios[0]));
        s.push_str(&format!("split_val = {}\n", self.split_ratios[1]));
        s.push_str(&format!("split_test = {}\n", self.split_ratios[2]));
        s.push_str(&format!("split_seed = {}\n", self.split_seed));
        s.push_str("# coarse-to-fine codec\n");
        s.push_str(&format!("grid_x = {}\n", self.grid[0]));
        s.push_str(&format!("grid_y = {}\n", self.grid[1]));
        s.push_str(&format!("grid_z = {}\n", self.grid[2]));
        s.push_str(&format!("max_len = {}\n", self.max_len));
        s.push_str(&format!("bit_low = {}\n", self.bit_low));
        s.push_str(&format!("bit_high = {}\n", self.bit_high));
        s.push_str(&format!("lambda = {}\n", self.lambda));
        s.push_str(&format!("flag_threshold = {}\n", self.flag_threshold));
        s.push_str(&format!("pad_zero = {}\n", self.pad_zero));
        s.push_str("# diffusion\n");
        s.push_str(&format!("t_steps = {}\n", self.t_steps));
        s.push_str(&format!("t_prime = {}\n", self.t_prime));
        s.push_str(&format!("schedule = {}\n", self.schedule));
        s.push_str("# denoiser\n");
        s.push_str(&format!("model_hidden = {}\n", self.model_hidden));
        s.push_str(&format!("model_heads = {}\n", self.model_heads));
        s.push_str(&format!("model_ff = {}\n", self.model_ff));
        s.push_str(&format!("model_pool = {}\n", self.model_pool));
        s.push_str("# training\n");
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s.push_str(&format!("train_seed = {}\n", self.train_seed));
        s.push_str(&format!("eval_every = {}\n", self.eval_every));
        s.push_str("# voting\n");
        s.push_str(&format!("vote_k = {}\n", self.vote_k));
        s.push_str(&format!("vote_tau = {}\n", self.vote_tau));
        s.push_str(&format!("seed_base = {}\n", self.seed_base));
        s.push_str(&format!("vote_max_seeds = {}\n", self.vote_max_seeds));
        s.push_str("# evaluation\n");
        let radii: Vec<String> = self.eval_radii.iter().map(|r| r.to_string()).collect();
        s.push_str(&format!("eval_radii = {}\n", radii.join(",")));
        s.push_str(&format!(
            "connectivity = {}\n",
            match self.connectivity {
                Connectivity::Six => "6",
                Connectivity::TwentySix => "26",
            }
        ));
        s
    }

    pub fn codec_cfg(&self) -> CodecConfig {
        CodecConfig {
            grid: self.grid,
            max_len: self.max_len,
            bit_low: self.bit_low,
            bit_high: self.bit_high,
            lambda: self.lambda,
            flag_threshold: self.flag_threshold,
            pad_zero: self.pad_zero,
        }
    }

    pub fn tree_spec(&self) -> TreeSpec {
        TreeSpec {
            dims: self.dims,
            depth: self.synth_depth,
            branch_prob: self.synth_branch_prob,
            segment_len: (self.synth_seg_min, self.synth_seg_max),
            curl: self.synth_curl,
            tube_radius: self.synth_tube_radius,
            noise_sigma: self.synth_noise_sigma,
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.split_ratios, self.split_seed)
    }

    pub fn model_cfg(&self) -> ModelConfig {
        ModelConfig {
            d: self.codec_cfg().width(),
            hidden: self.model_hidden,
            heads: self.model_heads,
            ff: self.model_ff,
            pool: self.model_pool,
            vol_dims: self.dims,
        }
    }

    pub fn train_cfg(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.train_seed,
            eval_every: self.eval_every,
        }
    }

    pub fn voting_cfg(&self) -> VotingConfig {
        VotingConfig {
            k: self.vote_k,
            tau: if self.vote_tau == 0 {
                None
            } else {
                Some(self.vote_tau)
            },
            seed_base: self.seed_base,
        }
    }
}
