//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. [`RunConfig::to_text`] writes every key, and parsing that text
//! gives back the same config.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::SynthSpec;
use crate::error::{Error, Result};
use crate::simplex_opt::Momentum;
use crate::training::Hyperparams;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// One feature file per modality, in modality order.
    pub features: Vec<PathBuf>,
    pub labels: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// Generate data instead of reading `features`.
    pub synth: Option<SynthSpec>,
    pub hyper: Hyperparams,
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features: Vec::new(),
            labels: None,
            split: None,
            synth: None,
            hyper: Hyperparams::default(),
            output: PathBuf::from("."),
            threads: 0,
            verbose: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "features",
    "labels",
    "split",
    "synth",
    "output",
    "threads",
    "verbose",
    "bits",
    "anchors",
    "clusters",
    "knn",
    "gamma1",
    "gamma2",
    "gamma3",
    "lambda",
    "iters",
    "ogm_iters",
    "ogm_tol",
    "tol",
    "seed",
    "renormalize_fusion",
    "classic_momentum",
    "center",
    "degree_floor",
    "edge_threshold",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        match key {
            "features" => {
                self.features = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "labels" => self.labels = opt_path(value),
            "split" => self.split = opt_path(value),
            "synth" => self.synth = if value.is_empty() { None } else { Some(parse_synth(value)?) },
            "output" => self.output = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            "verbose" => self.verbose = parse(key, value)?,
            "bits" => h.bits = parse(key, value)?,
            "anchors" => h.anchors = parse(key, value)?,
            "clusters" => h.clusters = parse(key, value)?,
            "knn" => h.knn = parse(key, value)?,
            "gamma1" => h.gamma1 = parse(key, value)?,
            "gamma2" => h.gamma2 = parse(key, value)?,
            "gamma3" => h.gamma3 = parse(key, value)?,
            "lambda" => h.lambda = parse(key, value)?,
            "iters" => h.max_iter = parse(key, value)?,
            "ogm_iters" => h.ogm_max_iter = parse(key, value)?,
            "ogm_tol" => h.ogm_tol = parse(key, value)?,
            "tol" => h.tol = parse(key, value)?,
            "seed" => h.seed = parse(key, value)?,
            "renormalize_fusion" => h.renormalize_fusion = parse(key, value)?,
            "classic_momentum" => {
                h.momentum = if parse(key, value)? { Momentum::Classic } else { Momentum::Linear }
            }
            "center" => h.center = parse(key, value)?,
            "degree_floor" => h.degree_floor = parse(key, value)?,
            "edge_threshold" => h.edge_threshold = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let features: Vec<String> = self.features.iter().map(|p| p.display().to_string()).collect();
        let values: Vec<String> = vec![
            features.join(","),
            path(&self.labels),
            path(&self.split),
            self.synth.as_ref().map(format_synth).unwrap_or_default(),
            self.output.display().to_string(),
            self.threads.to_string(),
            self.verbose.to_string(),
            h.bits.to_string(),
            h.anchors.to_string(),
            h.clusters.to_string(),
            h.knn.to_string(),
            h.gamma1.to_string(),
            h.gamma2.to_string(),
            h.gamma3.to_string(),
            h.lambda.to_string(),
            h.max_iter.to_string(),
            h.ogm_max_iter.to_string(),
            h.ogm_tol.to_string(),
            h.tol.to_string(),
            h.seed.to_string(),
            h.renormalize_fusion.to_string(),
            (h.momentum == Momentum::Classic).to_string(),
            h.center.to_string(),
            h.degree_floor.to_string(),
            h.edge_threshold.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// `C=4,N=2000,dims=16:24` with optional `noise=` (default 0.1) and `seed=`
/// (default 0).
pub fn parse_synth(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec { clusters: 0, count: 0, dims: Vec::new(), noise: 0.1, seed: 0 };
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("synth: expected key=value, got {part:?}")))?;
        match k.trim() {
            "C" => spec.clusters = parse("synth C", v)?,
            "N" => spec.count = parse("synth N", v)?,
            "dims" => {
                spec.dims = v
                    .split(':')
                    .map(|d| parse("synth dims", d))
                    .collect::<Result<_>>()?
            }
            "noise" => spec.noise = parse("synth noise", v)?,
            "seed" => spec.seed = parse("synth seed", v)?,
            other => return Err(Error::Config(format!("synth: unknown key {other:?}"))),
        }
    }
    if spec.clusters == 0 || spec.count == 0 || spec.dims.is_empty() {
        return Err(Error::Config(format!("synth: C, N and dims are required in {text:?}")));
    }
    Ok(spec)
}

pub fn format_synth(spec: &SynthSpec) -> String {
    let dims: Vec<String> = spec.dims.iter().map(usize::to_string).collect();
    format!(
        "C={},N={},dims={},noise={},seed={}",
        spec.clusters,
        spec.count,
        dims.join(":"),
        spec.noise,
        spec.seed
    )
}
