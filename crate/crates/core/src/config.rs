//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # desk-scale run
//! network.scale_factor = 4
//! embedding.similarity_mode = cosine
//! train.epochs = 20
//! ```
//!
//! `network.scale_factor` is applied first (it picks the preset the other
//! network keys modify); every other key is applied in order, so later
//! assignments win. `seed` sets the network, training and data seeds at once.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::data::SceneGenConfig;
use crate::error::{Error, Result};
use crate::layers::{CandidateMode, SimilarityMode};
use crate::metrics::Pinhole;
use crate::network::NetworkConfig;
use crate::training::{LossConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: SceneGenConfig,
    /// Number of pairs `gen-data` writes.
    pub data_count: usize,
    pub data_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Computes image-plane metrics with this camera when set.
    pub camera: Option<Pinhole>,
    pub gradcheck_eps: f64,
    pub gradcheck_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let network = NetworkConfig::desk();
        Self {
            data: SceneGenConfig {
                n_points: network.n_input,
                ..Default::default()
            },
            network,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            data_count: 8,
            data_dir: None,
            eval_dir: None,
            checkpoint: None,
            camera: None,
            gradcheck_eps: 1e-4,
            gradcheck_points: 16,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "network.scale_factor",
    "network.n_input",
    "network.level_sizes",
    "network.pyramid_widths",
    "network.embed_width",
    "network.enc_width",
    "network.k_setconv",
    "network.k_upconv",
    "network.k_reembed",
    "network.k_gru",
    "network.predictor_kind",
    "network.predictor_inputs",
    "network.refinement_design",
    "network.seed",
    "embedding.similarity_mode",
    "embedding.backward_validation",
    "embedding.candidates",
    "train.lr0",
    "train.gamma",
    "train.decay_every",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.batch_size",
    "train.epochs",
    "train.start_epoch",
    "train.save_every",
    "train.shuffle_points",
    "train.augment_rotation",
    "train.augment_shift",
    "train.augment_ego",
    "train.augment_until",
    "train.seed",
    "loss.psi",
    "loss.mask_mode",
    "data.n_points",
    "data.n_objects",
    "data.translation_range",
    "data.rotation_range",
    "data.noise_sigma",
    "data.occlusion_fraction",
    "data.seed",
    "data.count",
    "paths.data",
    "paths.eval_data",
    "paths.checkpoint",
    "eval.camera",
    "eval.focal",
    "eval.cx",
    "eval.cy",
    "gradcheck.eps",
    "gradcheck.points",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

fn parse_list<V: FromStr, const N: usize>(key: &str, value: &str) -> Result<[V; N]>
where
    V::Err: std::fmt::Display,
{
    let items: Vec<V> = value
        .split(',')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    let got = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs {N} comma-separated values, got {got}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value}: expected true or false"))),
    }
}

fn enum_value<V: FromStr<Err = Error>>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|e: Error| match e {
        Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => Error::Config(format!("{key}: {other}")),
    })
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = vec![];
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Builds a configuration from ordered assignments.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut last: IndexMap<&str, &str> = IndexMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            last.insert(k, v);
        }
        let mut cfg = RunConfig::default();
        if let Some(v) = last.get("network.scale_factor") {
            let f: usize = parse("network.scale_factor", v)?;
            if f == 0 {
                return Err(Error::Config("network.scale_factor must be positive".into()));
            }
            cfg.network = NetworkConfig::scaled(f);
            cfg.data.n_points = cfg.network.n_input;
        }
        for (k, v) in pairs {
            if k != "network.scale_factor" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_lines(text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    fn camera_mut(&mut self) -> &mut Pinhole {
        self.camera.get_or_insert_with(Pinhole::default)
    }

    /// Applies one assignment (except `network.scale_factor`).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.network;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => {
                let s: u64 = parse(key, v)?;
                n.seed = s;
                t.seed = s;
                d.seed = s;
            }
            "network.scale_factor" => {
                return Err(Error::Config("network.scale_factor is only accepted through from_pairs".into()))
            }
            "network.n_input" => n.n_input = parse(key, v)?,
            "network.level_sizes" => n.level_sizes = parse_list(key, v)?,
            "network.pyramid_widths" => n.pyramid_widths = parse_list(key, v)?,
            "network.embed_width" => n.embed_width = parse(key, v)?,
            "network.enc_width" => n.enc_width = parse(key, v)?,
            "network.k_setconv" => n.k_setconv = parse(key, v)?,
            "network.k_upconv" => n.k_upconv = parse(key, v)?,
            "network.k_reembed" => n.k_reembed = parse(key, v)?,
            "network.k_gru" => n.k_gru = parse(key, v)?,
            "network.predictor_kind" => n.predictor_kind = enum_value(key, v)?,
            "network.predictor_inputs" => n.predictor_inputs = enum_value(key, v)?,
            "network.refinement_design" => n.refinement_design = enum_value(key, v)?,
            "network.seed" => n.seed = parse(key, v)?,
            "embedding.similarity_mode" => n.embedding.similarity = enum_value::<SimilarityMode>(key, v)?,
            "embedding.backward_validation" => n.embedding.backward_validation = parse_bool(key, v)?,
            "embedding.candidates" => n.embedding.candidates = enum_value::<CandidateMode>(key, v)?,
            "train.lr0" => t.lr0 = parse(key, v)?,
            "train.gamma" => t.gamma = parse(key, v)?,
            "train.decay_every" => t.decay_every = parse(key, v)?,
            "train.beta1" => t.adam.beta1 = parse(key, v)?,
            "train.beta2" => t.adam.beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam.eps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.start_epoch" => t.start_epoch = parse(key, v)?,
            "train.save_every" => t.save_every = parse(key, v)?,
            "train.shuffle_points" => t.shuffle_points = parse_bool(key, v)?,
            "train.augment_rotation" => t.augment_rotation = parse(key, v)?,
            "train.augment_shift" => t.augment_shift = parse(key, v)?,
            "train.augment_ego" => t.augment_ego = parse(key, v)?,
            "train.augment_until" => t.augment_until = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "loss.psi" => self.loss.psi = parse_list(key, v)?,
            "loss.mask_mode" => self.loss.mask_mode = enum_value(key, v)?,
            "data.n_points" => d.n_points = parse(key, v)?,
            "data.n_objects" => d.n_objects = parse(key, v)?,
            "data.translation_range" => d.translation_range = parse(key, v)?,
            "data.rotation_range" => d.rotation_range = parse(key, v)?,
            "data.noise_sigma" => d.noise_sigma = parse(key, v)?,
            "data.occlusion_fraction" => d.occlusion_fraction = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "data.count" => self.data_count = parse(key, v)?,
            "paths.data" => self.data_dir = Some(PathBuf::from(v)),
            "paths.eval_data" => self.eval_dir = Some(PathBuf::from(v)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "eval.camera" => {
                self.camera = if parse_bool(key, v)? {
                    Some(self.camera.unwrap_or_default())
                } else {
                    None
                }
            }
            "eval.focal" => self.camera_mut().focal = parse(key, v)?,
            "eval.cx" => self.camera_mut().cx = parse(key, v)?,
            "eval.cy" => self.camera_mut().cy = parse(key, v)?,
            "gradcheck.eps" => self.gradcheck_eps = parse(key, v)?,
            "gradcheck.points" => self.gradcheck_points = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        if !(self.gradcheck_eps > 0.0) {
            return Err(Error::Config("gradcheck.eps must be positive".into()));
        }
        if self.gradcheck_points < 8 {
            return Err(Error::Config("gradcheck.points must be at least 8".into()));
        }
        Ok(())
    }

    /// The configuration as `key = value` lines that parse back to it
    /// (paths and the camera only when set).
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let t = &self.train;
        let d = &self.data;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines: Vec<(String, String)> = vec![
            ("network.scale_factor".into(), n.scale_factor.to_string()),
            ("network.n_input".into(), n.n_input.to_string()),
            ("network.level_sizes".into(), list(&n.level_sizes)),
            ("network.pyramid_widths".into(), list(&n.pyramid_widths)),
            ("network.embed_width".into(), n.embed_width.to_string()),
            ("network.enc_width".into(), n.enc_width.to_string()),
            ("network.k_setconv".into(), n.k_setconv.to_string()),
            ("network.k_upconv".into(), n.k_upconv.to_string()),
            ("network.k_reembed".into(), n.k_reembed.to_string()),
            ("network.k_gru".into(), n.k_gru.to_string()),
            ("network.predictor_kind".into(), n.predictor_kind.to_string()),
            ("network.predictor_inputs".into(), n.predictor_inputs.to_string()),
            ("network.refinement_design".into(), n.refinement_design.to_string()),
            ("network.seed".into(), n.seed.to_string()),
            ("embedding.similarity_mode".into(), n.embedding.similarity.to_string()),
            ("embedding.backward_validation".into(), n.embedding.backward_validation.to_string()),
            ("embedding.candidates".into(), n.embedding.candidates.to_string()),
            ("train.lr0".into(), format!("{:?}", t.lr0)),
            ("train.gamma".into(), format!("{:?}", t.gamma)),
            ("train.decay_every".into(), t.decay_every.to_string()),
            ("train.beta1".into(), format!("{:?}", t.adam.beta1)),
            ("train.beta2".into(), format!("{:?}", t.adam.beta2)),
            ("train.adam_eps".into(), format!("{:?}", t.adam.eps)),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.start_epoch".into(), t.start_epoch.to_string()),
            ("train.save_every".into(), t.save_every.to_string()),
            ("train.shuffle_points".into(), t.shuffle_points.to_string()),
            ("train.augment_rotation".into(), format!("{:?}", t.augment_rotation)),
            ("train.augment_shift".into(), format!("{:?}", t.augment_shift)),
            ("train.augment_ego".into(), format!("{:?}", t.augment_ego)),
            ("train.augment_until".into(), t.augment_until.to_string()),
            ("train.seed".into(), t.seed.to_string()),
            (
                "loss.psi".into(),
                self.loss.psi.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(","),
            ),
            ("loss.mask_mode".into(), self.loss.mask_mode.to_string()),
            ("data.n_points".into(), d.n_points.to_string()),
            ("data.n_objects".into(), d.n_objects.to_string()),
            ("data.translation_range".into(), format!("{:?}", d.translation_range)),
            ("data.rotation_range".into(), format!("{:?}", d.rotation_range)),
            ("data.noise_sigma".into(), format!("{:?}", d.noise_sigma)),
            ("data.occlusion_fraction".into(), format!("{:?}", d.occlusion_fraction)),
            ("data.seed".into(), d.seed.to_string()),
            ("data.count".into(), self.data_count.to_string()),
            ("gradcheck.eps".into(), format!("{:?}", self.gradcheck_eps)),
            ("gradcheck.points".into(), self.gradcheck_points.to_string()),
        ];
        for (k, p) in [
            ("paths.data", &self.data_dir),
            ("paths.eval_data", &self.eval_dir),
            ("paths.checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = p {
                lines.push((k.into(), p.display().to_string()));
            }
        }
        if let Some(c) = self.camera {
            lines.push(("eval.focal".into(), format!("{:?}", c.focal)));
            lines.push(("eval.cx".into(), format!("{:?}", c.cx)));
            lines.push(("eval.cy".into(), format!("{:?}", c.cy)));
        }
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
