//! Run configuration: line-based `key = value` files with `#` comments and
//! dotted keys, strict unknown-key rejection, and command-line overrides.

use crate::diffusion::{FeatureTap, UNetSpec};
use crate::encoders::{EncoderSpec, ProjectorSpec};
use crate::error::{Error, Result};
use crate::rng::fnv1a64;
use crate::synthdata::DatasetConfig;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Augmentation policy for the training stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    None,
    Mix,
    MixStitch,
}

impl Augment {
    fn parse(v: &str) -> Option<Self> {
        match v {
            "none" => Some(Augment::None),
            "mix" => Some(Augment::Mix),
            "mix_stitch" => Some(Augment::MixStitch),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Mix => "mix",
            Augment::MixStitch => "mix_stitch",
        }
    }
}

/// What conditions the diffusion model during feature extraction/training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Zero,
    Category,
    PointCloud,
}

impl Condition {
    fn parse(v: &str) -> Option<Self> {
        match v {
            "zero" => Some(Condition::Zero),
            "category" => Some(Condition::Category),
            "pointcloud" => Some(Condition::PointCloud),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Zero => "zero",
            Condition::Category => "category",
            Condition::PointCloud => "pointcloud",
        }
    }
}

/// Granularity of the feature-alignment objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Pooled,
    TokenWise,
}

impl Alignment {
    fn parse(v: &str) -> Option<Self> {
        match v {
            "pooled" => Some(Alignment::Pooled),
            "tokenwise" => Some(Alignment::TokenWise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Alignment::Pooled => "pooled",
            Alignment::TokenWise => "tokenwise",
        }
    }
}

/// Optimizer settings shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: String,

    pub data_categories: usize,
    pub data_samples_per_category: usize,
    pub data_points: usize,
    pub data_views: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub data_train_fraction: f64,
    pub data_jitter: f64,

    pub geom_groups: usize,
    pub geom_group_size: usize,
    pub geom_mix_ratio: f64,
    pub geom_fps_random_start: bool,

    pub model_d_model: usize,
    pub model_depth: usize,
    pub model_heads: usize,
    pub model_tokenizer_hidden: usize,
    pub model_d_cond: usize,
    pub model_d_attn: usize,
    pub model_time_dim: usize,
    pub model_norm_groups: usize,
    pub model_unet_widths: Vec<usize>,
    pub model_cond_tokens: usize,
    pub model_d_proj: usize,
    pub model_proj_depth: usize,
    pub model_proj_heads: usize,

    pub schedule_steps: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,

    pub stage0: OptimCfg,
    pub stage1: OptimCfg,
    pub stage1_t_min: usize,
    pub stage1_t_max: usize,
    pub stage1_augment: Augment,
    pub stage2: OptimCfg,
    pub stage2_tap: FeatureTap,
    pub stage2_condition: Condition,
    pub stage2_augment: Augment,
    pub stage2_alignment: Alignment,

    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
    pub fewshot_ways: usize,
    pub fewshot_shots: usize,
    pub fewshot_test_per_class: usize,
    pub fewshot_runs: usize,
    pub ablation_axis: String,
    pub ablation_seeds: usize,
    pub ablation_epochs: usize,
    pub sample_count: usize,
    pub plot_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("runs"),
            data_dir: "dataset".into(),
            data_categories: 8,
            data_samples_per_category: 200,
            data_points: 256,
            data_views: 8,
            data_height: 32,
            data_width: 32,
            data_train_fraction: 0.8,
            data_jitter: 0.01,
            geom_groups: 16,
            geom_group_size: 16,
            geom_mix_ratio: 0.5,
            geom_fps_random_start: false,
            model_d_model: 96,
            model_depth: 4,
            model_heads: 4,
            model_tokenizer_hidden: 128,
            model_d_cond: 64,
            model_d_attn: 64,
            model_time_dim: 64,
            model_norm_groups: 8,
            model_unet_widths: vec![32, 64, 128],
            model_cond_tokens: 4,
            model_d_proj: 192,
            model_proj_depth: 3,
            model_proj_heads: 4,
            schedule_steps: 1000,
            schedule_beta_start: 1e-4,
            schedule_beta_end: 0.02,
            stage0: OptimCfg { epochs: 12, batch_size: 32, lr: 1e-3, weight_decay: 0.05, warmup_epochs: 1 },
            stage1: OptimCfg { epochs: 8, batch_size: 32, lr: 1e-3, weight_decay: 0.05, warmup_epochs: 1 },
            stage1_t_min: 500,
            stage1_t_max: 1000,
            stage1_augment: Augment::MixStitch,
            stage2: OptimCfg { epochs: 15, batch_size: 32, lr: 1e-3, weight_decay: 0.05, warmup_epochs: 1 },
            stage2_tap: FeatureTap::DownLast,
            stage2_condition: Condition::PointCloud,
            stage2_augment: Augment::MixStitch,
            stage2_alignment: Alignment::Pooled,
            probe_epochs: 100,
            probe_lr: 0.5,
            finetune_epochs: 20,
            finetune_lr: 5e-4,
            finetune_batch_size: 32,
            fewshot_ways: 5,
            fewshot_shots: 10,
            fewshot_test_per_class: 20,
            fewshot_runs: 10,
            ablation_axis: "condition".into(),
            ablation_seeds: 3,
            ablation_epochs: 8,
            sample_count: 4,
            plot_split: "test".into(),
        }
    }
}

fn bad(key: &str, line: usize, detail: &str) -> Error {
    if line > 0 {
        Error::Config(format!("{key} (line {line}): {detail}"))
    } else {
        Error::Config(format!("{key}: {detail}"))
    }
}

macro_rules! parse_as {
    ($ty:ty, $key:expr, $value:expr, $line:expr) => {
        $value
            .parse::<$ty>()
            .map_err(|_| bad($key, $line, &format!("cannot parse '{}' as {}", $value, stringify!($ty))))?
    };
}

impl RunConfig {
    /// Apply one `key = value` assignment. `line` is 0 for CLI overrides.
    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as!(u64, key, value, line),
            "out" => self.out = PathBuf::from(value),
            "data.dir" => self.data_dir = value.to_string(),
            "data.categories" => self.data_categories = parse_as!(usize, key, value, line),
            "data.samples_per_category" => self.data_samples_per_category = parse_as!(usize, key, value, line),
            "data.points" => self.data_points = parse_as!(usize, key, value, line),
            "data.views" => self.data_views = parse_as!(usize, key, value, line),
            "data.height" => self.data_height = parse_as!(usize, key, value, line),
            "data.width" => self.data_width = parse_as!(usize, key, value, line),
            "data.train_fraction" => self.data_train_fraction = parse_as!(f64, key, value, line),
            "data.jitter" => self.data_jitter = parse_as!(f64, key, value, line),
            "geometry.groups" => self.geom_groups = parse_as!(usize, key, value, line),
            "geometry.group_size" => self.geom_group_size = parse_as!(usize, key, value, line),
            "geometry.mix_ratio" => self.geom_mix_ratio = parse_as!(f64, key, value, line),
            "geometry.fps_random_start" => self.geom_fps_random_start = parse_as!(bool, key, value, line),
            "model.d_model" => self.model_d_model = parse_as!(usize, key, value, line),
            "model.depth" => self.model_depth = parse_as!(usize, key, value, line),
            "model.heads" => self.model_heads = parse_as!(usize, key, value, line),
            "model.tokenizer_hidden" => self.model_tokenizer_hidden = parse_as!(usize, key, value, line),
            "model.d_cond" => self.model_d_cond = parse_as!(usize, key, value, line),
            "model.d_attn" => self.model_d_attn = parse_as!(usize, key, value, line),
            "model.time_dim" => self.model_time_dim = parse_as!(usize, key, value, line),
            "model.norm_groups" => self.model_norm_groups = parse_as!(usize, key, value, line),
            "model.unet_widths" => {
                let widths: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse::<usize>()).collect();
                self.model_unet_widths =
                    widths.map_err(|_| bad(key, line, &format!("cannot parse '{value}' as comma-separated widths")))?;
            }
            "model.cond_tokens" => self.model_cond_tokens = parse_as!(usize, key, value, line),
            "model.d_proj" => self.model_d_proj = parse_as!(usize, key, value, line),
            "model.proj_depth" => self.model_proj_depth = parse_as!(usize, key, value, line),
            "model.proj_heads" => self.model_proj_heads = parse_as!(usize, key, value, line),
            "schedule.steps" => self.schedule_steps = parse_as!(usize, key, value, line),
            "schedule.beta_start" => self.schedule_beta_start = parse_as!(f64, key, value, line),
            "schedule.beta_end" => self.schedule_beta_end = parse_as!(f64, key, value, line),
            "stage0.epochs" => self.stage0.epochs = parse_as!(usize, key, value, line),
            "stage0.batch_size" => self.stage0.batch_size = parse_as!(usize, key, value, line),
            "stage0.lr" => self.stage0.lr = parse_as!(f64, key, value, line),
            "stage0.weight_decay" => self.stage0.weight_decay = parse_as!(f64, key, value, line),
            "stage0.warmup_epochs" => self.stage0.warmup_epochs = parse_as!(usize, key, value, line),
            "stage1.epochs" => self.stage1.epochs = parse_as!(usize, key, value, line),
            "stage1.batch_size" => self.stage1.batch_size = parse_as!(usize, key, value, line),
            "stage1.lr" => self.stage1.lr = parse_as!(f64, key, value, line),
            "stage1.weight_decay" => self.stage1.weight_decay = parse_as!(f64, key, value, line),
            "stage1.warmup_epochs" => self.stage1.warmup_epochs = parse_as!(usize, key, value, line),
            "stage1.t_min" => self.stage1_t_min = parse_as!(usize, key, value, line),
            "stage1.t_max" => self.stage1_t_max = parse_as!(usize, key, value, line),
            "stage1.augment" => {
                self.stage1_augment =
                    Augment::parse(value).ok_or_else(|| bad(key, line, "expected none|mix|mix_stitch"))?
            }
            "stage2.epochs" => self.stage2.epochs = parse_as!(usize, key, value, line),
            "stage2.batch_size" => self.stage2.batch_size = parse_as!(usize, key, value, line),
            "stage2.lr" => self.stage2.lr = parse_as!(f64, key, value, line),
            "stage2.weight_decay" => self.stage2.weight_decay = parse_as!(f64, key, value, line),
            "stage2.warmup_epochs" => self.stage2.warmup_epochs = parse_as!(usize, key, value, line),
            "stage2.tap" => self.stage2_tap = FeatureTap::parse(value).map_err(|_| bad(key, line, "expected down|mid|up"))?,
            "stage2.condition" => {
                self.stage2_condition =
                    Condition::parse(value).ok_or_else(|| bad(key, line, "expected zero|category|pointcloud"))?
            }
            "stage2.augment" => {
                self.stage2_augment =
                    Augment::parse(value).ok_or_else(|| bad(key, line, "expected none|mix|mix_stitch"))?
            }
            "stage2.alignment" => {
                self.stage2_alignment =
                    Alignment::parse(value).ok_or_else(|| bad(key, line, "expected pooled|tokenwise"))?
            }
            "probe.epochs" => self.probe_epochs = parse_as!(usize, key, value, line),
            "probe.lr" => self.probe_lr = parse_as!(f64, key, value, line),
            "finetune.epochs" => self.finetune_epochs = parse_as!(usize, key, value, line),
            "finetune.lr" => self.finetune_lr = parse_as!(f64, key, value, line),
            "finetune.batch_size" => self.finetune_batch_size = parse_as!(usize, key, value, line),
            "fewshot.ways" => self.fewshot_ways = parse_as!(usize, key, value, line),
            "fewshot.shots" => self.fewshot_shots = parse_as!(usize, key, value, line),
            "fewshot.test_per_class" => self.fewshot_test_per_class = parse_as!(usize, key, value, line),
            "fewshot.runs" => self.fewshot_runs = parse_as!(usize, key, value, line),
            "ablation.axis" => self.ablation_axis = value.to_string(),
            "ablation.seeds" => self.ablation_seeds = parse_as!(usize, key, value, line),
            "ablation.epochs" => self.ablation_epochs = parse_as!(usize, key, value, line),
            "sample.count" => self.sample_count = parse_as!(usize, key, value, line),
            "plot.split" => self.plot_split = value.to_string(),
            _ => return Err(bad(key, line, "unknown key")),
        }
        Ok(())
    }

    /// Cross-field constraint checks; every violation names the offending key.
    pub fn validate(&self) -> Result<()> {
        let e = |key: &str, detail: String| Err(bad(key, 0, &detail));
        if self.data_categories == 0 || self.data_categories > 8 {
            return e("data.categories", format!("must be 1..=8, got {}", self.data_categories));
        }
        if self.stage1_t_min < 1 || self.stage1_t_min > self.stage1_t_max {
            return e("stage1.t_min", format!("interval [{}, {}] is empty or starts below 1", self.stage1_t_min, self.stage1_t_max));
        }
        if self.stage1_t_max > self.schedule_steps {
            return e("stage1.t_max", format!("{} exceeds schedule.steps = {}", self.stage1_t_max, self.schedule_steps));
        }
        for (name, opt) in [("stage0", &self.stage0), ("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if opt.epochs == 0 || opt.batch_size == 0 {
                return e(&format!("{name}.epochs"), "epochs and batch_size must be positive".into());
            }
            if opt.warmup_epochs > opt.epochs {
                return e(
                    &format!("{name}.warmup_epochs"),
                    format!("warmup {} exceeds total epochs {}", opt.warmup_epochs, opt.epochs),
                );
            }
        }
        if self.model_d_model % self.model_heads != 0 {
            return e("model.heads", format!("{} does not divide d_model {}", self.model_heads, self.model_d_model));
        }
        if self.model_d_proj % self.model_proj_heads != 0 {
            return e("model.proj_heads", format!("{} does not divide d_proj {}", self.model_proj_heads, self.model_d_proj));
        }
        if self.model_unet_widths.is_empty() {
            return e("model.unet_widths", "need at least one level".into());
        }
        for &w in &self.model_unet_widths {
            if w % self.model_norm_groups != 0 {
                return e("model.unet_widths", format!("width {w} not divisible by norm_groups {}", self.model_norm_groups));
            }
        }
        let f = 1usize << self.model_unet_widths.len();
        if self.data_height % f != 0 || self.data_width % f != 0 {
            return e(
                "data.height",
                format!("{}x{} not divisible by 2^{} levels", self.data_height, self.data_width, self.model_unet_widths.len()),
            );
        }
        if self.geom_groups > self.data_points || self.geom_group_size > self.data_points {
            return e("geometry.groups", format!("grouping ({} x {}) exceeds {} points", self.geom_groups, self.geom_group_size, self.data_points));
        }
        if !(0.0..=1.0).contains(&self.geom_mix_ratio) {
            return e("geometry.mix_ratio", format!("{} outside [0, 1]", self.geom_mix_ratio));
        }
        if !(self.schedule_beta_start > 0.0 && self.schedule_beta_start < self.schedule_beta_end && self.schedule_beta_end < 1.0) {
            return e("schedule.beta_start", format!("need 0 < start < end < 1, got ({}, {})", self.schedule_beta_start, self.schedule_beta_end));
        }
        if self.fewshot_ways > self.data_categories {
            return e("fewshot.ways", format!("{} exceeds {} categories", self.fewshot_ways, self.data_categories));
        }
        if self.fewshot_shots + self.fewshot_test_per_class > self.data_samples_per_category {
            return e(
                "fewshot.shots",
                format!(
                    "{} shots + {} test exceed {} samples per category",
                    self.fewshot_shots, self.fewshot_test_per_class, self.data_samples_per_category
                ),
            );
        }
        if self.stage2_alignment == Alignment::TokenWise {
            let (h, w) = (self.data_height / f, self.data_width / f);
            if h * w != self.geom_groups && self.stage2_tap != FeatureTap::UpLast {
                return e(
                    "stage2.alignment",
                    format!("tokenwise alignment needs tap positions {} to equal geometry.groups {}", h * w, self.geom_groups),
                );
            }
        }
        if !(0.1..=0.95).contains(&self.data_train_fraction) {
            return e("data.train_fraction", format!("{} outside [0.1, 0.95]", self.data_train_fraction));
        }
        Ok(())
    }

    // -- derived views used by the rest of the crate --

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            categories: self.data_categories,
            samples_per_category: self.data_samples_per_category,
            points: self.data_points,
            views: self.data_views,
            height: self.data_height,
            width: self.data_width,
            train_fraction: self.data_train_fraction,
            jitter: self.data_jitter as f32,
            master_seed: self.seed,
        }
    }

    pub fn unet_spec(&self) -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            widths: self.model_unet_widths.clone(),
            d_attn: self.model_d_attn,
            d_cond: self.model_d_cond,
            time_dim: self.model_time_dim,
            norm_groups: self.model_norm_groups,
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            d_model: self.model_d_model,
            depth: self.model_depth,
            heads: self.model_heads,
            tokenizer_hidden: self.model_tokenizer_hidden,
            d_cond: self.model_d_cond,
        }
    }

    /// Projector output dimension follows the configured tap's channel count.
    pub fn projector_spec(&self) -> ProjectorSpec {
        let spec = self.unet_spec();
        let d_out = match self.stage2_tap {
            FeatureTap::UpLast => spec.widths[0],
            _ => spec.deepest_width(),
        };
        ProjectorSpec { d_proj: self.model_d_proj, depth: self.model_proj_depth, heads: self.model_proj_heads, d_out }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        let p = Path::new(&self.data_dir);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    /// Canonical dump: every key, sorted, one per line. Feeding this back
    /// through the parser reproduces the config exactly.
    pub fn dump(&self) -> String {
        let widths: Vec<String> = self.model_unet_widths.iter().map(|w| w.to_string()).collect();
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("out".into(), self.out.display().to_string()),
            ("data.dir".into(), self.data_dir.clone()),
            ("data.categories".into(), self.data_categories.to_string()),
            ("data.samples_per_category".into(), self.data_samples_per_category.to_string()),
            ("data.points".into(), self.data_points.to_string()),
            ("data.views".into(), self.data_views.to_string()),
            ("data.height".into(), self.data_height.to_string()),
            ("data.width".into(), self.data_width.to_string()),
            ("data.train_fraction".into(), self.data_train_fraction.to_string()),
            ("data.jitter".into(), self.data_jitter.to_string()),
            ("geometry.groups".into(), self.geom_groups.to_string()),
            ("geometry.group_size".into(), self.geom_group_size.to_string()),
            ("geometry.mix_ratio".into(), self.geom_mix_ratio.to_string()),
            ("geometry.fps_random_start".into(), self.geom_fps_random_start.to_string()),
            ("model.d_model".into(), self.model_d_model.to_string()),
            ("model.depth".into(), self.model_depth.to_string()),
            ("model.heads".into(), self.model_heads.to_string()),
            ("model.tokenizer_hidden".into(), self.model_tokenizer_hidden.to_string()),
            ("model.d_cond".into(), self.model_d_cond.to_string()),
            ("model.d_attn".into(), self.model_d_attn.to_string()),
            ("model.time_dim".into(), self.model_time_dim.to_string()),
            ("model.norm_groups".into(), self.model_norm_groups.to_string()),
            ("model.unet_widths".into(), widths.join(",")),
            ("model.cond_tokens".into(), self.model_cond_tokens.to_string()),
            ("model.d_proj".into(), self.model_d_proj.to_string()),
            ("model.proj_depth".into(), self.model_proj_depth.to_string()),
            ("model.proj_heads".into(), self.model_proj_heads.to_string()),
            ("schedule.steps".into(), self.schedule_steps.to_string()),
            ("schedule.beta_start".into(), self.schedule_beta_start.to_string()),
            ("schedule.beta_end".into(), self.schedule_beta_end.to_string()),
            ("probe.epochs".into(), self.probe_epochs.to_string()),
            ("probe.lr".into(), self.probe_lr.to_string()),
            ("finetune.epochs".into(), self.finetune_epochs.to_string()),
            ("finetune.lr".into(), self.finetune_lr.to_string()),
            ("finetune.batch_size".into(), self.finetune_batch_size.to_string()),
            ("fewshot.ways".into(), self.fewshot_ways.to_string()),
            ("fewshot.shots".into(), self.fewshot_shots.to_string()),
            ("fewshot.test_per_class".into(), self.fewshot_test_per_class.to_string()),
            ("fewshot.runs".into(), self.fewshot_runs.to_string()),
            ("ablation.axis".into(), self.ablation_axis.clone()),
            ("ablation.seeds".into(), self.ablation_seeds.to_string()),
            ("ablation.epochs".into(), self.ablation_epochs.to_string()),
            ("sample.count".into(), self.sample_count.to_string()),
            ("plot.split".into(), self.plot_split.clone()),
            ("stage1.t_min".into(), self.stage1_t_min.to_string()),
            ("stage1.t_max".into(), self.stage1_t_max.to_string()),
            ("stage1.augment".into(), self.stage1_augment.name().into()),
            ("stage2.tap".into(), match self.stage2_tap {
                FeatureTap::DownLast => "down".into(),
                FeatureTap::Mid => "mid".into(),
                FeatureTap::UpLast => "up".into(),
            }),
            ("stage2.condition".into(), self.stage2_condition.name().into()),
            ("stage2.augment".into(), self.stage2_augment.name().into()),
            ("stage2.alignment".into(), self.stage2_alignment.name().into()),
        ];
        for (name, opt) in [("stage0", &self.stage0), ("stage1", &self.stage1), ("stage2", &self.stage2)] {
            pairs.push((format!("{name}.epochs"), opt.epochs.to_string()));
            pairs.push((format!("{name}.batch_size"), opt.batch_size.to_string()));
            pairs.push((format!("{name}.lr"), opt.lr.to_string()));
            pairs.push((format!("{name}.weight_decay"), opt.weight_decay.to_string()));
            pairs.push((format!("{name}.warmup_epochs"), opt.warmup_epochs.to_string()));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a hash of the canonical dump, as fixed-width hex.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(&self.dump()))
    }
}

/// Parse a config file plus `--set key=value` overrides (applied after the
/// file) on top of the defaults. `path = None` means defaults + overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'")))?;
            cfg.apply(k.trim(), v.trim(), line_no)?;
        }
    }
    for (k, v) in overrides {
        cfg.apply(k.trim(), v.trim(), 0)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_valid_defaults() {
        let f = write_cfg("# nothing but a comment\n\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn t_interval_keys_parse() {
        let f = write_cfg("stage1.t_min = 500\nstage1.t_max = 1000\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!((cfg.stage1_t_min, cfg.stage1_t_max), (500, 1000));
    }

    #[test]
    fn t_max_constraint_violation_names_the_key() {
        let f = write_cfg("stage1.t_max = 2000\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage1.t_max"), "message was: {msg}");
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let f = write_cfg("stage1.t_mni = 500\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stage1.t_mni") && msg.contains("line 1"), "message was: {msg}");
    }

    #[test]
    fn type_mismatch_is_rejected() {
        let f = write_cfg("stage0.epochs = soon\n");
        let err = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(err.to_string().contains("stage0.epochs"));
    }

    #[test]
    fn overrides_beat_file_values() {
        let f = write_cfg("seed = 7\nstage0.epochs = 3\n");
        let cfg = parse_config(
            Some(f.path()),
            &[("seed".into(), "9".into()), ("stage0.epochs".into(), "5".into())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stage0.epochs, 5);
    }

    #[test]
    fn dump_round_trips_through_parser() {
        let f = write_cfg("seed = 123\nmodel.unet_widths = 16,32\ndata.height = 16\ndata.width = 16\nstage2.tap = mid\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        let f2 = write_cfg(&cfg.dump());
        let cfg2 = parse_config(Some(f2.path()), &[]).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(cfg.hash(), cfg2.hash());
    }

    #[test]
    fn hash_is_sensitive_to_any_key() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.probe_epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn projector_dim_follows_tap() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.projector_spec().d_out, 128);
        cfg.stage2_tap = FeatureTap::UpLast;
        assert_eq!(cfg.projector_spec().d_out, 32);
    }
}
