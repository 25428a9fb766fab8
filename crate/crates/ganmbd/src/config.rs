//! Line-oriented `key = value` run configuration shared by every command.
//! Unknown keys are rejected; the resolved config is echoed next to a run's
//! outputs so any run is reproducible from its artifacts.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::loss::GenAdvVariant;
use crate::networks::{GeneratorSpec, MultiBranchDiscriminatorSpec};
use crate::train::TrainConfig;

/// Which network the `train` command optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gan,
    Refiner,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_root: PathBuf,
    pub image_side: usize,
    pub train_fraction: f64,
    pub num_classes: usize,

    pub branches: usize,
    pub disc_base_channels: usize,
    pub disc_layers: usize,
    pub head_channels: usize,
    pub max_channels: usize,

    pub gen_base_channels: usize,
    pub n_downsample: usize,
    pub n_res_blocks: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub recycling: bool,
    pub lambda_cls: f64,
    pub lambda_cyc: f64,
    pub gen_adv: GenAdvVariant,
    pub checkpoint_every: usize,

    pub model: ModelKind,
    pub refiner_low_side: usize,
    pub refiner_base_channels: usize,
    pub lambda_l1: f64,

    pub synth_count: usize,
    pub synth_noise: f64,
    pub classifier_epochs: usize,

    pub checkpoint: PathBuf,
    pub input_dir: PathBuf,
    pub target_class: String,
    pub splits: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            data_root: "data".into(),
            image_side: 64,
            train_fraction: 0.8,
            num_classes: 3,
            branches: 4,
            disc_base_channels: 64,
            disc_layers: 4,
            head_channels: 64,
            max_channels: 2048,
            gen_base_channels: 16,
            n_downsample: 2,
            n_res_blocks: 3,
            epochs: 50,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            recycling: true,
            lambda_cls: 1.0,
            lambda_cyc: 10.0,
            gen_adv: GenAdvVariant::NonSaturating,
            checkpoint_every: 10,
            model: ModelKind::Gan,
            refiner_low_side: 8,
            refiner_base_channels: 8,
            lambda_l1: 100.0,
            synth_count: 720,
            synth_noise: 2.0,
            classifier_epochs: 12,
            checkpoint: PathBuf::new(),
            input_dir: PathBuf::new(),
            target_class: String::new(),
            splits: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("key {key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "data_root" => self.data_root = value.into(),
            "image_side" => self.image_side = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "branches" => self.branches = parse(key, value)?,
            "disc_base_channels" => self.disc_base_channels = parse(key, value)?,
            "disc_layers" => self.disc_layers = parse(key, value)?,
            "head_channels" => self.head_channels = parse(key, value)?,
            "max_channels" => self.max_channels = parse(key, value)?,
            "gen_base_channels" => self.gen_base_channels = parse(key, value)?,
            "n_downsample" => self.n_downsample = parse(key, value)?,
            "n_res_blocks" => self.n_res_blocks = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "recycling" => self.recycling = parse_bool(key, value)?,
            "lambda_cls" => self.lambda_cls = parse(key, value)?,
            "lambda_cyc" => self.lambda_cyc = parse(key, value)?,
            "gen_adv" => {
                self.gen_adv = match value {
                    "non-saturating" => GenAdvVariant::NonSaturating,
                    "log-one-minus" => GenAdvVariant::LogOneMinus,
                    _ => {
                        return Err(Error::config(format!(
                            "key gen_adv: expected non-saturating or log-one-minus, got {value:?}"
                        )))
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "model" => {
                self.model = match value {
                    "gan" => ModelKind::Gan,
                    "refiner" => ModelKind::Refiner,
                    _ => return Err(Error::config(format!("key model: expected gan or refiner, got {value:?}"))),
                }
            }
            "refiner_low_side" => self.refiner_low_side = parse(key, value)?,
            "refiner_base_channels" => self.refiner_base_channels = parse(key, value)?,
            "lambda_l1" => self.lambda_l1 = parse(key, value)?,
            "synth_count" => self.synth_count = parse(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "classifier_epochs" => self.classifier_epochs = parse(key, value)?,
            "checkpoint" => self.checkpoint = value.into(),
            "input_dir" => self.input_dir = value.into(),
            "target_class" => self.target_class = value.to_string(),
            "splits" => self.splits = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a whole config file body (`key = value` lines, `#` comments).
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::config("branches must be positive"));
        }
        if self.disc_base_channels % self.branches != 0 {
            return Err(Error::config(format!(
                "disc_base_channels {} is not divisible by branches {}",
                self.disc_base_channels, self.branches
            )));
        }
        if self.max_channels % self.branches != 0 {
            return Err(Error::config(format!(
                "max_channels {} is not divisible by branches {}",
                self.max_channels, self.branches
            )));
        }
        if self.image_side % (1 << self.n_downsample) != 0 {
            return Err(Error::config(format!(
                "image_side {} is not divisible by 2^n_downsample",
                self.image_side
            )));
        }
        if self.image_side % self.refiner_low_side != 0 {
            return Err(Error::config("image_side must be a multiple of refiner_low_side"));
        }
        self.gen_spec().validate()?;
        self.disc_spec().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn gen_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            in_channels: 3,
            base_channels: self.gen_base_channels,
            n_downsample: self.n_downsample,
            n_res_blocks: self.n_res_blocks,
            num_classes: self.num_classes,
            image_side: self.image_side,
        }
    }

    pub fn disc_spec(&self) -> MultiBranchDiscriminatorSpec {
        MultiBranchDiscriminatorSpec {
            branches: self.branches,
            base_channels: self.disc_base_channels,
            n_layers: self.disc_layers,
            num_classes: self.num_classes,
            image_side: self.image_side,
            in_channels: 3,
            head_channels: self.head_channels,
            max_channels: self.max_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            total_epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            recycling_enabled: self.recycling,
            lambda_cls: self.lambda_cls,
            lambda_cyc: self.lambda_cyc,
            seed: self.seed,
            gen_adv: self.gen_adv,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            root: self.data_root.clone(),
            class_names: vec![],
            image_side: self.image_side,
            train_fraction: self.train_fraction,
        }
    }

    /// Resolved config as `key = value` text; re-parsing it reproduces self.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let gen_adv = match self.gen_adv {
            GenAdvVariant::NonSaturating => "non-saturating",
            GenAdvVariant::LogOneMinus => "log-one-minus",
        };
        let model = match self.model {
            ModelKind::Gan => "gan",
            ModelKind::Refiner => "refiner",
        };
        let _ = write!(
            s,
            "seed = {}\nout_dir = {}\ndata_root = {}\nimage_side = {}\ntrain_fraction = {}\n\
             num_classes = {}\nbranches = {}\ndisc_base_channels = {}\ndisc_layers = {}\n\
             head_channels = {}\nmax_channels = {}\ngen_base_channels = {}\nn_downsample = {}\n\
             n_res_blocks = {}\nepochs = {}\nbatch_size = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\n\
             recycling = {}\nlambda_cls = {}\nlambda_cyc = {}\ngen_adv = {}\ncheckpoint_every = {}\n\
             model = {}\nrefiner_low_side = {}\nrefiner_base_channels = {}\nlambda_l1 = {}\n\
             synth_count = {}\nsynth_noise = {}\nclassifier_epochs = {}\ncheckpoint = {}\n\
             input_dir = {}\ntarget_class = {}\nsplits = {}\n",
            self.seed,
            self.out_dir.display(),
            self.data_root.display(),
            self.image_side,
            self.train_fraction,
            self.num_classes,
            self.branches,
            self.disc_base_channels,
            self.disc_layers,
            self.head_channels,
            self.max_channels,
            self.gen_base_channels,
            self.n_downsample,
            self.n_res_blocks,
            self.epochs,
            self.batch_size,
            self.lr,
            self.beta1,
            self.beta2,
            self.recycling,
            self.lambda_cls,
            self.lambda_cyc,
            gen_adv,
            self.checkpoint_every,
            model,
            self.refiner_low_side,
            self.refiner_base_channels,
            self.lambda_l1,
            self.synth_count,
            self.synth_noise,
            self.classifier_epochs,
            self.checkpoint.display(),
            self.input_dir.display(),
            self.target_class,
            self.splits,
        );
        s
    }
}
