//! Flat key-value run configuration.
//!
//! The on-disk format is one `key = value` per line, `#` comments. Every run
//! echoes its effective configuration back out so results are re-runnable
//! from their artifacts alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::PerturbationOp;
use crate::error::{Error, Result};

/// Training-loss ablation modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Two-step interpolation with the JSD term.
    Full,
    /// JSD term weighted zero (still reported).
    NoJsd,
    /// Single Dirichlet over original + N perturbed, no lambda constraint.
    MergedSteps,
    /// Step II partner is another batch member of any class.
    MixOtherSample,
    /// Step II partner is another batch member of the same class.
    MixSameClass,
    /// Plain cross-entropy on originals; no augmentation at all.
    NoAugBaseline,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no_jsd" => Ok(Self::NoJsd),
            "merged_steps" => Ok(Self::MergedSteps),
            "mix_other_sample" => Ok(Self::MixOtherSample),
            "mix_same_class" => Ok(Self::MixSameClass),
            "no_aug_baseline" => Ok(Self::NoAugBaseline),
            _ => Err(Error::Config(format!("unknown ablation_mode {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoJsd => "no_jsd",
            Self::MergedSteps => "merged_steps",
            Self::MixOtherSample => "mix_other_sample",
            Self::MixSameClass => "mix_same_class",
            Self::NoAugBaseline => "no_aug_baseline",
        }
    }

    pub const ALL: [AblationMode; 6] = [
        Self::Full,
        Self::NoJsd,
        Self::MergedSteps,
        Self::MixOtherSample,
        Self::MixSameClass,
        Self::NoAugBaseline,
    ];
}

/// Everything a run needs, in one flat bag of keys.
#[derive(Debug, Clone)]
pub struct LabConfig {
    // data
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub lexicon_path: Option<PathBuf>,
    pub paraphrase_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub min_freq: usize,
    pub max_seq_len: usize,
    // model
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub encoder_lr: f64,
    pub classifier_lr: f64,
    pub gamma: f64,
    pub seeds: Vec<u64>,
    pub ablation_mode: AblationMode,
    // interpolation
    pub alpha: f64,
    pub tau: f64,
    pub layer_set: Vec<usize>,
    pub n_aug: usize,
    pub per_example_lambda: bool,
    pub ops: Vec<PerturbationOp>,
    // sweeps and extras
    pub sweep_layer_sets: Vec<Vec<usize>>,
    pub sweep_sizes: Vec<usize>,
    pub log_mix_plans: bool,
    /// Test-time embedding noise used by the robustness evaluation.
    pub eval_noise_sigma: f64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            dev_path: None,
            test_path: None,
            lexicon_path: None,
            paraphrase_path: None,
            out_dir: PathBuf::from("out"),
            min_freq: 1,
            max_seq_len: 64,
            embed_dim: 64,
            hidden_dim: 64,
            num_layers: 4,
            epochs: 10,
            batch_size: 16,
            patience: 5,
            encoder_lr: 0.05,
            classifier_lr: 0.1,
            gamma: 8.0,
            seeds: vec![1],
            ablation_mode: AblationMode::Full,
            alpha: 0.75,
            tau: 1.0,
            layer_set: vec![3, 4],
            n_aug: 2,
            per_example_lambda: false,
            ops: vec![
                PerturbationOp::SynonymReplace { ratio: 0.1 },
                PerturbationOp::RandomSwap { ratio: 0.1 },
            ],
            sweep_layer_sets: vec![vec![], vec![0], vec![1, 2], vec![3, 4]],
            sweep_sizes: vec![50, 100, 200, 400],
            log_mix_plans: false,
            eval_noise_sigma: 0.1,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_op(spec: &str) -> Result<PerturbationOp> {
    let (kind, param) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("op {spec:?}: expected kind:param")))?;
    let op = match kind.trim() {
        "synonym_replace" => PerturbationOp::SynonymReplace { ratio: parse_num(kind, param)? },
        "random_insert" => PerturbationOp::RandomInsert { ratio: parse_num(kind, param)? },
        "random_swap" => PerturbationOp::RandomSwap { ratio: parse_num(kind, param)? },
        "random_delete" => PerturbationOp::RandomDelete { prob: parse_num(kind, param)? },
        "paraphrase_lookup" => {
            PerturbationOp::ParaphraseLookup { variant_index: parse_num(kind, param)? }
        }
        "gaussian_noise" => PerturbationOp::GaussianNoise { sigma: parse_num(kind, param)? },
        _ => return Err(Error::Config(format!("unknown perturbation op {kind:?}"))),
    };
    op.validate()?;
    Ok(op)
}

fn op_to_string(op: &PerturbationOp) -> String {
    match *op {
        PerturbationOp::SynonymReplace { ratio } => format!("synonym_replace:{ratio}"),
        PerturbationOp::RandomInsert { ratio } => format!("random_insert:{ratio}"),
        PerturbationOp::RandomSwap { ratio } => format!("random_swap:{ratio}"),
        PerturbationOp::RandomDelete { prob } => format!("random_delete:{prob}"),
        PerturbationOp::ParaphraseLookup { variant_index } => {
            format!("paraphrase_lookup:{variant_index}")
        }
        PerturbationOp::GaussianNoise { sigma } => format!("gaussian_noise:{sigma}"),
    }
}

fn layer_sets_to_string(sets: &[Vec<usize>]) -> String {
    sets.iter()
        .map(|s| {
            if s.is_empty() {
                "none".to_string()
            } else {
                s.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            }
        })
        .collect::<Vec<_>>()
        .join(";")
}

impl LabConfig {
    /// Applies one `key = value` assignment. Unknown keys are an error so a
    /// mistyped override never silently does nothing.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "train_path" => self.train_path = Some(PathBuf::from(v)),
            "dev_path" => self.dev_path = Some(PathBuf::from(v)),
            "test_path" => self.test_path = Some(PathBuf::from(v)),
            "lexicon_path" => self.lexicon_path = Some(PathBuf::from(v)),
            "paraphrase_path" => self.paraphrase_path = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "min_freq" => self.min_freq = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "num_layers" => self.num_layers = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "encoder_lr" => self.encoder_lr = parse_num(key, v)?,
            "classifier_lr" => self.classifier_lr = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "seed" | "seeds" => self.seeds = parse_list(key, v)?,
            "ablation_mode" => self.ablation_mode = AblationMode::parse(v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "layer_set" => self.layer_set = parse_list(key, v)?,
            "n_aug" => self.n_aug = parse_num(key, v)?,
            "per_example_lambda" => self.per_example_lambda = parse_num(key, v)?,
            "ops" => {
                self.ops = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse_op)
                    .collect::<Result<_>>()?;
            }
            "sweep_layer_sets" => {
                self.sweep_layer_sets = v
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        if s == "none" {
                            Ok(Vec::new())
                        } else {
                            parse_list("sweep_layer_sets", s)
                        }
                    })
                    .collect::<Result<_>>()?;
            }
            "sweep_sizes" => self.sweep_sizes = parse_list(key, v)?,
            "log_mix_plans" => self.log_mix_plans = parse_num(key, v)?,
            "eval_noise_sigma" => self.eval_noise_sigma = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Serializes every effective key for the reproducibility echo file.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.train_path {
            kv("train_path", p.display().to_string());
        }
        if let Some(p) = &self.dev_path {
            kv("dev_path", p.display().to_string());
        }
        if let Some(p) = &self.test_path {
            kv("test_path", p.display().to_string());
        }
        if let Some(p) = &self.lexicon_path {
            kv("lexicon_path", p.display().to_string());
        }
        if let Some(p) = &self.paraphrase_path {
            kv("paraphrase_path", p.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        kv("min_freq", self.min_freq.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("hidden_dim", self.hidden_dim.to_string());
        kv("num_layers", self.num_layers.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("patience", self.patience.to_string());
        kv("encoder_lr", self.encoder_lr.to_string());
        kv("classifier_lr", self.classifier_lr.to_string());
        kv("gamma", self.gamma.to_string());
        kv(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("ablation_mode", self.ablation_mode.name().to_string());
        kv("alpha", self.alpha.to_string());
        kv("tau", self.tau.to_string());
        kv(
            "layer_set",
            self.layer_set.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        kv("n_aug", self.n_aug.to_string());
        kv("per_example_lambda", self.per_example_lambda.to_string());
        kv(
            "ops",
            self.ops.iter().map(op_to_string).collect::<Vec<_>>().join(","),
        );
        kv("sweep_layer_sets", layer_sets_to_string(&self.sweep_layer_sets));
        kv(
            "sweep_sizes",
            self.sweep_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        kv("log_mix_plans", self.log_mix_plans.to_string());
        kv("eval_noise_sigma", self.eval_noise_sigma.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".to_string()));
        }
        if self.encoder_lr <= 0.0 || self.classifier_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".to_string()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".to_string()));
        }
        for op in &self.ops {
            op.validate()?;
        }
        self.mix_config().validate(self.num_layers)?;
        Ok(())
    }

    pub fn mix_config(&self) -> crate::mixer::MixConfig {
        crate::mixer::MixConfig {
            alpha: self.alpha,
            tau: self.tau,
            layer_set: self.layer_set.clone(),
            n_aug: self.n_aug,
            per_example_lambda: self.per_example_lambda,
        }
    }
}
