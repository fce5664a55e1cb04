//! Command-line front end: wires flat key=value configs to the training
//! harness. Every run echoes its effective configuration into the output
//! directory so results are re-runnable from their artifacts alone.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use doublemix_core::augment::{
    apply_plan, sample_operations, ParaphraseTable, SynonymLexicon,
};
use doublemix_core::config::{AblationMode, LabConfig};
use doublemix_core::encoder::{load_checkpoint, save_checkpoint};
use doublemix_core::error::Error;
use doublemix_core::harness::{
    dump_features, evaluate, evaluate_noisy, layer_set_sweep, low_resource_sweep,
    train_multi, Resources,
};
use doublemix_core::text::{load_dataset, Dataset, Vocabulary};

const USAGE: &str = "usage: doublemix <command> [--config FILE] [--key=value ...]

commands:
  train            train on train_path/dev_path, write metrics and checkpoints
  eval             evaluate a checkpoint (--checkpoint FILE) on test_path
  ablate           run every ablation mode, one metrics file per mode
  sweep-layers     one multi-seed run per configured interpolation layer set
  sweep-lowres     one multi-seed run per configured training-set size
  preview-augment  print perturbed variants of the first examples (--n=K)
  dump-features    write pooled features + 2 PCA columns for a checkpoint

Config keys may be set in the --config file or overridden as --key=value;
overrides win. All outputs land under out_dir.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    /// Bad invocation, bad config, missing/bad input files: exit 1.
    Usage(String),
    /// Failures inside the harness itself: exit 2.
    Internal(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Data(_) | Error::Io(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

struct Invocation {
    config: LabConfig,
    /// Flags consumed by the CLI itself rather than the config.
    checkpoint: Option<PathBuf>,
    preview_n: usize,
}

fn parse(args: &[String]) -> CliResult<(String, Invocation)> {
    let command = args
        .first()
        .ok_or_else(|| CliError::Usage("missing command".to_string()))?
        .clone();
    let known = [
        "train",
        "eval",
        "ablate",
        "sweep-layers",
        "sweep-lowres",
        "preview-augment",
        "dump-features",
    ];
    if !known.contains(&command.as_str()) {
        return Err(CliError::Usage(format!("unknown command {command:?}")));
    }

    // first pass: find --config so file values load before overrides
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let stripped = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key=value, got {arg:?}")))?;
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let v = args.get(i).ok_or_else(|| {
                    CliError::Usage(format!("flag --{stripped} needs a value"))
                })?;
                (stripped.to_string(), v.clone())
            }
        };
        pairs.push((key, value));
        i += 1;
    }

    let mut config = LabConfig::default();
    if let Some((_, path)) = pairs.iter().find(|(k, _)| k == "config") {
        config = LabConfig::load(Path::new(path))?;
    }
    let mut checkpoint = None;
    let mut preview_n = 3usize;
    for (key, value) in &pairs {
        match key.as_str() {
            "config" => {}
            "checkpoint" => checkpoint = Some(PathBuf::from(value)),
            "n" => {
                preview_n = value.parse().map_err(|_| {
                    CliError::Usage(format!("--n expects an integer, got {value:?}"))
                })?;
            }
            _ => config.set(key, value)?,
        }
    }
    config.validate()?;
    Ok((command, Invocation { config, checkpoint, preview_n }))
}

fn run(args: &[String]) -> CliResult<()> {
    let (command, inv) = parse(args)?;
    std::fs::create_dir_all(&inv.config.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create out_dir: {e}")))?;
    std::fs::write(
        inv.config.out_dir.join("effective_config.txt"),
        inv.config.to_config_text(),
    )
    .map_err(|e| CliError::Usage(format!("cannot write effective config: {e}")))?;

    match command.as_str() {
        "train" => cmd_train(&inv),
        "eval" => cmd_eval(&inv),
        "ablate" => cmd_ablate(&inv),
        "sweep-layers" => cmd_sweep_layers(&inv),
        "sweep-lowres" => cmd_sweep_lowres(&inv),
        "preview-augment" => cmd_preview(&inv),
        "dump-features" => cmd_dump_features(&inv),
        _ => unreachable!("validated in parse"),
    }
}

fn required_path<'a>(
    path: &'a Option<PathBuf>,
    key: &str,
) -> CliResult<&'a PathBuf> {
    path.as_ref()
        .ok_or_else(|| CliError::Usage(format!("{key} is required for this command")))
}

fn load_splits(cfg: &LabConfig) -> CliResult<(Dataset, Dataset, Option<Dataset>)> {
    let train_path = required_path(&cfg.train_path, "train_path")?;
    let dev_path = required_path(&cfg.dev_path, "dev_path")?;
    let train = load_dataset(train_path, None, cfg.max_seq_len)?;
    let dev = load_dataset(dev_path, Some(&train.label_map), cfg.max_seq_len)?;
    let test = match &cfg.test_path {
        Some(p) => Some(load_dataset(p, Some(&train.label_map), cfg.max_seq_len)?),
        None => None,
    };
    Ok((train, dev, test))
}

fn load_resources(cfg: &LabConfig) -> CliResult<Resources> {
    let lexicon = match &cfg.lexicon_path {
        Some(p) => SynonymLexicon::load(p)?,
        None => SynonymLexicon::default(),
    };
    let table = match &cfg.paraphrase_path {
        Some(p) => ParaphraseTable::load(p)?,
        None => ParaphraseTable::default(),
    };
    Ok(Resources { lexicon, table })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, json)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn save_vocab(vocab: &Vocabulary, path: &Path) -> CliResult<()> {
    write_json(path, &vocab.tokens().to_vec())
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let tokens: Vec<String> = serde_json::from_str(&json)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Vocabulary::from_tokens(tokens)?)
}

fn cmd_train(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let (train, dev, test) = load_splits(cfg)?;
    let resources = load_resources(cfg)?;
    let (runs, report) = train_multi(&train, &dev, test.as_ref(), cfg, &resources)?;

    for run in &runs {
        let name = format!("checkpoint_seed{}.json", run.record.seed);
        save_checkpoint(&run.model, run.vocab.hash(), &cfg.out_dir.join(name))?;
    }
    // all seeds share the training split, hence the vocabulary
    save_vocab(&runs[0].vocab, &cfg.out_dir.join("vocab.json"))?;
    write_json(&cfg.out_dir.join("metrics.json"), &report)?;
    println!(
        "trained {} run(s): accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
        report.runs.len(),
        report.mean.accuracy,
        report.std.accuracy,
        report.mean.macro_f1,
        report.std.macro_f1,
    );
    Ok(())
}

fn cmd_eval(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let ckpt_path = inv
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required for eval".to_string()))?;
    let (model, stored_hash) = load_checkpoint(ckpt_path)?;
    let vocab = load_vocab(&ckpt_path.with_file_name("vocab.json"))?;
    if vocab.hash() != stored_hash {
        return Err(CliError::Usage(format!(
            "vocabulary hash mismatch: checkpoint {stored_hash:#x}, vocab.json {:#x}",
            vocab.hash()
        )));
    }

    let test_path = required_path(&cfg.test_path, "test_path")?;
    let test = load_dataset(test_path, None, cfg.max_seq_len)?;
    let clean = evaluate(&model, &vocab, &test, cfg.batch_size)?;
    let noisy = evaluate_noisy(
        &model,
        &vocab,
        &test,
        cfg.batch_size,
        cfg.eval_noise_sigma,
        cfg.seeds[0],
    )?;
    let out = serde_json::json!({
        "clean": clean,
        "noisy": { "sigma": cfg.eval_noise_sigma, "metrics": noisy },
    });
    write_json(&cfg.out_dir.join("eval.json"), &out)?;
    println!(
        "clean accuracy {:.4}, macro-F1 {:.4}; noisy(sigma={}) accuracy {:.4}",
        clean.accuracy, clean.macro_f1, cfg.eval_noise_sigma, noisy.accuracy
    );
    Ok(())
}

fn cmd_ablate(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let (train, dev, test) = load_splits(cfg)?;
    let resources = load_resources(cfg)?;
    let mut summary = serde_json::Map::new();
    for mode in AblationMode::ALL {
        let mut mode_cfg = cfg.clone();
        mode_cfg.ablation_mode = mode;
        let (_, report) = train_multi(&train, &dev, test.as_ref(), &mode_cfg, &resources)?;
        write_json(
            &cfg.out_dir.join(format!("metrics_{}.json", mode.name())),
            &report,
        )?;
        println!(
            "{:<18} accuracy {:.4} ± {:.4}, macro-F1 {:.4}",
            mode.name(),
            report.mean.accuracy,
            report.std.accuracy,
            report.mean.macro_f1,
        );
        summary.insert(mode.name().to_string(), serde_json::to_value(&report).unwrap());
    }
    write_json(&cfg.out_dir.join("ablation.json"), &summary)?;
    Ok(())
}

fn cmd_sweep_layers(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let (train, dev, test) = load_splits(cfg)?;
    let resources = load_resources(cfg)?;
    let table = layer_set_sweep(&train, &dev, test.as_ref(), cfg, &resources)?;
    write_json(&cfg.out_dir.join("sweep_layers.json"), &table)?;
    for row in &table.rows {
        println!(
            "layers {:<8} accuracy {:.4} (Δ {:+.4}), macro-F1 {:.4} (Δ {:+.4})",
            row.layer_set,
            row.report.mean.accuracy,
            row.delta_accuracy,
            row.report.mean.macro_f1,
            row.delta_macro_f1,
        );
    }
    Ok(())
}

fn cmd_sweep_lowres(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let (train, dev, test) = load_splits(cfg)?;
    let resources = load_resources(cfg)?;
    let table = low_resource_sweep(&train, &dev, test.as_ref(), cfg, &resources)?;
    write_json(&cfg.out_dir.join("sweep_lowres.json"), &table)?;
    for row in &table.rows {
        println!(
            "size {:<6} accuracy {:.4} (Δ {:+.4}), macro-F1 {:.4}",
            row.train_size,
            row.report.mean.accuracy,
            row.delta_accuracy,
            row.report.mean.macro_f1,
        );
    }
    Ok(())
}

fn cmd_preview(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let train_path = required_path(&cfg.train_path, "train_path")?;
    let train = load_dataset(train_path, None, cfg.max_seq_len)?;
    let resources = load_resources(cfg)?;
    let mut ops_stream = doublemix_core::rng::derive(cfg.seeds[0], "ops");
    let mut aug_stream = doublemix_core::rng::derive(cfg.seeds[0], "augment");
    for example in train.examples.iter().take(inv.preview_n) {
        println!("#{} [{}] {}", example.id, example.label, example.raw_text);
        let plan = sample_operations(&cfg.ops, cfg.n_aug, &mut ops_stream)?;
        let samples =
            apply_plan(example, &plan, &resources.lexicon, &resources.table, &mut aug_stream);
        for (op, sample) in plan.ops.iter().zip(&samples) {
            let note = match sample.noise_sigma {
                Some(s) => format!(" + embedding noise sigma={s}"),
                None => String::new(),
            };
            println!("  {:?}{} -> {}", op, note, sample.tokens.join(" "));
        }
    }
    Ok(())
}

fn cmd_dump_features(inv: &Invocation) -> CliResult<()> {
    let cfg = &inv.config;
    let ckpt_path = inv.checkpoint.as_ref().ok_or_else(|| {
        CliError::Usage("--checkpoint is required for dump-features".to_string())
    })?;
    let (model, stored_hash) = load_checkpoint(ckpt_path)?;
    let vocab = load_vocab(&ckpt_path.with_file_name("vocab.json"))?;
    if vocab.hash() != stored_hash {
        return Err(CliError::Usage("vocabulary hash mismatch".to_string()));
    }
    let data_path = cfg
        .test_path
        .as_ref()
        .or(cfg.train_path.as_ref())
        .ok_or_else(|| CliError::Usage("test_path or train_path is required".to_string()))?;
    let dataset = load_dataset(data_path, None, cfg.max_seq_len)?;
    let out = cfg.out_dir.join("features.csv");
    dump_features(&model, &vocab, &dataset, cfg.batch_size, &out)?;
    println!("wrote {} rows to {}", dataset.len(), out.display());
    Ok(())
}
