//! Command-line front end. Settings resolve as flags > `--config` file >
//! built-in defaults, and the effective values are echoed before training.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    build_prompt, gen_synthetic, read_jsonl, train_test_split, write_jsonl, Dataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingStage};
use crate::model::{gradient_check, AblationFlag, ModelConfig, Stream};
use crate::scalar::{DType, Precision, Scalar};
use crate::tensor::Fault;
use crate::training::{self, inspect_checkpoint, load_checkpoint, save_checkpoint, TrainConfig};

/// Checkpoint file written by `train` inside its output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Per-epoch metrics log, one JSON object per line.
pub const METRICS_FILE: &str = "metrics.jsonl";
/// Effective settings of a training run, in `--config` format.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(
    name = "sentiformer",
    version,
    about = "Metadata-enhanced image sentiment classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a feature file and write a checkpoint and metrics log.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled feature file.
    Eval(EvalArgs),
    /// Write per-sample class distributions as JSONL.
    Predict(PredictArgs),
    /// Write a Gaussian-cluster feature file.
    GenSynthetic(GenArgs),
    /// Finite-difference check of the full model gradient in double precision.
    Gradcheck(GradcheckArgs),
    /// Print the metadata prompt for a scene and object list.
    Prompt(PromptArgs),
    /// Write per-sample embeddings before or after the model as JSONL.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training feature file (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, metrics and effective config.
    #[arg(long)]
    out: PathBuf,
    /// Held-out feature file scored after every epoch.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Flat key=value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    depth_n: usize,
    #[arg(long, default_value_t = 6)]
    depth_m: usize,
    /// Ablation switch; repeat or comma-separate. One of: no-vision,
    /// no-caption, no-prompt, mlp-unified, mlp-adaptive, mlp-fusion.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
    /// Number of sentiment classes L.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 1e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Drop probability inside transformer layers while training.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Element type for training: single or double.
    #[arg(long, default_value = "single")]
    precision: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 125)]
    per_class: usize,
    #[arg(long, default_value_t = 512)]
    d_e: usize,
    /// Norm of each class mean.
    #[arg(long, default_value_t = 5.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,
    /// Streams that carry class signal, from v, c, p.
    #[arg(long, default_value = "v,c,p")]
    informative: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split off a test set and write it here.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dh: usize,
    #[arg(long, default_value_t = 4)]
    dk: usize,
    #[arg(long, default_value_t = 4)]
    ds: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    depth_n: usize,
    #[arg(long, default_value_t = 2)]
    depth_m: usize,
    #[arg(long, default_value_t = 16)]
    de: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    scene: String,
    /// Comma-separated object tags, at most ten.
    #[arg(long, value_delimiter = ',')]
    objects: Vec<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// pre: the three input vectors concatenated; post: the fused extra token.
    #[arg(long, default_value = "post")]
    stage: String,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point for the binary: parses `args` and maps errors to exit codes
/// (1 usage or configuration, 2 data, 3 numeric).
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = Cli::from_arg_matches(&matches)
        .map_err(|e| Error::Usage(e.to_string()))
        .and_then(|cli| dispatch(cli, &matches));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train matched");
            cmd_train(&a, sub)
        }
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Prompt(a) => {
            println!("{}", build_prompt(&a.scene, &a.objects)?);
            Ok(())
        }
        Command::ExportEmbeddings(a) => cmd_export(&a),
    }
}

/// Everything `train` needs besides file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::Single,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn parse_ablations(values: &[String]) -> Result<Vec<AblationFlag>> {
    values
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse())
        .collect()
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s.trim() {
        "single" | "f32" => Ok(Precision::Single),
        "double" | "f64" => Ok(Precision::Double),
        _ => Err(Error::Usage(format!(
            "precision must be single or double, got '{s}'"
        ))),
    }
}

impl Settings {
    /// Applies one `key=value` setting. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let (m, t) = (&mut self.model, &mut self.train);
        match key.as_str() {
            "d_e" => m.d_e = parse_value(&key, value)?,
            "d_h" => m.d_h = parse_value(&key, value)?,
            "d_k" => m.d_k = parse_value(&key, value)?,
            "d_s" => m.d_s = parse_value(&key, value)?,
            "classes" => m.classes = parse_value(&key, value)?,
            "depth_n" => m.depth_n = parse_value(&key, value)?,
            "depth_m" => m.depth_m = parse_value(&key, value)?,
            "heads_self" => m.heads_self = parse_value(&key, value)?,
            "heads_cross" => m.heads_cross = parse_value(&key, value)?,
            "ff_mult" => m.ff_mult = parse_value(&key, value)?,
            "ln_eps" => m.ln_eps = parse_value(&key, value)?,
            "ablation" => {
                let flags: Vec<String> = value.split(',').map(str::to_string).collect();
                m.ablation = crate::model::Ablation::from_flags(parse_ablations(&flags)?);
            }
            "learning_rate" => t.learning_rate = parse_value(&key, value)?,
            "batch_size" => t.batch_size = parse_value(&key, value)?,
            "epochs" => t.epochs = parse_value(&key, value)?,
            "weight_decay" => t.weight_decay = parse_value(&key, value)?,
            "seed" => t.seed = parse_value(&key, value)?,
            "adam_beta1" => t.adam_beta1 = parse_value(&key, value)?,
            "adam_beta2" => t.adam_beta2 = parse_value(&key, value)?,
            "adam_eps" => t.adam_eps = parse_value(&key, value)?,
            "init_std" => t.init_std = parse_value(&key, value)?,
            "init_trunc" => t.init_trunc = parse_value(&key, value)?,
            "dropout" => t.dropout = parse_value(&key, value)?,
            "precision" => self.precision = parse_precision(value)?,
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    /// Reads a flat `key=value` file and returns the keys it set. Blank
    /// lines and `#` comments are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut keys = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
            keys.push(k.trim().replace('-', "_"));
        }
        Ok(keys)
    }

    /// Every effective value, in the order and format `apply_file` reads.
    pub fn to_lines(&self) -> Vec<String> {
        let (m, t) = (&self.model, &self.train);
        let flags: Vec<&str> = m.ablation.flags().iter().map(|f| f.name()).collect();
        let precision = match self.precision {
            Precision::Single => "single",
            Precision::Double => "double",
        };
        let pairs: [(&str, String); 24] = [
            ("d_e", m.d_e.to_string()),
            ("d_h", m.d_h.to_string()),
            ("d_k", m.d_k.to_string()),
            ("d_s", m.d_s.to_string()),
            ("classes", m.classes.to_string()),
            ("depth_n", m.depth_n.to_string()),
            ("depth_m", m.depth_m.to_string()),
            ("heads_self", m.heads_self.to_string()),
            ("heads_cross", m.heads_cross.to_string()),
            ("ff_mult", m.ff_mult.to_string()),
            ("ln_eps", m.ln_eps.to_string()),
            ("ablation", flags.join(",")),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("seed", t.seed.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("init_std", t.init_std.to_string()),
            ("init_trunc", t.init_trunc.to_string()),
            ("dropout", t.dropout.to_string()),
            ("precision", precision.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

fn from_command_line(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Defaults, then the config file, then flags given on the command line.
/// Also reports whether the file pinned `d_e`.
fn resolve_settings(a: &TrainArgs, m: &ArgMatches) -> Result<(Settings, bool)> {
    let mut s = Settings::default();
    let mut pinned_d_e = false;
    if let Some(path) = &a.config {
        pinned_d_e = s.apply_file(path)?.iter().any(|k| k == "d_e");
    }
    let flag_values: BTreeMap<&str, String> = [
        ("seed", a.seed.to_string()),
        ("epochs", a.epochs.to_string()),
        ("depth_n", a.depth_n.to_string()),
        ("depth_m", a.depth_m.to_string()),
        ("classes", a.classes.to_string()),
        ("learning_rate", a.learning_rate.to_string()),
        ("batch_size", a.batch_size.to_string()),
        ("weight_decay", a.weight_decay.to_string()),
        ("dropout", a.dropout.to_string()),
        ("precision", a.precision.clone()),
        ("ablation", a.ablation.join(",")),
    ]
    .into_iter()
    .collect();
    for (key, value) in &flag_values {
        if from_command_line(m, key) {
            s.set(key, value)?;
        }
    }
    Ok((s, pinned_d_e))
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = read_jsonl(path, None)?;
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "{} holds no records",
            path.display()
        )));
    }
    Ok(ds)
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let (mut settings, pinned_d_e) = resolve_settings(a, m)?;
    let data = load_data(&a.data)?;
    let eval_data = a.eval_data.as_deref().map(load_data).transpose()?;
    // the feature width comes from the data unless the config pinned it
    if !pinned_d_e {
        settings.model.d_e = data.d_e().expect("non-empty");
    }
    settings.model.validate()?;
    settings.train.validate()?;

    println!("# effective configuration");
    let lines = settings.to_lines();
    for l in &lines {
        println!("{l}");
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let config_path = a.out.join(CONFIG_FILE);
    std::fs::write(&config_path, lines.join("\n") + "\n")
        .map_err(|e| Error::io(&config_path, e))?;

    match settings.precision {
        Precision::Single => train_as::<f32>(&settings, &data, eval_data.as_ref(), &a.out),
        Precision::Double => train_as::<f64>(&settings, &data, eval_data.as_ref(), &a.out),
    }
}

fn train_as<S: Scalar>(
    settings: &Settings,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    out: &Path,
) -> Result<()> {
    let mut model = training::init_model::<S>(settings.model.clone(), &settings.train)?;
    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(&metrics_path, e);
    training::train(&mut model, data, eval_data, &settings.train, |rec, _| {
        serde_json::to_writer(&mut log, rec).map_err(|e| io(e.into()))?;
        log.write_all(b"\n").map_err(io)?;
        log.flush().map_err(io)?;
        let held_out = match (rec.eval_accuracy, rec.eval_macro_f1) {
            (Some(acc), Some(f1)) => format!("  eval_acc {acc:.4}  eval_f1 {f1:.4}"),
            _ => String::new(),
        };
        println!(
            "epoch {:>4}  loss {:.6}  acc {:.4}  f1 {:.4}{held_out}",
            rec.epoch, rec.loss, rec.accuracy, rec.macro_f1
        );
        Ok(())
    })?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &ckpt)?;
    println!("wrote {} and {}", ckpt.display(), metrics_path.display());
    Ok(())
}

/// Runs `$body` with `$model` loaded in the checkpoint's stored precision.
macro_rules! with_checkpoint {
    ($path:expr, |$model:ident| $body:expr) => {{
        let (_, dtype) = inspect_checkpoint($path)?;
        match dtype.unwrap_or(DType::F32) {
            DType::F32 => {
                let $model = load_checkpoint::<f32>($path)?;
                $body
            }
            DType::F64 => {
                let $model = load_checkpoint::<f64>($path)?;
                $body
            }
        }
    }};
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let report = with_checkpoint!(&a.model, |model| eval::evaluate(&model, &data))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = &a.out {
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    predicted: usize,
    probabilities: &'a [f64],
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let dists = with_checkpoint!(&a.model, |model| eval::predict(&model, &data))?;
    let file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    for (r, d) in data.records.iter().zip(&dists) {
        let row = PredictionRow {
            id: &r.id,
            predicted: d.argmax(),
            probabilities: &d.p,
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::io(&a.out, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!("wrote {} predictions to {}", dists.len(), a.out.display());
    Ok(())
}

fn parse_streams(s: &str) -> Result<Vec<Stream>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            Stream::ALL
                .into_iter()
                .find(|st| st.key() == t)
                .ok_or_else(|| Error::Usage(format!("unknown stream '{t}' (expected v, c or p)")))
        })
        .collect()
}

fn cmd_gen_synthetic(a: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        per_class: a.per_class,
        d_e: a.d_e,
        separation: a.separation,
        noise_std: a.noise_std,
        informative: parse_streams(&a.informative)?,
        seed: a.seed,
    };
    let ds = gen_synthetic(&spec)?;
    match &a.test_out {
        Some(test_path) => {
            let (train, test) = train_test_split(&ds, a.test_fraction, a.seed)?;
            write_jsonl(&train, &a.out)?;
            write_jsonl(&test, test_path)?;
            println!(
                "wrote {} records to {} and {} to {}",
                train.len(),
                a.out.display(),
                test.len(),
                test_path.display()
            );
        }
        None => {
            write_jsonl(&ds, &a.out)?;
            println!("wrote {} records to {}", ds.len(), a.out.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut cfg = ModelConfig {
        d_e: a.de,
        classes: a.classes,
        depth_n: a.depth_n,
        depth_m: a.depth_m,
        ..ModelConfig::default()
    }
    .with_dims(a.dh, a.dk, a.ds);
    cfg.ablation = crate::model::Ablation::from_flags(parse_ablations(&a.ablation)?);
    cfg.validate()?;
    let fault = a.corrupt_backward.then_some(Fault::GeluDerivative);
    let report = gradient_check(cfg, a.seed, fault)?;
    println!(
        "max relative error {:e} at {}[{}] over {} coordinates",
        report.max_rel_error, report.worst_param, report.worst_index, report.coordinates
    );
    if report.max_rel_error < 1e-5 {
        println!("gradient check passed");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed: {:e} >= 1e-5",
            report.max_rel_error
        )))
    }
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let stage: EmbeddingStage = a.stage.parse()?;
    let data = load_data(&a.data)?;
    let n = with_checkpoint!(&a.model, |model| eval::export_embeddings(
        &model, &data, stage, &a.out
    ))?;
    println!("wrote {n} embeddings to {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_lines_round_trip_through_set() {
        let mut s = Settings::default();
        s.set("depth-n", "2").unwrap();
        s.set("ablation", "no-caption,mlp-fusion").unwrap();
        s.set("precision", "double").unwrap();
        let mut back = Settings::default();
        for line in s.to_lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let mut s = Settings::default();
        assert!(matches!(s.set("depth", "2"), Err(Error::Config(_))));
        assert!(matches!(s.set("epochs", "many"), Err(Error::Config(_))));
    }
}
