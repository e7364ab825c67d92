//! Command-line front end: dataset generation, training, generation,
//! evaluation, side-by-side variant comparison, and step/latency
//! benchmarks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use drivecode::encoders::{EncodingKind, VariantKind};
use drivecode::evalkit::{self, MetricReport, TrajSample};
use drivecode::genloop::{self, GenOptions, PredictionRecord};
use drivecode::numtext::{self, ConversionPolicy, Role};
use drivecode::seqmodel::{Model, ModelConfig};
use drivecode::synthdrive::{self, DataManifest, DialogueRecord, SplitSpec, TaskId};
use drivecode::trainer::{self, TrainConfig};
use drivecode::{Error, Result};

#[derive(Parser)]
#[command(name = "drivecode", about = "Numeric-modality encodings for sequence models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic train/test dataset.
    GenData(GenDataArgs),
    /// Train a model on a task.
    Train(TrainArgs),
    /// Run generation over a dataset with a trained model.
    Generate(GenerateArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Train and evaluate every variant side by side.
    Compare(CompareArgs),
    /// Decode-step accounting and per-step latency.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "speed")]
    task: TaskId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: Option<TaskId>,
    /// Encoding family; shorthand for a variant (drivecode, xval, digits).
    #[arg(long)]
    encoding: Option<EncodingKind>,
    /// Ablation variant; overrides --encoding when both are given.
    #[arg(long)]
    variant: Option<VariantKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// key=value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reproduce a previous run exactly from its manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding train.jsonl/test.jsonl; generated when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Dataset JSONL to prompt from.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "predictions.jsonl")]
    out: PathBuf,
    /// Decode budget per reply.
    #[arg(long, default_value_t = 64)]
    max_steps: usize,
    /// Only the first N records.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "speed")]
    task: TaskId,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Wrap heading errors onto [0, 180].
    #[arg(long, default_value_t = false)]
    wrap_heading: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, default_value = "speed")]
    task: TaskId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 24)]
    model_dim: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "traj")]
    task: TaskId,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    n: usize,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Generate(a) => generate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Compare(a) => compare(a),
        Cmd::Bench(a) => bench(a),
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Everything needed to reproduce a training run bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunManifest {
    task: TaskId,
    variant: VariantKind,
    train: TrainConfig,
    model: ModelConfig,
    n_train: usize,
    n_test: usize,
    data_seed: u64,
    /// FNV-1a hash of the serialized settings above.
    config_hash: String,
    checkpoint: String,
}

impl RunManifest {
    fn with_hash(mut self) -> Result<RunManifest> {
        self.config_hash = String::new();
        let canon = serde_json::to_string(&self)?;
        self.config_hash = format!("{:016x}", fnv1a64(canon.as_bytes()));
        Ok(self)
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let spec = SplitSpec { n_train: a.n_train, n_test: a.n_test, ..SplitSpec::new(a.task, a.seed) };
    let ds = synthdrive::make_split(&spec);
    synthdrive::save_jsonl(&a.out_dir.join("train.jsonl"), &ds.train)?;
    synthdrive::save_jsonl(&a.out_dir.join("test.jsonl"), &ds.test)?;
    for (split, count) in [("train", a.n_train), ("test", a.n_test)] {
        let m = DataManifest {
            task: a.task,
            split: split.to_string(),
            count,
            seed: a.seed,
            dt: spec.params.dt,
            horizon: spec.params.horizon,
            numbers_policy_id: synthdrive::POLICY_ID.to_string(),
        };
        std::fs::write(
            a.out_dir.join(format!("{split}.manifest.json")),
            serde_json::to_string_pretty(&m)?,
        )?;
    }
    println!("wrote {} train / {} test {} dialogues to {}", a.n_train, a.n_test, a.task, a.out_dir.display());
    Ok(())
}

fn resolve_variant(encoding: Option<EncodingKind>, variant: Option<VariantKind>) -> VariantKind {
    if let Some(v) = variant {
        return v;
    }
    match encoding {
        Some(EncodingKind::XVal) => VariantKind::XVal,
        Some(EncodingKind::Digits) => VariantKind::Text,
        Some(EncodingKind::DriveCode) | None => VariantKind::DriveCode,
    }
}

fn load_or_make_data(
    data_dir: Option<&Path>,
    task: TaskId,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    if let Some(dir) = data_dir {
        let train = synthdrive::load_jsonl(&dir.join("train.jsonl"))?;
        let test = synthdrive::load_jsonl(&dir.join("test.jsonl"))?;
        return Ok((train, test));
    }
    let spec = SplitSpec { n_train, n_test, ..SplitSpec::new(task, seed) };
    let ds = synthdrive::make_split(&spec);
    Ok((ds.train, ds.test))
}

fn train_once(manifest: &RunManifest, out_dir: &Path, data_dir: Option<&Path>) -> Result<Model> {
    std::fs::create_dir_all(out_dir)?;
    let (train_recs, _) = load_or_make_data(
        data_dir,
        manifest.task,
        manifest.data_seed,
        manifest.n_train,
        manifest.n_test,
    )?;
    let policy = ConversionPolicy::default();
    let mut model = Model::init(manifest.model, manifest.variant, manifest.train.seed)?;
    model.normalizer = trainer::fit_normalizer(&train_recs, &policy)?;
    let items = trainer::prepare_items(&train_recs, manifest.variant, &policy)?;
    let report = trainer::train(&mut model, &items, &manifest.train)?;
    model.save(&out_dir.join(&manifest.checkpoint))?;
    std::fs::write(out_dir.join("loss_curve.csv"), trainer::curve_to_csv(&report.curve))?;
    std::fs::write(out_dir.join("run_manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    println!(
        "trained {} on {} for {} steps; final loss {:.4}",
        manifest.variant, manifest.task, manifest.train.steps, report.final_loss
    );
    Ok(model)
}

fn train(a: TrainArgs) -> Result<()> {
    let manifest = if let Some(path) = &a.manifest {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        m.with_hash()?
    } else {
        let mut cfg = TrainConfig::default();
        let mut cfg_task: Option<TaskId> = None;
        let mut cfg_encoding: Option<EncodingKind> = None;
        let mut cfg_variant: Option<VariantKind> = None;
        if let Some(path) = &a.config {
            let extra = cfg.apply_kv(&std::fs::read_to_string(path)?)?;
            for (k, v) in extra {
                match k.as_str() {
                    "encoding" => cfg_encoding = Some(v.parse()?),
                    "variant" => cfg_variant = Some(v.parse()?),
                    "task" => cfg_task = Some(v.parse()?),
                    _ => unreachable!("apply_kv only passes through known extras"),
                }
            }
        }
        // command-line flags override the config file
        let task = a.task.or(cfg_task).unwrap_or(TaskId::Speed);
        let encoding = a.encoding.or(cfg_encoding);
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        if let Some(l) = a.lambda {
            cfg.lambda = l;
        }
        cfg.task_kind = match task {
            TaskId::Traj => trainer::TaskKind::Trajectory,
            _ => trainer::TaskKind::Scalar,
        };
        let variant = resolve_variant(encoding, a.variant.or(cfg_variant));
        let mut model = ModelConfig::default();
        if let Some(d) = a.model_dim {
            model.d = d;
        }
        if let Some(l) = a.layers {
            model.n_layers = l;
        }
        if let Some(h) = a.heads {
            model.n_heads = h;
        }
        RunManifest {
            task,
            variant,
            train: cfg,
            model,
            n_train: a.n_train,
            n_test: a.n_test,
            data_seed: a.seed.unwrap_or(0),
            config_hash: String::new(),
            checkpoint: "model.ckpt".to_string(),
        }
        .with_hash()?
    };
    train_once(&manifest, &a.out_dir, a.data_dir.as_deref())?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let mut records = synthdrive::load_jsonl(&a.data)?;
    if let Some(limit) = a.limit {
        records.truncate(limit);
    }
    let policy = ConversionPolicy::default();
    let opts = GenOptions { max_new_tokens: a.max_steps };
    let started = Instant::now();
    let mut preds = Vec::with_capacity(records.len());
    for rec in &records {
        preds.push(PredictionRecord::from(genloop::generate(&model, rec, &policy, &opts)?));
    }
    genloop::save_predictions(&a.out, &preds)?;
    println!(
        "generated {} replies in {:.1}s -> {}",
        preds.len(),
        started.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

/// Numbers in the assistant answer of a record.
fn answer_numbers(rec: &DialogueRecord, policy: &ConversionPolicy) -> Result<Vec<f64>> {
    let answers: Vec<_> =
        rec.turns.iter().filter(|t| t.role == Role::Assistant).cloned().collect();
    Ok(numtext::encode_dialogue(&answers, policy)?.numbers)
}

/// Numbers in the non-assistant prefix of a record.
fn prompt_numbers(rec: &DialogueRecord, policy: &ConversionPolicy) -> Result<Vec<f64>> {
    let prompt: Vec<_> =
        rec.turns.iter().take_while(|t| t.role != Role::Assistant).cloned().collect();
    Ok(numtext::encode_dialogue(&prompt, policy)?.numbers)
}

fn build_report(
    task: TaskId,
    records: &[DialogueRecord],
    preds: &[PredictionRecord],
    wrap_heading: bool,
) -> Result<MetricReport> {
    if records.len() != preds.len() {
        return Err(Error::Input(format!(
            "{} records vs {} predictions",
            records.len(),
            preds.len()
        )));
    }
    let policy = ConversionPolicy::default();
    // missing emissions score as zeros rather than being skipped
    let nth = |p: &PredictionRecord, i: usize| p.numbers.get(i).copied().unwrap_or(0.0);
    match task {
        TaskId::Copy | TaskId::Speed => {
            let mut gts = Vec::with_capacity(records.len());
            let mut ps = Vec::with_capacity(records.len());
            for (rec, p) in records.iter().zip(preds) {
                gts.push(answer_numbers(rec, &policy)?[0]);
                ps.push(nth(p, 0));
            }
            let field = if task == TaskId::Copy { "value" } else { "speed" };
            evalkit::eval_scalar_batch(&ps, &gts, field)
        }
        TaskId::Traj => {
            let mut samples = Vec::with_capacity(records.len());
            for (rec, p) in records.iter().zip(preds) {
                let prompt = prompt_numbers(rec, &policy)?;
                let gt_nums = answer_numbers(rec, &policy)?;
                let pairs = |nums: &dyn Fn(usize) -> f64, n: usize| {
                    (0..n).map(|i| (nums(2 * i), nums(2 * i + 1))).collect::<Vec<_>>()
                };
                let n = gt_nums.len() / 2;
                let gt = pairs(&|i| gt_nums[i], n);
                let pred = pairs(&|i| nth(p, i), n);
                // prompt layout: x, y, heading, speed, dt
                samples.push(TrajSample { start: (prompt[0], prompt[1]), dt: prompt[4], pred, gt });
            }
            evalkit::eval_traj_batch(&samples, wrap_heading)
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let records = synthdrive::load_jsonl(&a.data)?;
    let preds = genloop::load_predictions(&a.preds)?;
    let report = build_report(a.task, &records, &preds, a.wrap_heading)?;
    std::fs::write(a.out_dir.join("report.csv"), report.to_csv())?;
    std::fs::write(a.out_dir.join("report.json"), report.to_json()?)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let mut rows = vec!["variant,final_loss,rmse,acc_0.5,mean_steps".to_string()];
    for variant in VariantKind::ALL {
        let manifest = RunManifest {
            task: a.task,
            variant,
            train: TrainConfig {
                steps: a.steps,
                lambda: a.lambda,
                seed: a.seed,
                task_kind: match a.task {
                    TaskId::Traj => trainer::TaskKind::Trajectory,
                    _ => trainer::TaskKind::Scalar,
                },
                ..TrainConfig::default()
            },
            model: ModelConfig {
                d: a.model_dim,
                n_layers: a.layers,
                n_heads: a.heads,
                ..ModelConfig::default()
            },
            n_train: a.n_train,
            n_test: a.n_test,
            data_seed: a.seed,
            config_hash: String::new(),
            checkpoint: "model.ckpt".to_string(),
        }
        .with_hash()?;
        let dir = a.out_dir.join(variant.name());
        let model = train_once(&manifest, &dir, None)?;
        let (_, test) = load_or_make_data(None, a.task, a.seed, a.n_train, a.n_test)?;
        let policy = ConversionPolicy::default();
        let opts = GenOptions::default();
        let mut preds = Vec::with_capacity(test.len());
        for rec in &test {
            preds.push(PredictionRecord::from(genloop::generate(&model, rec, &policy, &opts)?));
        }
        let report = build_report(a.task, &test, &preds, false)?;
        let (_, m) = &report.fields[0];
        let mean_steps =
            preds.iter().map(|p| p.steps).sum::<usize>() as f64 / preds.len().max(1) as f64;
        rows.push(format!(
            "{},{:.6},{:.6},{:.4},{:.1}",
            variant.name(),
            // last curve point is in the per-run loss_curve.csv; re-read
            std::fs::read_to_string(dir.join("loss_curve.csv"))?
                .lines()
                .last()
                .and_then(|l| l.rsplit(',').next())
                .and_then(|v| v.parse::<f64>().ok())
                .unwrap_or(f64::NAN),
            m.rmse,
            m.acc[1],
            mean_steps
        ));
    }
    let table = rows.join("\n");
    std::fs::write(a.out_dir.join("compare.csv"), format!("{table}\n"))?;
    println!("{table}");
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let spec = SplitSpec { n_train: 0, n_test: a.n, ..SplitSpec::new(a.task, a.seed) };
    let ds = synthdrive::make_split(&spec);
    let policy = ConversionPolicy::default();
    let mut digit = 0usize;
    let mut numeric = 0usize;
    for rec in &ds.test {
        let answer = rec
            .turns
            .iter()
            .find(|t| t.role == Role::Assistant)
            .ok_or_else(|| Error::Input("record has no assistant turn".into()))?;
        let c = genloop::answer_step_counts(&answer.text, &policy)?;
        digit += c.digit_steps();
        numeric += c.numeric_steps();
    }
    let n = ds.test.len().max(1) as f64;
    println!("task: {}  answers: {}", a.task, ds.test.len());
    println!("scheme,mean_steps");
    println!("digit,{:.2}", digit as f64 / n);
    println!("numeric,{:.2}", numeric as f64 / n);
    println!("reduction,{:.2}x", digit as f64 / numeric.max(1) as f64);

    // per-step decode latency with an untrained default-size model
    let model = Model::init(ModelConfig::default(), VariantKind::DriveCode, a.seed)?;
    let rec = &ds.test[0];
    let opts = GenOptions { max_new_tokens: 16 };
    let started = Instant::now();
    let out = genloop::generate(&model, rec, &policy, &opts)?;
    let per_step = started.elapsed().as_secs_f64() / out.steps.max(1) as f64;
    println!("decode_latency_ms_per_step,{:.2}", per_step * 1e3);
    Ok(())
}
