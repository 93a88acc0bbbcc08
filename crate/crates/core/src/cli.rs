//! Command-line interface: train, evaluate, gradcheck, bench, synth, and
//! experiment subcommands. Exit codes: 0 success, 1 runtime failure, 2
//! usage or configuration error.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{compose_sets, generate_synthetic, load_embeddings, save_embeddings, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, ResultRow, ResultTable};
use crate::fusion::{FusionOperator, FusionSpec, BILINEAR_CAP};
use crate::nn::{
    loss_gradients, min_relu_gap, parameter_blocks, sample_loss, train_two_step, Model,
    TrainSample,
};
use crate::rng::{derive_seed, rng_from, tags};
use crate::sketch::CountSketchParams;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Worker-thread cap from the FUSIONSKETCH_THREADS environment variable.
/// Unset or empty means 0, which lets the pool default to the hardware
/// parallelism.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("FUSIONSKETCH_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(Error::Config(format!("FUSIONSKETCH_THREADS: {e}"))),
        Ok(raw) if raw.trim().is_empty() => Ok(0),
        Ok(raw) => raw.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "FUSIONSKETCH_THREADS must be a non-negative integer, got {raw:?}"
            ))
        }),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "fusionsketch",
    version,
    about = "Compact multimodal fusion: train, evaluate, and benchmark sketch-based bilinear models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one fused model from a JSON config and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a JSON-lines embedding file.
    Evaluate(EvaluateArgs),
    /// Verify fusion and whole-model gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Time explicit bilinear fusion against the tensor sketch.
    Bench(BenchArgs),
    /// Generate synthetic train/test embedding files from a spec.
    Synth(SynthArgs),
    /// Run the method-comparison grid and write a results table.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (defaults to the config's output_dir, then ".").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON-lines embedding file to evaluate on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for test-set composition.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Composed sets per subject.
    #[arg(long, default_value_t = 250)]
    pub sets_per_subject: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-modality input dims, comma separated, each at most 32.
    #[arg(long, value_delimiter = ',', default_value = "4,5,3")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    pub sketch_dim: usize,
    /// Negative control: corrupt one sketch sign in the backward pass
    /// only, which must make the check fail.
    #[arg(long, hide = true)]
    pub corrupt_signs: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Input dims, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1024,1024")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 4096)]
    pub sketch_dim: usize,
    /// Timed forward passes per arm (after one warmup).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic data spec (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the grid's repetition count.
    #[arg(long)]
    pub repetitions: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Experiment(args) => cmd_experiment(&args),
    }
}

fn output_dir(flag: &Option<PathBuf>, config_dir: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .clone()
        .or_else(|| config_dir.cloned())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = output_dir(&args.out, config.output_dir.as_ref())?;

    let train_pool = match &config.data {
        DataSource::Synthetic { spec } => generate_synthetic(spec)?.0,
        DataSource::Embeddings { train_path, .. } => load_embeddings(train_path)?,
    };
    train_pool.validate_complete()?;
    let subjects = train_pool.subjects();
    let sets = compose_sets(
        &train_pool,
        config.sets_per_subject,
        derive_seed(config.seed, &[tags::EXPERIMENT_COMPOSE_TRAIN]),
    )?;
    let samples: Vec<TrainSample> = sets
        .into_iter()
        .map(|s| {
            let label = subjects
                .binary_search(&s.subject_id)
                .expect("composed subject comes from the pool");
            TrainSample {
                inputs: s.modality_vectors,
                label,
            }
        })
        .collect();

    let dims = train_pool.schema().dims();
    let mut model = Model::init(
        &dims,
        &config.model.hidden_dims,
        config.model.embedding_dim,
        config.model.joint_dim,
        subjects.len(),
        config.fusion.clone(),
        config.seed,
    )?;
    let train_config = config.train.clone().with_seed(config.seed);
    let metrics = train_two_step(&mut model, &samples, &train_config)?;

    let checkpoint_path = out.join("checkpoint.json");
    Checkpoint::from_model(&model, train_pool.schema(), &subjects).save(&checkpoint_path)?;
    let metrics_path = out.join("metrics.json");
    let mut metrics_json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Data(format!("serializing metrics: {e}")))?;
    metrics_json.push('\n');
    std::fs::write(&metrics_path, metrics_json)?;

    if let Some(last) = metrics.last() {
        println!(
            "trained {} samples, final epoch loss {:.6}, accuracy {:.4}",
            samples.len(),
            last.mean_loss,
            last.accuracy
        );
    }
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics:    {}", metrics_path.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (model, schema, class_subjects) = Checkpoint::load(&args.checkpoint)?.into_model()?;
    let pool = load_embeddings(&args.data)?;
    if pool.schema() != &schema {
        return Err(Error::Schema(format!(
            "embedding file modalities {:?} do not match the checkpoint's {:?}",
            pool.schema().modalities,
            schema.modalities
        )));
    }
    pool.validate_complete()?;
    let seed = args.seed.unwrap_or(0);
    let sets = compose_sets(
        &pool,
        args.sets_per_subject,
        derive_seed(seed, &[tags::EXPERIMENT_COMPOSE_TEST]),
    )?;
    let mut predictions = Vec::with_capacity(sets.len());
    let mut truth = Vec::with_capacity(sets.len());
    for sample in &sets {
        let class = class_subjects
            .binary_search(&sample.subject_id)
            .map_err(|_| {
                Error::Schema(format!(
                    "subject {} is not a class of this checkpoint",
                    sample.subject_id
                ))
            })?;
        truth.push(class);
        predictions.push(model.predict(&sample.modality_vectors)?);
    }
    let accuracy = crate::eval::rank_one_accuracy(&predictions, &truth)?;
    let table = ResultTable {
        rows: vec![ResultRow {
            method: "checkpoint".into(),
            subset: (0..schema.modalities.len()).collect(),
            accuracy_mean: accuracy,
            accuracy_std: 0.0,
            n_test: sets.len(),
            repetitions: 1,
        }],
    };
    print!("{}", table.render());
    let out = output_dir(&args.out, None)?;
    let csv_path = out.join("eval.csv");
    std::fs::write(&csv_path, table.to_csv())?;
    println!("csv: {}", csv_path.display());
    Ok(())
}

/// Builds the backward-only corrupted twin of an operator: one sketch
/// sign flipped, so forward and backward disagree.
fn corrupt_one_sign(op: &FusionOperator) -> Result<Option<FusionOperator>> {
    let params = op.subset_params();
    if params.is_empty() {
        return Ok(None);
    }
    let mut records: Vec<Vec<CountSketchParams>> = params.to_vec();
    let target = &records[0][0];
    let mut signs = target.signs().to_vec();
    signs[0] = -signs[0];
    records[0][0] = CountSketchParams::from_parts(
        target.input_dim(),
        target.sketch_dim(),
        target.buckets().to_vec(),
        signs,
        target.seed(),
    )?;
    Ok(Some(FusionOperator::from_parts(
        op.spec().clone(),
        op.input_dims(),
        records,
    )?))
}

/// Max relative error between the analytic input gradient and central
/// finite differences of the quadratic loss 0.5*||fuse(x) - target||^2.
fn fusion_gradient_error(
    spec: FusionSpec,
    dims: &[usize],
    seed: u64,
    corrupt: bool,
) -> Result<f64> {
    let op = FusionOperator::new(spec, dims)?;
    let backward_op = match (corrupt, corrupt_one_sign(&op)?) {
        (true, Some(bad)) => bad,
        _ => op.clone(),
    };
    let mut rng = rng_from(seed, &[tags::GRADCHECK, op.output_dim() as u64]);
    let xs: Vec<Vec<f64>> = dims
        .iter()
        .map(|&d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let target: Vec<f64> = (0..op.output_dim())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = |inputs: &[Vec<f64>]| -> Result<f64> {
        let r: Vec<&[f64]> = inputs.iter().map(|x| x.as_slice()).collect();
        let fused = op.fuse(&r)?;
        Ok(fused
            .values
            .iter()
            .zip(&target)
            .map(|(v, t)| 0.5 * (v - t) * (v - t))
            .sum())
    };
    let fused = op.fuse(&refs)?;
    let grad_out: Vec<f64> = fused
        .values
        .iter()
        .zip(&target)
        .map(|(v, t)| v - t)
        .collect();
    let grads = backward_op.backward(&grad_out, &refs)?;

    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for m in 0..dims.len() {
        for i in 0..dims[m] {
            let mut plus = xs.clone();
            plus[m][i] += step;
            let mut minus = xs.clone();
            minus[m][i] -= step;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * step);
            let rel = (fd - grads[m][i]).abs() / grads[m][i].abs().max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Max relative parameter-gradient error of a small end-to-end model on a
/// kink-free sample.
fn model_gradient_error(dims: &[usize], sketch_dim: usize, seed: u64) -> Result<f64> {
    let model = Model::init(
        dims,
        &[4],
        4,
        4,
        3,
        FusionSpec::generalized(sketch_dim, seed),
        seed,
    )?;
    let sample = {
        let mut attempt = 0u64;
        loop {
            let mut rng = rng_from(seed, &[tags::GRADCHECK, 0xFF, attempt]);
            let inputs: Vec<Vec<f64>> = dims
                .iter()
                .map(|&d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let label = rng.random_range(0..3);
            if min_relu_gap(&model, &inputs)? > 1e-3 {
                break TrainSample { inputs, label };
            }
            attempt += 1;
            if attempt >= 200 {
                return Err(Error::Numerical(
                    "could not find a sample clear of ReLU kinks".into(),
                ));
            }
        }
    };
    let (_, grad_blocks) = loss_gradients(&model, &sample)?;
    let mut probe = model.clone();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for (b, grads) in grad_blocks.iter().enumerate() {
        for k in 0..grads.len() {
            let original = parameter_blocks(&mut probe)[b][k];
            parameter_blocks(&mut probe)[b][k] = original + step;
            let up = sample_loss(&probe, &sample)?;
            parameter_blocks(&mut probe)[b][k] = original - step;
            let down = sample_loss(&probe, &sample)?;
            parameter_blocks(&mut probe)[b][k] = original;
            let fd = (up - down) / (2.0 * step);
            let rel = (fd - grads[k]).abs() / grads[k].abs().max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Per-kind max relative gradient errors, in report order.
pub fn gradcheck_rows(
    seed: u64,
    sizes: &[usize],
    sketch_dim: usize,
    corrupt_signs: bool,
) -> Result<Vec<(String, f64)>> {
    if sizes.len() < 2 {
        return Err(Error::Config(
            "gradcheck needs at least two sizes (one per modality)".into(),
        ));
    }
    for &s in sizes {
        if s == 0 || s > 32 {
            return Err(Error::Config(format!(
                "gradcheck sizes must be in 1..=32, got {s}"
            )));
        }
    }
    if sketch_dim == 0 {
        return Err(Error::Config("sketch_dim must be >= 1".into()));
    }
    let mut rows = Vec::new();
    let kinds: Vec<(&str, FusionSpec)> = vec![
        ("concat", FusionSpec::concat()),
        ("bilinear", FusionSpec::bilinear()),
        ("tensor_sketch", FusionSpec::tensor_sketch(sketch_dim, seed)),
        ("generalized", FusionSpec::generalized(sketch_dim, seed)),
    ];
    for (name, spec) in kinds {
        let err = fusion_gradient_error(spec, sizes, seed, corrupt_signs)?;
        rows.push((name.to_string(), err));
    }
    rows.push((
        "full_model".to_string(),
        model_gradient_error(sizes, sketch_dim, seed)?,
    ));
    Ok(rows)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let rows = gradcheck_rows(args.seed, &args.sizes, args.sketch_dim, args.corrupt_signs)?;
    let mut failures = Vec::new();
    for (name, err) in &rows {
        let ok = *err < GRADCHECK_TOLERANCE;
        println!(
            "{name:<14} max_rel_err {err:.3e}  {}",
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(name.clone());
        }
    }
    if failures.is_empty() {
        println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:.0e})");
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed for: {}",
            failures.join(", ")
        )))
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub method: String,
    pub output_values: Option<usize>,
    pub output_bytes: Option<usize>,
    pub seconds_mean: Option<f64>,
    pub status: String,
}

/// Times one fuse() per arm, `repeats` times after a warmup pass. The
/// explicit bilinear arm is skipped past the capacity cap.
pub fn bench_rows(dims: &[usize], sketch_dim: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if dims.len() < 2 {
        return Err(Error::Config("bench needs at least two dims".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config("bench dims must be >= 1".into()));
    }
    if sketch_dim == 0 {
        return Err(Error::Config("sketch_dim must be >= 1".into()));
    }
    let mut rng = rng_from(0, &[tags::BENCH]);
    let xs: Vec<Vec<f64>> = dims
        .iter()
        .map(|&d| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();

    let time_arm = |op: &FusionOperator| -> Result<f64> {
        op.fuse(&refs)?;
        let start = Instant::now();
        for _ in 0..repeats {
            op.fuse(&refs)?;
        }
        Ok(start.elapsed().as_secs_f64() / repeats as f64)
    };

    let mut rows = Vec::new();
    let bilinear_values = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match bilinear_values {
        Some(v) if v <= BILINEAR_CAP => {
            let op = FusionOperator::new(FusionSpec::bilinear(), dims)?;
            let seconds = time_arm(&op)?;
            rows.push(BenchRow {
                method: "bilinear".into(),
                output_values: Some(v),
                output_bytes: Some(v * 8),
                seconds_mean: Some(seconds),
                status: "ok".into(),
            });
        }
        other => {
            rows.push(BenchRow {
                method: "bilinear".into(),
                output_values: other,
                output_bytes: other.map(|v| v.saturating_mul(8)),
                seconds_mean: None,
                status: "skipped (cap)".into(),
            });
        }
    }
    let op = FusionOperator::new(FusionSpec::tensor_sketch(sketch_dim, 0), dims)?;
    let seconds = time_arm(&op)?;
    rows.push(BenchRow {
        method: "tensor_sketch".into(),
        output_values: Some(sketch_dim),
        output_bytes: Some(sketch_dim * 8),
        seconds_mean: Some(seconds),
        status: "ok".into(),
    });
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,output_values,output_bytes,seconds_mean,status\n");
    for row in rows {
        let fmt_opt = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method,
            fmt_opt(&row.output_values),
            fmt_opt(&row.output_bytes),
            row.seconds_mean.map(|s| format!("{s:.9}")).unwrap_or_default(),
            row.status
        ));
    }
    out
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let rows = bench_rows(&args.dims, args.sketch_dim, args.repeats)?;
    for row in &rows {
        let values = row
            .output_values
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        let seconds = row
            .seconds_mean
            .map(|s| format!("{s:.6}s"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<14} values {:>12}  mean {:>12}  {}",
            row.method, values, seconds, row.status
        );
    }
    let out = output_dir(&args.out, None)?;
    let csv_path = out.join("bench.csv");
    std::fs::write(&csv_path, bench_csv(&rows))?;
    println!("csv: {}", csv_path.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (train, test) = generate_synthetic(&spec)?;
    let out = output_dir(&args.out, None)?;
    let train_path = out.join("train.jsonl");
    let test_path = out.join("test.jsonl");
    save_embeddings(&train, &train_path)?;
    save_embeddings(&test, &test_path)?;
    println!(
        "wrote {} train / {} test samples",
        train.num_samples(),
        test.num_samples()
    );
    println!("train: {}", train_path.display());
    println!("test:  {}", test_path.display());
    Ok(())
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(repetitions) = args.repetitions {
        if repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        let mut grid = config.grid_or_default();
        grid.repetitions = repetitions;
        config.experiment = Some(grid);
    }
    let out = output_dir(&args.out, config.output_dir.as_ref())?;
    let threads = worker_threads()?;
    let table = run_experiment(&config, threads)?;
    print!("{}", table.render());
    let csv_path = out.join("results.csv");
    std::fs::write(&csv_path, table.to_csv())?;
    println!("csv: {}", csv_path.display());
    Ok(())
}
