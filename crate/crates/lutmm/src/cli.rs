//! Experiment command line: train a reference MLP, then measure lookup-based
//! replacement layer by layer, network-wide, or across fitting objectives.
//!
//! Every command records its seed, build version and full flag set as `#`
//! comment lines above the CSV header
//! `experiment,layer,codebooks,partition,objective,accuracy,relative_accuracy,ratio,breakeven_c`.
//! Accuracy is in percent; relative accuracy is the ratio to the exact
//! model's accuracy. Exit codes: 0 success, 2 usage or input error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data_io::{load_cifar10, load_mnist, load_model, save_model, verify_checksums, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::nn::{
    incremental_replace_all, replace_layer, train, MlpModel, PartitionStrategy, TrainConfig,
};
use crate::table::{lac_cost_model, quantize_lut, Activation, FitConfig, Objective};

pub const BUILD_VERSION: &str = env!("LUTMM_BUILD_VERSION");
pub const DATA_DIR_ENV: &str = "LUTMM_DATA_DIR";

pub const CSV_HEADER: &str =
    "experiment,layer,codebooks,partition,objective,accuracy,relative_accuracy,ratio,breakeven_c";

const USAGE: &str = "\
lutmm — lookup-accumulate approximation of dense layers

Usage: lutmm <command> [flags]

Commands:
  train        Train a dense MLP and write a model archive.
  ablate       Replace one layer at a time from the pristine model.
  replace-all  Incrementally replace every layer (with fine-tuning).
  compare      Compare fitting objectives and partitions on the final layer.

Common flags:
  --data-dir DIR        Dataset directory (or $LUTMM_DATA_DIR; default data/mnist)
  --out PATH            Output archive (train) or CSV (experiments)
  --seed N              Base seed (default 7)
  --mac-lac-ratio F     Cost of one MAC in LAC units (default 1.0)
  --quantized           Quantize tables to 8 bits and evaluate that path
  --jobs N              Parallel experiment cells (default 1)

train flags:
  --dataset mnist|cifar10   (default mnist)
  --arch A,B,...            Layer widths (default 784,30,30,30,10)
  --epochs N --batch N --lr F
  --verify-checksums        Check data files against checksums.sha256

experiment flags (ablate / replace-all / compare):
  --model PATH              Trained archive from `lutmm train`
  --codebooks LIST          e.g. 1,2,4,8,16
  --partition P             naive|opq|r2 (ablate & replace-all; default r2)
  --partitions LIST         (compare; default naive,opq,r2)
  --objective O             baseline|mse|kld (ablate & replace-all; default kld)
  --objectives LIST         (compare; default baseline,mse,kld)
  --lambda F --opt-steps N --fit-lr F --fit-samples N
  --no-finetune             (replace-all) skip the fine-tuning passes
  --ft-epochs N --ft-lr F   (replace-all) fine-tuning budget (default 5, 0.02)
";

/// One CSV row of an experiment report.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub experiment: String,
    pub layer: String,
    pub codebooks: usize,
    pub partition: String,
    pub objective: String,
    /// Percent, 0..100.
    pub accuracy: f64,
    pub relative_accuracy: f64,
    pub ratio: f64,
    pub breakeven_c: f64,
}

impl ExperimentRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.6},{},{:.4}",
            self.experiment,
            self.layer,
            self.codebooks,
            self.partition,
            self.objective,
            self.accuracy,
            self.relative_accuracy,
            self.ratio,
            self.breakeven_c
        )
    }
}

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match run_inner(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::SingularSystem(_) | Error::NonFiniteLoss { .. } | Error::DegenerateData(_) => 3,
        _ => 2,
    }
}

fn run_inner(args: &[String]) -> Result<()> {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return Err(Error::InvalidParam("missing command".into()));
    };
    let flags = Flags::parse(&args[1..])?;
    match command.as_str() {
        "train" => cmd_train(&flags),
        "ablate" => cmd_ablate(&flags),
        "replace-all" => cmd_replace_all(&flags),
        "compare" => cmd_compare(&flags),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(Error::InvalidParam(format!("unknown command '{other}'")))
        }
    }
}

// ---------------------------------------------------------------------------
// Flag parsing
// ---------------------------------------------------------------------------

struct Flags {
    values: BTreeMap<String, String>,
    raw: String,
}

const BOOL_FLAGS: &[&str] = &["--quantized", "--no-finetune", "--verify-checksums"];

impl Flags {
    fn parse(args: &[String]) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let key = &args[i];
            if !key.starts_with("--") {
                return Err(Error::InvalidParam(format!(
                    "unexpected argument '{key}' (flags start with --)"
                )));
            }
            if BOOL_FLAGS.contains(&key.as_str()) {
                values.insert(key.clone(), "true".into());
                i += 1;
                continue;
            }
            let Some(val) = args.get(i + 1) else {
                return Err(Error::InvalidParam(format!("flag {key} needs a value")));
            };
            values.insert(key.clone(), val.clone());
            i += 2;
        }
        Ok(Flags {
            values,
            raw: args.join(" "),
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    fn bool(&self, key: &str) -> bool {
        self.get(key) == Some("true")
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidParam(format!("{key}: '{v}' is not a count"))),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidParam(format!("{key}: '{v}' is not an integer"))),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidParam(format!("{key}: '{v}' is not a number"))),
        }
    }

    fn usize_list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::InvalidParam(format!("{key}: '{s}' is not a count")))
                })
                .collect(),
        }
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::InvalidParam(format!("missing required flag {key}")))
    }

    fn data_dir(&self) -> PathBuf {
        if let Some(d) = self.get("--data-dir") {
            return PathBuf::from(d);
        }
        if let Ok(d) = std::env::var(DATA_DIR_ENV) {
            if !d.is_empty() {
                return PathBuf::from(d);
            }
        }
        PathBuf::from("data/mnist")
    }

    fn fit_config(&self, objective: Objective) -> Result<FitConfig> {
        Ok(FitConfig {
            lambda: self.f64_or("--lambda", 1.0)?,
            objective,
            nonlinearity: Activation::Identity,
            opt_steps: self.usize_or("--opt-steps", 300)?,
            learn_rate: self.f64_or("--fit-lr", 0.05)?,
            encoder: match self.str_or("--encoder", "tree").as_str() {
                "tree" => crate::table::EncoderKind::Tree,
                "pq" => crate::table::EncoderKind::Pq,
                other => {
                    return Err(Error::InvalidParam(format!(
                        "--encoder: '{other}' (expected tree or pq)"
                    )))
                }
            },
            fit_samples: self.usize_or("--fit-samples", 10_000)?,
        })
    }
}

fn parse_objective(s: &str) -> Result<Objective> {
    match s {
        "baseline" => Ok(Objective::Baseline),
        "mse" => Ok(Objective::Mse),
        "kld" => Ok(Objective::Kld),
        other => Err(Error::InvalidParam(format!(
            "unknown objective '{other}' (expected baseline, mse or kld)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// Resolve `name` in `dir`, accepting a `.gz` twin.
fn resolve(dir: &Path, name: &str) -> PathBuf {
    let plain = dir.join(name);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{name}.gz"))
    }
}

fn load_dataset(flags: &Flags) -> Result<(LabeledDataset, LabeledDataset)> {
    let dir = flags.data_dir();
    if flags.bool("--verify-checksums") {
        verify_checksums(&dir, &dir.join("checksums.sha256"))?;
    }
    match flags.str_or("--dataset", "mnist").as_str() {
        "mnist" => {
            let train = load_mnist(
                &resolve(&dir, "train-images-idx3-ubyte"),
                &resolve(&dir, "train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist(
                &resolve(&dir, "t10k-images-idx3-ubyte"),
                &resolve(&dir, "t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, test))
        }
        "cifar10" => {
            let batches: Vec<PathBuf> = (1..=5)
                .map(|i| resolve(&dir, &format!("data_batch_{i}.bin")))
                .collect();
            let train = load_cifar10(&batches)?;
            let test = load_cifar10(&[resolve(&dir, "test_batch.bin")])?;
            Ok((train, test))
        }
        other => Err(Error::InvalidParam(format!(
            "unknown dataset '{other}' (expected mnist or cifar10)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_train(flags: &Flags) -> Result<()> {
    let (train_set, test_set) = load_dataset(flags)?;
    let arch: Vec<usize> = flags
        .str_or("--arch", "784,30,30,30,10")
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidParam(format!("--arch: '{s}' is not a width")))
        })
        .collect::<Result<_>>()?;
    if arch.first() != Some(&train_set.features.cols()) {
        return Err(Error::InvalidParam(format!(
            "--arch input width {} does not match dataset dimension {}",
            arch.first().copied().unwrap_or(0),
            train_set.features.cols()
        )));
    }
    if arch.last() != Some(&(train_set.num_classes as usize)) {
        return Err(Error::InvalidParam(format!(
            "--arch output width {} does not match {} classes",
            arch.last().copied().unwrap_or(0),
            train_set.num_classes
        )));
    }
    let cfg = TrainConfig {
        epochs: flags.usize_or("--epochs", 20)?,
        batch_size: flags.usize_or("--batch", 64)?,
        learn_rate: flags.f64_or("--lr", 0.1)?,
        seed: flags.u64_or("--seed", 7)?,
    };
    let model = MlpModel::new_mlp(&arch, cfg.seed)?;
    println!(
        "training {} on {} rows (seed {}, {} epochs)",
        arch.iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("-"),
        train_set.len(),
        cfg.seed,
        cfg.epochs
    );
    let run = train(model, &train_set, &cfg)?;
    let mut model = run.model;
    model.meta = cfg;
    for (e, loss) in run.epoch_loss.iter().enumerate() {
        println!("  epoch {:>2}: train loss {loss:.4}", e + 1);
    }
    let train_acc = model.accuracy(&train_set)?;
    let test_acc = model.accuracy(&test_set)?;
    let out = PathBuf::from(flags.str_or("--out", "model.itlm"));
    save_model(&out, &model)?;
    println!(
        "train accuracy {:.2}%  test accuracy {:.2}%  -> {}",
        train_acc * 100.0,
        test_acc * 100.0,
        out.display()
    );
    Ok(())
}

/// Thread-pool helper: run the cells in a deterministic order regardless of
/// job count.
fn run_cells<T: Sync, F: Fn(&T) -> Result<Vec<ExperimentRow>> + Sync>(
    cells: &[T],
    jobs: usize,
    f: F,
) -> Result<Vec<ExperimentRow>> {
    let results: Result<Vec<Vec<ExperimentRow>>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidParam(format!("--jobs: {e}")))?;
        pool.install(|| cells.par_iter().map(&f).collect())
    } else {
        cells.iter().map(&f).collect()
    };
    Ok(results?.into_iter().flatten().collect())
}

/// Layer shape for the cost model: inner dimension and outputs.
fn layer_shape(model: &MlpModel, l: usize) -> (usize, usize) {
    (model.layers[l].input_dims(), model.layers[l].output_dims())
}

fn breakeven_for(model: &MlpModel, l: usize, c: usize, ratio: f64) -> Result<f64> {
    let (d, m) = layer_shape(model, l);
    Ok(lac_cost_model(d, m, c, ratio)?.breakeven_c)
}

fn cmd_ablate(flags: &Flags) -> Result<()> {
    let model = load_model(Path::new(flags.required("--model")?))?;
    let (train_set, test_set) = load_dataset(flags)?;
    let codebook_list = flags.usize_list_or("--codebooks", &[1, 2, 4, 8, 16])?;
    let strategy = PartitionStrategy::parse(&flags.str_or("--partition", "r2"))?;
    let objective = parse_objective(&flags.str_or("--objective", "kld"))?;
    let cfg = flags.fit_config(objective)?;
    let seed = flags.u64_or("--seed", model.meta.seed)?;
    let ratio = flags.f64_or("--mac-lac-ratio", 1.0)?;
    let quantized = flags.bool("--quantized");
    let jobs = flags.usize_or("--jobs", 1)?;
    let exact_acc = model.accuracy(&test_set)?;

    // One seeded fit sample shared by every cell; each cell re-derives its
    // own fit randomness from (layer, c).
    let fit_features = sample_features(&train_set, cfg.fit_samples, seed);
    let mut cfg_cell = cfg;
    cfg_cell.fit_samples = 0;

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for l in 0..model.num_layers() {
        for &c in &codebook_list {
            cells.push((l, c));
        }
    }
    let rows = run_cells(&cells, jobs, |&(l, c)| {
        let c_eff = c.min(model.layers[l].input_dims());
        let mut rng = Rng::new(seed).derive(cell_tag("ablate", l, c_eff, 0, 0));
        let mut replaced = replace_layer(
            &model,
            l,
            &fit_features,
            c_eff,
            strategy,
            &cfg_cell,
            &mut rng,
        )?;
        if quantized {
            quantize_model(&mut replaced);
        }
        let acc = replaced.accuracy_with(&test_set, quantized)?;
        Ok(vec![ExperimentRow {
            experiment: "ablate".into(),
            layer: l.to_string(),
            codebooks: c_eff,
            partition: strategy.name().into(),
            objective: objective.name().into(),
            accuracy: acc * 100.0,
            relative_accuracy: acc / exact_acc,
            ratio,
            breakeven_c: breakeven_for(&model, l, c_eff, ratio)?,
        }])
    })?;
    emit(flags, "ablate", seed, rows, exact_acc)
}

fn cmd_replace_all(flags: &Flags) -> Result<()> {
    let model = load_model(Path::new(flags.required("--model")?))?;
    let (train_set, test_set) = load_dataset(flags)?;
    let codebook_list = flags.usize_list_or("--codebooks", &[1, 2, 4, 8, 16])?;
    let strategy = PartitionStrategy::parse(&flags.str_or("--partition", "r2"))?;
    let objective = parse_objective(&flags.str_or("--objective", "kld"))?;
    let cfg = flags.fit_config(objective)?;
    let seed = flags.u64_or("--seed", model.meta.seed)?;
    let ratio = flags.f64_or("--mac-lac-ratio", 1.0)?;
    let quantized = flags.bool("--quantized");
    let finetune = !flags.bool("--no-finetune");
    let jobs = flags.usize_or("--jobs", 1)?;
    let ft_cfg = TrainConfig {
        epochs: flags.usize_or("--ft-epochs", 5)?,
        batch_size: flags.usize_or("--batch", 64)?,
        learn_rate: flags.f64_or("--ft-lr", 0.02)?,
        seed,
    };
    let exact_acc = model.accuracy(&test_set)?;
    // Network-level breakeven: the tightest layer constraint.
    let min_breakeven = |c: usize| -> Result<f64> {
        let mut be = f64::INFINITY;
        for l in 0..model.num_layers() {
            be = be.min(breakeven_for(&model, l, c, ratio)?);
        }
        Ok(be)
    };

    let rows = run_cells(&codebook_list, jobs, |&c| {
        let (mut converted, trajectory) = incremental_replace_all(
            &model,
            &train_set,
            c,
            strategy,
            &cfg,
            &ft_cfg,
            finetune,
            Some(&test_set),
        )?;
        let mut rows = Vec::new();
        for (l, &acc) in trajectory.iter().enumerate() {
            rows.push(ExperimentRow {
                experiment: "replace_all_step".into(),
                layer: l.to_string(),
                codebooks: c,
                partition: strategy.name().into(),
                objective: objective.name().into(),
                accuracy: acc * 100.0,
                relative_accuracy: acc / exact_acc,
                ratio,
                breakeven_c: breakeven_for(&model, l, c, ratio)?,
            });
        }
        let final_acc = if quantized {
            quantize_model(&mut converted);
            converted.accuracy_with(&test_set, true)?
        } else {
            *trajectory.last().unwrap()
        };
        rows.push(ExperimentRow {
            experiment: "replace_all".into(),
            layer: "all".into(),
            codebooks: c,
            partition: strategy.name().into(),
            objective: objective.name().into(),
            accuracy: final_acc * 100.0,
            relative_accuracy: final_acc / exact_acc,
            ratio,
            breakeven_c: min_breakeven(c)?,
        });
        Ok(rows)
    })?;
    emit(flags, "replace-all", seed, rows, exact_acc)
}

fn cmd_compare(flags: &Flags) -> Result<()> {
    let model = load_model(Path::new(flags.required("--model")?))?;
    let (train_set, test_set) = load_dataset(flags)?;
    let codebook_list = flags.usize_list_or("--codebooks", &[2, 4, 8])?;
    let partitions: Vec<PartitionStrategy> = flags
        .str_or("--partitions", "naive,opq,r2")
        .split(',')
        .map(|s| PartitionStrategy::parse(s.trim()))
        .collect::<Result<_>>()?;
    let objectives: Vec<Objective> = flags
        .str_or("--objectives", "baseline,mse,kld")
        .split(',')
        .map(|s| parse_objective(s.trim()))
        .collect::<Result<_>>()?;
    let cfg = flags.fit_config(Objective::Kld)?;
    let seed = flags.u64_or("--seed", model.meta.seed)?;
    let ratio = flags.f64_or("--mac-lac-ratio", 1.0)?;
    let quantized = flags.bool("--quantized");
    let jobs = flags.usize_or("--jobs", 1)?;
    let exact_acc = model.accuracy(&test_set)?;
    let last = model.num_layers() - 1;

    let fit_features = sample_features(&train_set, cfg.fit_samples, seed);
    let mut cfg_cell = cfg;
    cfg_cell.fit_samples = 0;

    let mut cells = Vec::new();
    for (oi, &objective) in objectives.iter().enumerate() {
        for (pi, &strategy) in partitions.iter().enumerate() {
            for &c in &codebook_list {
                cells.push((oi, pi, objective, strategy, c));
            }
        }
    }
    let rows = run_cells(&cells, jobs, |&(oi, pi, objective, strategy, c)| {
        let c_eff = c.min(model.layers[last].input_dims());
        let mut cell_cfg = cfg_cell;
        cell_cfg.objective = objective;
        let mut rng = Rng::new(seed).derive(cell_tag("compare", last, c_eff, oi, pi));
        let mut replaced = replace_layer(
            &model,
            last,
            &fit_features,
            c_eff,
            strategy,
            &cell_cfg,
            &mut rng,
        )?;
        if quantized {
            quantize_model(&mut replaced);
        }
        let acc = replaced.accuracy_with(&test_set, quantized)?;
        Ok(vec![ExperimentRow {
            experiment: "compare".into(),
            layer: last.to_string(),
            codebooks: c_eff,
            partition: strategy.name().into(),
            objective: objective.name().into(),
            accuracy: acc * 100.0,
            relative_accuracy: acc / exact_acc,
            ratio,
            breakeven_c: breakeven_for(&model, last, c_eff, ratio)?,
        }])
    })?;
    emit(flags, "compare", seed, rows, exact_acc)
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Deterministic per-cell stream tag.
fn cell_tag(kind: &str, layer: usize, c: usize, oi: usize, pi: usize) -> u64 {
    let kind_bits = kind.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    (kind_bits << 32) ^ ((layer as u64) << 20) ^ ((c as u64) << 8) ^ ((oi as u64) << 4) ^ pi as u64
}

/// Seeded row sample of the training features used for fitting.
fn sample_features(data: &LabeledDataset, cap: usize, seed: u64) -> crate::linalg::Matrix {
    if cap == 0 || data.len() <= cap {
        return data.features.clone();
    }
    let mut rng = Rng::new(seed).derive(0xf17_5a3);
    let mut idx = rng.sample_indices(data.len(), cap);
    idx.sort_unstable();
    data.features.select_rows(&idx)
}

/// Quantize every lookup table in the model.
pub fn quantize_model(model: &mut MlpModel) {
    for layer in &mut model.layers {
        if let crate::nn::Layer::Amm(op) = layer {
            op.table = quantize_lut(&op.table);
        }
    }
}

/// Sort rows deterministically, print the run header and table, write CSV.
fn emit(
    flags: &Flags,
    command: &str,
    seed: u64,
    mut rows: Vec<ExperimentRow>,
    exact_acc: f64,
) -> Result<()> {
    rows.sort_by(|a, b| {
        (&a.experiment, &a.layer, a.codebooks, &a.partition, &a.objective).cmp(&(
            &b.experiment,
            &b.layer,
            b.codebooks,
            &b.partition,
            &b.objective,
        ))
    });
    let mut out = String::new();
    let _ = writeln!(out, "# command={command}");
    let _ = writeln!(out, "# seed={seed}");
    let _ = writeln!(out, "# version={BUILD_VERSION}");
    let _ = writeln!(out, "# args={}", flags.raw);
    let _ = writeln!(out, "# exact_accuracy={:.4}", exact_acc * 100.0);
    let _ = writeln!(out, "{CSV_HEADER}");
    for row in &rows {
        let _ = writeln!(out, "{}", row.to_csv());
    }
    let path = PathBuf::from(flags.str_or("--out", &format!("{command}.csv")));
    std::fs::write(&path, &out)?;
    println!("exact model accuracy: {:.2}%", exact_acc * 100.0);
    println!(
        "{:<18} {:>5} {:>10} {:>9} {:>9} {:>9} {:>9} {:>11}",
        "experiment", "layer", "codebooks", "partition", "objective", "acc%", "rel", "breakeven"
    );
    for row in &rows {
        println!(
            "{:<18} {:>5} {:>10} {:>9} {:>9} {:>9.2} {:>9.4} {:>11.2}",
            row.experiment,
            row.layer,
            row.codebooks,
            row.partition,
            row.objective,
            row.accuracy,
            row.relative_accuracy,
            row.breakeven_c
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
