//! Command-line front end: named presets for every reference experiment,
//! JSON config files with flag overrides, CSV/manifest emission, the sign
//! probability sweep, and a fast self-check battery.

use crate::data::{self, Dataset};
use crate::init::InitKind;
use crate::layers::{NetworkSpec, Network};
use crate::masking::Mode;
use crate::oracle;
use crate::tensor::Tensor;
use crate::train::{
    self, DatasetKind, TrainConfig, TrainError, TrainMode, TrainOutput,
};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Exit 2: the invocation itself was wrong (bad flags, bad config, missing
/// data). Exit 1: the invocation was fine but the work failed (a check in
/// `verify`, an I/O error mid-run).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::BadConfig(_)
            | TrainError::DatasetMismatch { .. }
            | TrainError::Net(_)
            | TrainError::Init(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> CliError {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Failure(e.to_string())
    }
}

// --- presets ---------------------------------------------------------------

pub const PRESET_NETWORKS: [(&str, DatasetKind); 4] = [
    ("lenet", DatasetKind::Mnist),
    ("conv2", DatasetKind::Cifar10),
    ("conv4", DatasetKind::Cifar10),
    ("conv6", DatasetKind::Cifar10),
];

const PRESET_MODES: [(&str, TrainMode); 5] = [
    ("baseline", TrainMode::Baseline),
    ("free-prune", TrainMode::FreePrune),
    ("minimal-prune", TrainMode::MinimalPrune),
    ("free-flip", TrainMode::FreeFlip),
    ("minimal-flip", TrainMode::MinimalFlip),
];

/// All preset names, `{network}-{dataset}-{mode}`.
pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for (net, ds) in PRESET_NETWORKS {
        for (mode, _) in PRESET_MODES {
            names.push(format!("{net}-{}-{mode}", ds.as_str()));
        }
    }
    names
}

/// How far the CIFAR presets are cut down when `--full` is absent: a fixed
/// 10,000-image training subset, 20 epochs, 3 runs. The full table budget
/// (whole training set, 60 epochs, 5 runs) is multi-hour on a CPU.
pub const REDUCED_SUBSET: usize = 10_000;
pub const REDUCED_EPOCHS: usize = 20;
pub const REDUCED_RUNS: usize = 3;

/// Resolves a preset name to its reference-table configuration. CIFAR
/// presets come back in the reduced regime unless `full` is set.
pub fn preset_config(name: &str, full: bool) -> Result<TrainConfig, CliError> {
    for (net, ds) in PRESET_NETWORKS {
        for (mode_name, mode) in PRESET_MODES {
            if name != format!("{net}-{}-{mode_name}", ds.as_str()) {
                continue;
            }
            let mut cfg = TrainConfig::defaults(net, mode)?;
            if ds == DatasetKind::Cifar10 && !full {
                cfg.train_subset = Some(REDUCED_SUBSET);
                cfg.epochs = REDUCED_EPOCHS;
                cfg.runs = REDUCED_RUNS;
            }
            return Ok(cfg);
        }
    }
    Err(CliError::Usage(format!(
        "unknown preset '{name}' (expected one of: {})",
        preset_names().join(", ")
    )))
}

// --- config files ------------------------------------------------------------

/// JSON experiment file. Every field is optional; whatever is present
/// overrides the preset (if any), and command-line flags override both.
/// Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub mode: Option<TrainMode>,
    pub network: Option<String>,
    pub dataset: Option<DatasetKind>,
    pub init_kind: Option<InitKind>,
    pub sign_prob_p: Option<f64>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub runs: Option<usize>,
    pub train_subset: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        ConfigFile::parse(&text)
    }

    fn overlay(&self, cfg: &mut TrainConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(n) = &self.network {
            cfg.network = n.clone();
        }
        if let Some(d) = self.dataset {
            cfg.dataset = d;
        }
        if let Some(k) = self.init_kind {
            cfg.init.kind = k;
        }
        if let Some(p) = self.sign_prob_p {
            cfg.init.sign_prob_p = p;
        }
        if let Some(s) = self.seed {
            cfg.init.seed = s;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(r) = self.runs {
            cfg.runs = r;
        }
        if let Some(t) = self.train_subset {
            cfg.train_subset = Some(t);
        }
        if let Some(c) = self.checkpoint_every {
            cfg.checkpoint_every = c;
        }
    }
}

// --- manifest ------------------------------------------------------------------

/// Record of what an invocation ran: one entry per experiment, written next
/// to the CSVs so a result directory is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tag: String,
    pub base_seed: u64,
    pub experiments: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub config: TrainConfig,
    pub out_dir: String,
}

impl ExperimentManifest {
    pub fn validate(&self) -> Result<(), CliError> {
        for (i, a) in self.experiments.iter().enumerate() {
            for b in &self.experiments[i + 1..] {
                if a.out_dir == b.out_dir {
                    return Err(CliError::Usage(format!(
                        "duplicate output directory '{}' in manifest",
                        a.out_dir
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<ExperimentManifest, CliError> {
        let m: ExperimentManifest = serde_json::from_str(text)
            .map_err(|e| CliError::Usage(format!("bad manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        self.validate()?;
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

// --- argument plumbing -----------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "conntrain",
    about = "Train the connectivity of fixed random weights"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one experiment and write its metrics CSVs.
    Run(RunArgs),
    /// Rerun one experiment per sign probability p and tabulate the results.
    SweepP(SweepArgs),
    /// Fast self-check battery (oracles plus dataset sanity), under a minute.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Default)]
struct SelectArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named reference experiment, e.g. lenet-mnist-free-prune.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed; run r trains with seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run CIFAR presets at the full table budget instead of the reduced
    /// regime (whole training set, 60 epochs, 5 runs; multi-hour on CPU).
    #[arg(long)]
    full: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    select: SelectArgs,
    /// Output directory for CSVs, checkpoints, and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset root holding mnist/ and cifar10/.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    select: SelectArgs,
    /// Sign probabilities to sweep.
    #[arg(long = "p", value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7, 1.0])]
    p_values: Vec<f64>,
    #[arg(long, default_value = "out/sweep_p")]
    out: PathBuf,
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Dataset root; dataset checks are skipped when it is absent.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

/// Flags override the config file, which overrides the preset. A bare
/// config (no preset anywhere) must name a network and a mode; everything
/// else falls back to the reference-table defaults for that pair.
pub fn resolve_config(
    config_path: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    runs: Option<usize>,
    epochs: Option<usize>,
    full: bool,
) -> Result<TrainConfig, CliError> {
    let file = match config_path {
        Some(p) => Some(ConfigFile::load(p)?),
        None => None,
    };
    let preset_name = preset
        .map(str::to_string)
        .or_else(|| file.as_ref().and_then(|f| f.preset.clone()));
    let mut cfg = match &preset_name {
        Some(name) => preset_config(name, full)?,
        None => {
            let f = file.as_ref().ok_or_else(|| {
                CliError::Usage("need --preset or --config".to_string())
            })?;
            let network = f.network.as_deref().ok_or_else(|| {
                CliError::Usage("config without a preset must set \"network\"".to_string())
            })?;
            let mode = f.mode.ok_or_else(|| {
                CliError::Usage("config without a preset must set \"mode\"".to_string())
            })?;
            TrainConfig::defaults(network, mode)?
        }
    };
    if let Some(f) = &file {
        f.overlay(&mut cfg);
    }
    if let Some(s) = seed {
        cfg.init.seed = s;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_select(s: &SelectArgs) -> Result<TrainConfig, CliError> {
    resolve_config(
        s.config.as_deref(),
        s.preset.as_deref(),
        s.seed,
        s.runs,
        s.epochs,
        s.full,
    )
}

/// Loads the dataset a config asks for from `root/{mnist,cifar10}`.
pub fn load_dataset(root: &Path, kind: DatasetKind) -> Result<Dataset, CliError> {
    let dir = root.join(kind.as_str());
    if !dir.is_dir() {
        return Err(CliError::Usage(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    Ok(match kind {
        DatasetKind::Mnist => data::load_mnist(&dir)?,
        DatasetKind::Cifar10 => data::load_cifar10(&dir)?,
    })
}

// --- commands ---------------------------------------------------------------------

fn summary_line(out: &TrainOutput) -> String {
    let (epoch, acc) = train::best_mean_accuracy(&out.aggregate);
    format!(
        "summary: best_mean_accuracy={acc} at_epoch={epoch} final_changed_fraction={}",
        train::final_mean_changed_fraction(&out.runs)
    )
}

/// Trains one config and writes per-run CSVs, aggregate CSVs, and the
/// manifest into `out_dir`. Returns the summary line.
pub fn run_experiment(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    tag: &str,
) -> Result<(TrainOutput, String), CliError> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt_dir = (cfg.checkpoint_every > 0).then(|| out_dir.join("checkpoints"));
    let output = train::train(cfg, data, ckpt_dir.as_deref())?;
    for (i, run) in output.runs.iter().enumerate() {
        train::write_run_csv(&out_dir.join(format!("run_{i}.csv")), &run.records)?;
        println!(
            "run {i} (seed {}): final test_accuracy={}",
            run.run_seed,
            run.records.last().map_or(f64::NAN, |r| r.test_accuracy)
        );
    }
    train::write_aggregate_csvs(out_dir, &output.aggregate)?;
    ExperimentManifest {
        tag: tag.to_string(),
        base_seed: cfg.init.seed,
        experiments: vec![ManifestEntry {
            config: cfg.clone(),
            out_dir: out_dir.display().to_string(),
        }],
    }
    .save(&out_dir.join("manifest.json"))?;
    let line = summary_line(&output);
    Ok((output, line))
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_select(&args.select)?;
    let data = load_dataset(&args.data, cfg.dataset)?;
    let tag = args.select.preset.clone().unwrap_or_else(|| {
        format!("{}-{}", cfg.network, cfg.mode.as_str())
    });
    let (_, line) = run_experiment(&cfg, &data, &args.out, &tag)?;
    println!("{line}");
    Ok(())
}

fn format_p(p: f64) -> String {
    // stable directory / CSV key for a probability (two decimals is enough
    // to tell sweep points apart)
    format!("{p:.2}")
}

fn cmd_sweep_p(args: &SweepArgs) -> Result<(), CliError> {
    let base = resolve_select(&args.select)?;
    if base.init.kind != InitKind::SignedHeConstant {
        return Err(CliError::Usage(format!(
            "sweep-p needs the signed_he_constant init, config has {:?}",
            base.init.kind
        )));
    }
    for &p in &args.p_values {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(CliError::Usage(format!(
                "sign probability {p} outside [0, 1]"
            )));
        }
    }
    let data = load_dataset(&args.data, base.dataset)?;
    std::fs::create_dir_all(&args.out)?;

    let mut entries = Vec::new();
    let mut rows = String::from("p,best_accuracy,final_pruned_fraction\n");
    for &p in &args.p_values {
        let mut cfg = base.clone();
        cfg.init.sign_prob_p = p;
        cfg.validate()?;
        let sub = args.out.join(format!("p_{}", format_p(p)));
        let (output, line) = run_experiment(&cfg, &data, &sub, "sweep_p")?;
        println!("p={}: {line}", format_p(p));
        let (_, best) = train::best_mean_accuracy(&output.aggregate);
        let fraction = train::final_mean_changed_fraction(&output.runs);
        writeln!(rows, "{},{best},{fraction}", format_p(p)).expect("string write");
        entries.push(ManifestEntry {
            config: cfg,
            out_dir: sub.display().to_string(),
        });
    }
    std::fs::write(args.out.join("sweep.csv"), rows)?;
    ExperimentManifest {
        tag: "sweep_p".to_string(),
        base_seed: base.init.seed,
        experiments: entries,
    }
    .save(&args.out.join("manifest.json"))?;
    Ok(())
}

// --- verify battery --------------------------------------------------------------

fn check_ste_contract() -> Result<(), String> {
    let up = Tensor::new(vec![2, 2], vec![0.3, -1.5, 0.0, 7.25]).unwrap();
    let through = crate::masking::ste_backward(&up);
    if through.data() != up.data() {
        return Err("ste_backward is not the identity".to_string());
    }
    // one-weight network: L = (w m(t) x)^2, dL/dt must be upstream * w = 8
    let spec = NetworkSpec::dense_chain("scalar", 1, &[1]);
    let init = crate::init::InitSpec::new(InitKind::SignedHeConstant, 40);
    let mut net = Network::new(&spec, Mode::Prune, &init).map_err(|e| e.to_string())?;
    {
        let p = net.params_mut().next().unwrap();
        *p = crate::masking::MaskedParam::masked(
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            Mode::Prune,
        )
        .map_err(|e| e.to_string())?;
    }
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let (logits, cache) = net.forward_train(&x).map_err(|e| e.to_string())?;
    let grad = Tensor::new(vec![1, 1], vec![2.0 * logits.data()[0]]).unwrap();
    let got = net.backward(&cache, &grad).map_err(|e| e.to_string())?[0].data()[0];
    if got != 8.0 {
        return Err(format!("score gradient {got}, want exactly 8"));
    }
    Ok(())
}

fn check_path_sum() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for case in 0..100u64 {
        let depth = rng.gen_range(1..=3);
        let widths: Vec<usize> = (0..depth + 1).map(|_| rng.gen_range(2..=5)).collect();
        let d0 = rng.gen_range(2..=5);
        let spec = NetworkSpec::dense_chain("v", d0, &widths);
        let init = crate::init::InitSpec::new(InitKind::SignedHeConstant, 500 + case);
        let mode = [Mode::Dense, Mode::Prune, Mode::Flip][case as usize % 3];
        let net = Network::new(&spec, mode, &init).map_err(|e| e.to_string())?;
        let x: Vec<f64> = (0..d0).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let refnet = oracle::RefNet::from_network(&net);
        let (want, _) = refnet.forward(&x);
        for (out, wv) in want.iter().enumerate() {
            let got = oracle::path_sum_forward(&net, &x, out).map_err(|e| e.to_string())?;
            if (got - wv).abs() > 1e-6 {
                return Err(format!(
                    "net {case} output {out}: path sum {got} vs forward {wv}"
                ));
            }
        }
    }
    Ok(())
}

fn check_fd(conv: bool) -> Result<(), String> {
    let spec = if conv {
        NetworkSpec {
            name: "fd-conv".to_string(),
            input_shape: [2, 6, 6],
            layers: vec![
                crate::layers::LayerDesc::Conv { filters: 3 },
                crate::layers::LayerDesc::Conv { filters: 3 },
                crate::layers::LayerDesc::MaxPool,
                crate::layers::LayerDesc::Dense { units: 8 },
                crate::layers::LayerDesc::Dense { units: 10 },
            ],
        }
    } else {
        NetworkSpec::dense_chain("fd-dense", 12, &[6, 4, 10])
    };
    let init = crate::init::InitSpec::new(InitKind::GlorotNormal, 42);
    let net = Network::new(&spec, Mode::Dense, &init).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let shape = if conv { vec![4, 2, 6, 6] } else { vec![8, 1, 1, 12] };
    let n: usize = shape.iter().product();
    let images = Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
        .map_err(|e| e.to_string())?;
    let batch = images.shape()[0];
    let labels: Vec<u8> = (0..batch).map(|_| rng.gen_range(0..10)).collect();
    let n_layers = net.params().count();
    for layer in 0..n_layers {
        let n = net.params().nth(layer).unwrap().weights().len();
        let coords: Vec<usize> = (0..n).step_by((n / 12).max(1)).collect();
        let report = oracle::check_backward_against_fd(&net, &images, &labels, layer, &coords)
            .map_err(|e| e.to_string())?;
        if report.checked == 0 {
            return Err(format!("layer {layer}: every coordinate was skipped"));
        }
        if report.max_rel_err > 1e-3 {
            return Err(format!(
                "layer {layer}: finite-difference error {}",
                report.max_rel_err
            ));
        }
    }
    Ok(())
}

fn check_scaling_equivalence() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..10u64 {
        let d0 = rng.gen_range(3..=6);
        let widths: Vec<usize> = (0..3).map(|_| rng.gen_range(3..=6)).collect();
        let spec = NetworkSpec::dense_chain("sc", d0, &widths);
        let init = crate::init::InitSpec::new(InitKind::SignedHeConstant, 600 + case);
        let net = Network::new(&spec, Mode::Dense, &init).map_err(|e| e.to_string())?;
        let unit = net.to_unit_signs().map_err(|e| e.to_string())?;
        let factor = data::unit_weight_factor(&spec) as f32;
        let n = 20 * d0;
        let xs = Tensor::new(
            vec![20, 1, 1, d0],
            (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .map_err(|e| e.to_string())?;
        let scaled = xs.scale(factor);
        let want = net.forward(&xs).map_err(|e| e.to_string())?;
        let got = unit.forward(&scaled).map_err(|e| e.to_string())?;
        let classes = *want.shape().last().unwrap();
        for (row, (wi, gi)) in want
            .argmax_rows()
            .into_iter()
            .zip(got.argmax_rows())
            .enumerate()
        {
            if wi == gi {
                continue;
            }
            // disagreement is only legitimate on a numerical tie
            let r = &want.data()[row * classes..(row + 1) * classes];
            let gap = (r[wi] - r[gi]).abs() as f64;
            if gap > 1e-5 {
                return Err(format!("net {case} row {row}: argmax gap {gap}"));
            }
        }
        for (a, b) in want.data().iter().zip(got.data()) {
            let err = (a - b).abs() as f64 / (1.0 + a.abs().max(b.abs()) as f64);
            if err > 1e-4 {
                return Err(format!("net {case}: logit error {err}"));
            }
        }
    }
    Ok(())
}

fn check_mnist_counts(root: &Path) -> Option<Result<(), String>> {
    let dir = root.join("mnist");
    if !dir.is_dir() {
        return None;
    }
    Some((|| {
        let ds = data::load_mnist(&dir).map_err(|e| e.to_string())?;
        if ds.train_len() != 60_000 || ds.test_len() != 10_000 {
            return Err(format!(
                "counts {}/{}, want 60000/10000",
                ds.train_len(),
                ds.test_len()
            ));
        }
        if ds.image_shape() != [1, 28, 28] {
            return Err(format!("image shape {:?}", ds.image_shape()));
        }
        if ds.train_labels[0] != 5 {
            return Err(format!(
                "first training label {}, want 5",
                ds.train_labels[0]
            ));
        }
        Ok(())
    })())
}

fn check_cifar10_counts(root: &Path) -> Option<Result<(), String>> {
    let dir = root.join("cifar10");
    if !dir.is_dir() {
        return None;
    }
    Some((|| {
        let ds = data::load_cifar10(&dir).map_err(|e| e.to_string())?;
        if ds.train_len() != 50_000 || ds.test_len() != 10_000 {
            return Err(format!(
                "counts {}/{}, want 50000/10000",
                ds.train_len(),
                ds.test_len()
            ));
        }
        if ds.image_shape() != [3, 32, 32] {
            return Err(format!("image shape {:?}", ds.image_shape()));
        }
        Ok(())
    })())
}

/// The full battery; dataset checks are `None` (skipped) when the files are
/// not on disk.
pub fn verify_checks(data_root: &Path) -> Vec<(&'static str, Option<Result<(), String>>)> {
    vec![
        ("ste_contract", Some(check_ste_contract())),
        ("path_sum_vs_forward", Some(check_path_sum())),
        ("fd_dense_micro", Some(check_fd(false))),
        ("fd_conv_micro", Some(check_fd(true))),
        ("scaling_equivalence", Some(check_scaling_equivalence())),
        ("mnist_counts", check_mnist_counts(data_root)),
        ("cifar10_counts", check_cifar10_counts(data_root)),
    ]
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for (name, outcome) in verify_checks(&args.data) {
        match outcome {
            None => println!("check {name}: skipped (no data under {})", args.data.display()),
            Some(Ok(())) => println!("check {name}: ok"),
            Some(Err(why)) => {
                println!("check {name}: FAIL ({why})");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "{} check(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

/// Parses and executes an invocation; returns the process exit code.
pub fn run_cli<I>(args: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::SweepP(a) => cmd_sweep_p(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
