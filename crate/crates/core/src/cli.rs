//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 on success, 1 for
//! runtime or data errors, 2 for usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baseline::HistogramBins;
use crate::binarization::{itq_encode, itq_train, DEFAULT_BITS, DEFAULT_ITERATIONS};
use crate::error::Error;
use crate::evaluation::{
    baseline_corpus, describe_corpus, describe_keypoints, decide_matches, evaluate_corpus,
    generate_synthetic_corpus, CorpusDescriptors, EvalConfig, EvalReport, MatchRule, ShapeKind,
    SymmetryMode, SynthSpec,
};
use crate::formats::{
    format_correspondences, format_indices, format_labels, format_xyz, load_checkpoint, load_cloud,
    load_corpus, load_descriptors, load_indices, load_itq, load_training_set, save_checkpoint,
    save_codes, save_descriptors, save_itq, save_training_set, write_atomic, DescriptorRecord,
    Manifest,
};
use crate::geometry::{detect_iss_keypoints, IssParams, PatchConfig};
use crate::mining::{augment_multiresolution, build_pair_set, build_triplets, MiningConfig, TrainingSet};
use crate::model::{EncoderArch, LossConfig, LossKind, Variant};
use crate::trainer::{train, TrainConfig};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Parser, Debug)]
#[command(name = "pointdesc", version, about = "Learned local descriptors for 3D point clouds")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with exact correspondences.
    Synth(SynthArgs),
    /// Detect ISS keypoints in a cloud.
    Keypoints(KeypointArgs),
    /// Mine a training set of pairs or triplets from a manifest.
    Mine(MineArgs),
    /// Train an encoder on a mined training set.
    Train(TrainArgs),
    /// Describe keypoints of a cloud with a trained encoder.
    Describe(DescribeArgs),
    /// Match two descriptor files.
    Match(MatchArgs),
    /// Evaluate descriptors against a manifest's ground truth.
    Eval(EvalArgs),
    /// Binarize descriptor files with ITQ.
    Binarize(BinarizeArgs),
}

#[derive(Args, Debug, Clone)]
struct PatchArgs {
    /// Support radius R in model units.
    #[arg(long, default_value_t = PatchConfig::default().radius)]
    radius: f64,
    /// Points per patch N.
    #[arg(long, default_value_t = PatchConfig::default().n_points)]
    n_points: usize,
    /// Minimum angle between selected neighbours, radians.
    #[arg(long, default_value_t = PatchConfig::default().theta_min)]
    theta_min: f64,
}

impl PatchArgs {
    fn config(&self) -> CliResult<PatchConfig> {
        let p = PatchConfig {
            radius: self.radius,
            n_points: self.n_points,
            theta_min: self.theta_min,
        };
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Comma-separated shape kinds: box, cylinder, ellipsoid, composite, blob.
    #[arg(long, value_delimiter = ',', default_value = "composite")]
    kinds: Vec<String>,
    /// Instances per kind.
    #[arg(long, alias = "count", default_value_t = 2)]
    instances: usize,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    #[arg(long, default_value_t = 40)]
    keypoints: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Keep only keypoints whose frame is repeatable at this radius.
    #[arg(long)]
    stable_radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct KeypointArgs {
    #[arg(long)]
    cloud: PathBuf,
    /// Defaults to 6 × the cloud resolution.
    #[arg(long)]
    salient_radius: Option<f64>,
    /// Defaults to 4 × the cloud resolution.
    #[arg(long)]
    nms_radius: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    patch: PatchArgs,
    /// Emit triplets instead of labelled pairs.
    #[arg(long)]
    triplets: bool,
    /// Soft negatives to keep; defaults to half the positives.
    #[arg(long)]
    soft_budget: Option<usize>,
    /// Hard negatives to keep; defaults to half the positives.
    #[arg(long)]
    hard_budget: Option<usize>,
    #[arg(long, default_value_t = MiningConfig::default().soft_threshold)]
    soft_threshold: f64,
    #[arg(long, default_value_t = MiningConfig::default().nndr_ratio)]
    nndr: f64,
    /// Ordered model pairs sampled for cross-model hard negatives.
    #[arg(long)]
    cross_pairs: Option<usize>,
    /// Add subsampled copies of every model at these fractions.
    #[arg(long, value_delimiter = ',')]
    fraction: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// mmcl, contrastive, hinge or triplet.
    #[arg(long, default_value = "mmcl")]
    loss: String,
    #[arg(long, default_value_t = LossConfig::default().m)]
    m: f64,
    #[arg(long, default_value_t = LossConfig::default().m1)]
    m1: f64,
    #[arg(long, default_value_t = LossConfig::default().m2)]
    m2: f64,
    /// Hinge bias.
    #[arg(long, default_value_t = LossConfig::default().b)]
    b: f64,
    /// Weight decay.
    #[arg(long, default_value_t = LossConfig::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    /// Per-point MLP widths starting at 3.
    #[arg(long, value_delimiter = ',', default_values_t = EncoderArch::default().point_mlp_dims)]
    point_dims: Vec<usize>,
    /// Head widths starting at the pooled width and ending at D.
    #[arg(long, value_delimiter = ',', default_values_t = EncoderArch::default().head_dims)]
    head_dims: Vec<usize>,
    /// Store the aggregated variant tag instead of the patch siamese one.
    #[arg(long)]
    aggregated: bool,
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    keypoints: PathBuf,
    #[command(flatten)]
    patch: PatchArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Accept matches under this distance ratio instead of mutual nearest
    /// neighbours.
    #[arg(long)]
    nndr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Describe every model with this checkpoint.
    #[arg(long, conflicts_with_all = ["descriptors", "baseline"])]
    checkpoint: Option<PathBuf>,
    /// One descriptor file per manifest cloud, in manifest order.
    #[arg(long, num_args = 1.., conflicts_with = "baseline")]
    descriptors: Vec<PathBuf>,
    /// Evaluate the histogram baseline at --radius.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    patch: PatchArgs,
    #[arg(long, default_value_t = EvalConfig::default().k)]
    k: usize,
    #[arg(long, default_value_t = EvalConfig::default().tau)]
    tau: f64,
    /// Decide matches by distance ratio instead of mutual nearest neighbours.
    #[arg(long)]
    nndr: Option<f64>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BinarizeArgs {
    /// Descriptor files; codes for all of them train one model.
    #[arg(long, num_args = 1.., required = true)]
    descriptors: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BITS)]
    bits: usize,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    /// Encode with an existing model instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Runs the command line and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let res = match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::Keypoints(a) => keypoints(a),
        Command::Mine(a) => mine(a),
        Command::Train(a) => train_cmd(a),
        Command::Describe(a) => describe(a),
        Command::Match(a) => match_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Binarize(a) => binarize(a),
    };
    match res {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(Error::io(dir, e)))
}

fn synth(a: SynthArgs) -> CliResult {
    let kinds = a
        .kinds
        .iter()
        .map(|k| k.parse::<ShapeKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = SynthSpec {
        kinds,
        instances: a.instances,
        points: a.points,
        keypoints: a.keypoints,
        noise: a.noise,
        stable_radius: a.stable_radius,
        seed: a.seed,
    };
    let sc = generate_synthetic_corpus(&spec).map_err(|e| match e {
        Error::InvalidInput(m) => CliError::Usage(m),
        e => CliError::Runtime(e),
    })?;
    create_dir(&a.out_dir)?;
    let dir = &a.out_dir;
    let mut manifest = Manifest::default();
    for (i, m) in sc.corpus.models.iter().enumerate() {
        let stem = format!("model_{i:03}");
        let files = [
            (format!("{stem}.xyz"), format_xyz(&m.cloud)),
            (format!("{stem}.kp"), format_indices(&m.keypoints)),
            (format!("{stem}.labels"), format_labels(&m.part_labels)),
        ];
        for (name, body) in &files {
            write_atomic(&dir.join(name), body.as_bytes())?;
        }
        manifest.clouds.push(dir.join(&files[0].0));
        manifest.keypoints.push(dir.join(&files[1].0));
        manifest.labels.push(dir.join(&files[2].0));
    }
    for set in &sc.corpus.correspondences {
        let path = dir.join(format!("corr_{:03}_{:03}.txt", set.model_a, set.model_b));
        write_atomic(&path, format_correspondences(set).as_bytes())?;
        manifest.correspondences.push(path);
    }
    write_atomic(&dir.join("manifest.txt"), manifest.format(dir).as_bytes())?;
    println!(
        "{} clouds, {} correspondence files, {} keypoints per cloud",
        sc.corpus.models.len(),
        sc.corpus.correspondences.len(),
        a.keypoints
    );
    Ok(())
}

fn keypoints(a: KeypointArgs) -> CliResult {
    let cloud = load_cloud(&a.cloud)?;
    let mut params = IssParams::for_cloud(&cloud)?;
    if let Some(r) = a.salient_radius {
        params.salient_radius = r;
    }
    if let Some(r) = a.nms_radius {
        params.nms_radius = r;
    }
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let kps = detect_iss_keypoints(&cloud, &params)?;
    write_atomic(&a.out, format_indices(&kps).as_bytes())?;
    println!("{} keypoints", kps.len());
    Ok(())
}

fn mine(a: MineArgs) -> CliResult {
    let mut corpus = load_corpus(&a.manifest)?;
    if !a.fraction.is_empty() {
        corpus = augment_multiresolution(&corpus, &a.fraction, a.seed)?;
    }
    let cfg = MiningConfig {
        patch: a.patch.config()?,
        soft_threshold: a.soft_threshold,
        nndr_ratio: a.nndr,
        soft_budget: a.soft_budget,
        hard_budget: a.hard_budget,
        cross_model_pairs: a.cross_pairs,
        bins: HistogramBins::default(),
        normal_k: MiningConfig::default().normal_k,
        seed: a.seed,
    };
    let set = if a.triplets {
        TrainingSet::Triplets(build_triplets(&corpus, &cfg)?)
    } else {
        TrainingSet::Pairs(build_pair_set(&corpus, &cfg)?)
    };
    save_training_set(&a.out, &set)?;
    let (p, s, h) = set.counts();
    if a.triplets {
        println!("triplets {p}");
    } else {
        println!("positives {p} soft {s} hard {h}");
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let kind: LossKind = a.loss.parse()?;
    let data = load_training_set(&a.dataset)?;
    match (&data, kind.uses_triplets()) {
        (TrainingSet::Pairs(_), true) => return usage(format!("--loss {} needs a triplet dataset", kind.name())),
        (TrainingSet::Triplets(_), false) => return usage(format!("--loss {} needs a pair dataset", kind.name())),
        _ => {}
    }
    let variant = if a.aggregated {
        Variant::Aggregated
    } else {
        Variant::PatchSiamese
    };
    let arch = EncoderArch::new(a.point_dims, a.head_dims, variant).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        loss: LossConfig {
            kind,
            m: a.m,
            m1: a.m1,
            m2: a.m2,
            b: a.b,
            lambda: a.lambda,
        },
        arch,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        seed: a.seed,
        shuffle: !a.no_shuffle,
    };
    let report = train(&data, &cfg)?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3} loss {l:.6}", e + 1);
    }
    save_checkpoint(&a.out, &report.params)?;
    Ok(())
}

fn describe(a: DescribeArgs) -> CliResult {
    let params = load_checkpoint(&a.checkpoint)?;
    let cloud = load_cloud(&a.cloud)?;
    let kps = load_indices(&a.keypoints)?;
    let patch = a.patch.config()?;
    let d = describe_keypoints(&params, &cloud, &kps, &patch)?;
    for k in &d.failed {
        eprintln!("keypoint {k}: no patch, skipped");
    }
    let file = DescriptorRecord {
        dim: params.arch.descriptor_dim(),
        records: d.described.into_iter().map(|(k, d)| (k, d.0)).collect(),
    };
    save_descriptors(&a.out, &file)?;
    println!("{} descriptors, {} skipped", file.records.len(), d.failed.len());
    Ok(())
}

fn match_rule(nndr: Option<f64>) -> MatchRule {
    nndr.map_or(MatchRule::MutualNearest, MatchRule::Nndr)
}

fn match_cmd(a: MatchArgs) -> CliResult {
    let q = load_descriptors(&a.query)?;
    let t = load_descriptors(&a.target)?;
    if q.dim != t.dim {
        return usage(format!("descriptor dimensions {} and {} differ", q.dim, t.dim));
    }
    let qv: Vec<&[f64]> = q.records.iter().map(|r| r.1.as_slice()).collect();
    let tv: Vec<&[f64]> = t.records.iter().map(|r| r.1.as_slice()).collect();
    let rule = match_rule(a.nndr);
    EvalConfig {
        match_rule: rule,
        ..EvalConfig::default()
    }
    .validate()?;
    let matches = decide_matches(&qv, &tv, rule)?;
    let mut out = String::new();
    for (qi, ti) in &matches {
        let d = crate::baseline::euclidean(qv[*qi], tv[*ti]);
        let _ = writeln!(out, "{} {} {d}", q.records[*qi].0, t.records[*ti].0);
    }
    write_atomic(&a.out, out.as_bytes())?;
    println!("{} matches", matches.len());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let corpus = load_corpus(&a.manifest)?;
    if corpus.correspondences.iter().all(|s| s.pairs.is_empty()) {
        return usage(format!("{} lists no ground-truth correspondences", a.manifest.display()));
    }
    let descs: CorpusDescriptors = if let Some(c) = &a.checkpoint {
        describe_corpus(&load_checkpoint(c)?, &corpus, &a.patch.config()?)?
    } else if a.baseline {
        baseline_corpus(&corpus, a.patch.config()?.radius, HistogramBins::default(), MiningConfig::default().normal_k)?
    } else if !a.descriptors.is_empty() {
        if a.descriptors.len() != corpus.models.len() {
            return usage(format!(
                "{} descriptor files for {} clouds",
                a.descriptors.len(),
                corpus.models.len()
            ));
        }
        a.descriptors
            .iter()
            .map(|p| load_descriptors(p).map(|f| f.records))
            .collect::<Result<_, _>>()?
    } else {
        return usage("one of --checkpoint, --descriptors or --baseline is required");
    };
    let base = EvalConfig {
        k: a.k,
        tau: a.tau,
        match_rule: match_rule(a.nndr),
        symmetry: SymmetryMode::NonSymmetric,
    };
    base.validate()?;
    let ns = evaluate_corpus(&corpus, &descs, &base)?;
    let sym = evaluate_corpus(
        &corpus,
        &descs,
        &EvalConfig {
            symmetry: SymmetryMode::Symmetric,
            ..base
        },
    )?;
    print!("{}", report_table(&ns, &sym, a.k));
    if let Some(p) = &a.csv {
        write_atomic(p, report_csv(&ns, &sym).as_bytes())?;
    }
    Ok(())
}

fn report_table(ns: &EvalReport, sym: &EvalReport, k: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<22}{:>14}{:>14}", "metric", "non-symmetric", "symmetric");
    let mut row = |name: String, a: f64, b: f64| {
        let _ = writeln!(s, "{name:<22}{a:>14.4}{b:>14.4}");
    };
    row("precision".into(), ns.precision, sym.precision);
    row("recall".into(), ns.recall, sym.recall);
    for r in [1, 10, k] {
        if r <= k {
            row(format!("cmc@{r}"), ns.cmc_at(r), sym.cmc_at(r));
        }
    }
    row("correspondence acc".into(), ns.corr_accuracy, sym.corr_accuracy);
    if ns.no_matches {
        let _ = writeln!(s, "no matches were decided; precision reported as 0");
    }
    s
}

/// `rank,cmc_nonsym,cmc_sym` for ranks `1..=k`, then one summary row
/// `summary,precision,recall,accuracy` per mode, non-symmetric first.
fn report_csv(ns: &EvalReport, sym: &EvalReport) -> String {
    let mut s = String::new();
    for (r, (a, b)) in ns.cmc.iter().zip(&sym.cmc).enumerate() {
        let _ = writeln!(s, "{},{a},{b}", r + 1);
    }
    let _ = writeln!(
        s,
        "summary,{},{},{},{},{},{}",
        ns.precision, ns.recall, ns.corr_accuracy, sym.precision, sym.recall, sym.corr_accuracy
    );
    s
}

fn binarize(a: BinarizeArgs) -> CliResult {
    let files = a
        .descriptors
        .iter()
        .map(|p| load_descriptors(p))
        .collect::<Result<Vec<_>, _>>()?;
    let model = match &a.model {
        Some(p) => load_itq(p)?,
        None => {
            let all: Vec<Vec<f64>> = files.iter().flat_map(|f| f.records.iter().map(|r| r.1.clone())).collect();
            if all.len() <= a.bits {
                return Err(CliError::Runtime(Error::InvalidInput(format!(
                    "{} descriptors, need more than --bits {}",
                    all.len(),
                    a.bits
                ))));
            }
            itq_train(&all, a.bits, a.iters, a.seed)?
        }
    };
    create_dir(&a.out_dir)?;
    if a.model.is_none() {
        save_itq(&a.out_dir.join("itq.dp3q"), &model)?;
    }
    for (p, f) in a.descriptors.iter().zip(&files) {
        let codes = f
            .records
            .iter()
            .map(|r| itq_encode(&model, &r.1))
            .collect::<Result<Vec<_>, _>>()?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        save_codes(&a.out_dir.join(format!("{stem}.dp3b")), model.bits, &codes)?;
    }
    println!("{} files encoded to {} bits", files.len(), model.bits);
    Ok(())
}
