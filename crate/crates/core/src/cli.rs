//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{parse_synth, RunConfig};
use crate::dataset::{
    load_features, load_labels, save_features_bin, save_labels, synth_multimodal, Dataset, FeatureFormat, Split,
};
use crate::error::{Error, Result};
use crate::retrieval::{encode, encode_database, evaluate, ApNormalization, EvalOptions, LabelSets, PackedCodes, RetrievalReport};
use crate::simplex_opt::Momentum;
use crate::storage::{load_model, save_codes, save_model};
use crate::training::{HashModel, TrainTrace, Trainer};

const REPORT_HELP: &str = "\
Report files (per task, named <task>.csv and <task>.json):
  <task>.csv   columns task,metric,x,value
               metric is map (x = cutoff), precision_at (x = N),
               pr_precision or pr_recall (x = Hamming radius)
  <task>.json  the same numbers plus query counts
With --sweep-bits, grid.csv has columns task,<K> bits,... with MAP values.
With --reference, comparison.csv has columns task,bits,measured,reference,difference.";

#[derive(Debug, Parser)]
#[command(name = "agsfh", version, about = "Cross-modal hashing with fused anchor graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a model and write model.agsf, trace.csv and config.txt
    Train(TrainArgs),
    /// Rank database items for each query and report retrieval metrics
    #[command(after_help = REPORT_HELP)]
    Evaluate(EvaluateArgs),
    /// Write packed hash codes for one modality
    Encode(EncodeArgs),
    /// Write a synthetic dataset as feature, label and split files
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct DataArgs {
    /// key = value config file; flags given on the command line take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Feature file per modality (repeat in modality order); .csv or binary
    #[arg(long = "features")]
    pub features: Vec<PathBuf>,
    /// One line of integer labels per item
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Training, query and optional database index lines
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Synthetic data instead of files, e.g. C=4,N=2000,dims=16:24
    #[arg(long)]
    pub synth: Option<String>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct HyperArgs {
    /// Code length K [default: 32]
    #[arg(long)]
    pub bits: Option<usize>,
    /// Anchor count P [default: 900]
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Target component count C [default: 60]
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Nearest anchors per item [default: 45]
    #[arg(long)]
    pub knn: Option<usize>,
    /// Weight tying the learned graph to the fused graph [default: 0.01]
    #[arg(long)]
    pub gamma1: Option<f64>,
    /// Ridge weight on the learned graph [default: 10]
    #[arg(long)]
    pub gamma2: Option<f64>,
    /// Weight of the code-graph term [default: 0.01]
    #[arg(long)]
    pub gamma3: Option<f64>,
    /// Weight of the linear regression term [default: 300]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Outer iteration cap
    #[arg(long)]
    pub iters: Option<usize>,
    /// Per-row solver iteration cap
    #[arg(long)]
    pub ogm_iters: Option<usize>,
    /// Relative objective change that ends training (0 runs every iteration)
    #[arg(long)]
    pub tol: Option<f64>,
    /// Seed for anchor sampling and initialization [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Rescale fused rows to sum to one
    #[arg(long)]
    pub renormalize_fusion: bool,
    /// Use (1 + √(4c² + 1)) / 2 for the solver momentum
    #[arg(long)]
    pub classic_momentum: bool,
    /// Keep raw features instead of subtracting training means
    #[arg(long)]
    pub no_center: bool,
    /// Log progress and write eigenvalue and graph dumps
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Image queries against the text database (modality 0 → 1)
    I2t,
    /// Text queries against the image database (modality 1 → 0)
    T2i,
    Both,
}

impl Task {
    fn directions(self) -> Vec<(&'static str, usize, usize)> {
        let i2t = ("i2t", 0, 1);
        let t2i = ("t2i", 1, 0);
        match self {
            Task::I2t => vec![i2t],
            Task::T2i => vec![t2i],
            Task::Both => vec![i2t, t2i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MapNorm {
    /// Divide by min(#relevant, cutoff)
    Min,
    /// Divide by the relevant items inside the cutoff
    Retrieved,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Trained model; omit when sweeping code lengths
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub task: Task,
    /// Train one model per code length and report a MAP grid, e.g. 16,32,64,128
    #[arg(long, value_delimiter = ',')]
    pub sweep_bits: Vec<usize>,
    /// Grid CSV of reference MAP values to compare against
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Ranked list length for MAP
    #[arg(long, default_value_t = 50)]
    pub map_cutoff: usize,
    #[arg(long, value_enum, default_value = "min")]
    pub map_norm: MapNorm,
    /// Precision@N grid
    #[arg(long, value_delimiter = ',', default_values_t = crate::retrieval::default_top_n())]
    pub top_n: Vec<usize>,
    /// Encode database items with the projections even when they were trained on
    #[arg(long)]
    pub no_stored_codes: bool,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Query,
    Database,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Trained model file
    #[arg(long)]
    pub model: PathBuf,
    /// Feature file for the modality being encoded
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub modality: usize,
    /// Split file used to pick columns with --subset
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub subset: Subset,
    /// Use the learned code for columns the model was trained on
    #[arg(long)]
    pub stored_b: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// e.g. C=4,N=2000,dims=16:24,noise=0.1,seed=0
    #[arg(long)]
    pub synth: String,
    #[arg(long, short)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Config file first, then command-line overrides.
pub fn resolve_config(data: &DataArgs, hyper: &HyperArgs, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match &data.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !data.features.is_empty() {
        cfg.features = data.features.clone();
    }
    if data.labels.is_some() {
        cfg.labels = data.labels.clone();
    }
    if data.split.is_some() {
        cfg.split = data.split.clone();
    }
    if let Some(s) = &data.synth {
        cfg.synth = Some(parse_synth(s)?);
    }
    if let Some(out) = out {
        cfg.output = out.to_path_buf();
    }
    let h = &mut cfg.hyper;
    macro_rules! take {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = hyper.$flag { h.$field = v; })*
        };
    }
    take!(bits => bits, anchors => anchors, clusters => clusters, knn => knn,
          gamma1 => gamma1, gamma2 => gamma2, gamma3 => gamma3, lambda => lambda,
          iters => max_iter, ogm_iters => ogm_max_iter, tol => tol, seed => seed);
    if hyper.renormalize_fusion {
        h.renormalize_fusion = true;
    }
    if hyper.classic_momentum {
        h.momentum = Momentum::Classic;
    }
    if hyper.no_center {
        h.center = false;
    }
    if let Some(t) = hyper.threads {
        cfg.threads = t;
    }
    cfg.verbose |= hyper.verbose;
    Ok(cfg)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(spec) = &cfg.synth {
        return synth_multimodal(spec);
    }
    if cfg.features.len() < 2 {
        return Err(Error::Config("at least two --features files (or --synth) are required".into()));
    }
    let modalities = cfg
        .features
        .iter()
        .map(|p| load_features(p, FeatureFormat::from_path(p)))
        .collect::<Result<Vec<_>>>()?;
    let split = match &cfg.split {
        Some(p) => Split::load(p)?,
        None => return Err(Error::Config("--split is required with feature files".into())),
    };
    let labels = cfg.labels.as_deref().map(load_labels).transpose()?;
    Dataset::new(modalities, labels, split)
}

fn setup(cfg: &RunConfig) {
    let level = if cfg.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if cfg.threads > 0 {
        // fails only if a pool already exists, in which case it stays in use
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn trace_csv(trace: &TrainTrace) -> String {
    let mut out = String::from(
        "iteration,objective,normalized,trace,approximation,regularizer,code_graph,regression,\
         components,isolated_anchors,mean_ogm_iterations,unconverged_rows,seconds\n",
    );
    for r in &trace.records {
        let t = &r.terms;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.objective,
            r.normalized,
            t.trace,
            t.approximation,
            t.regularizer,
            t.code_graph,
            t.regression,
            r.components,
            r.isolated_anchors,
            r.mean_ogm_iterations,
            r.unconverged_rows,
            r.seconds
        );
    }
    out
}

fn eigen_csv(trace: &TrainTrace) -> String {
    let mut out = String::from("iteration,index,laplacian_eigenvalue\n");
    for r in &trace.records {
        for (j, ev) in r.eigenvalues.iter().enumerate() {
            let _ = writeln!(out, "{},{j},{ev}", r.iteration);
        }
    }
    out
}

/// Trains on `dataset`, writing the trace even when training fails.
fn train_into(dataset: &Dataset, cfg: &RunConfig, dir: &Path) -> Result<HashModel> {
    create_dir(dir)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    let mut trainer = Trainer::new(dataset, cfg.hyper.clone())?;
    if cfg.verbose {
        trainer.fused.dump_to_file(&dir.join("fused_graph.txt"))?;
    }
    let mut trace = TrainTrace::default();
    let outcome = trainer.run(&mut trace);
    write_file(&dir.join("trace.csv"), trace_csv(&trace))?;
    if cfg.verbose {
        write_file(&dir.join("eigenvalues.csv"), eigen_csv(&trace))?;
        if let Some(s) = &trainer.s {
            s.dump_to_file(&dir.join("learned_graph.txt"))?;
        }
    }
    outcome?;
    log::info!(
        "trained {} iterations ({})",
        trace.len(),
        if trace.converged { "converged" } else { "iteration cap" }
    );
    let model = trainer.into_model();
    save_model(&dir.join("model.agsf"), &model)?;
    Ok(model)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.data, &args.hyper, args.out.as_deref())?;
    setup(&cfg);
    let dataset = load_dataset(&cfg)?;
    train_into(&dataset, &cfg, &cfg.output)?;
    println!("model written to {}", cfg.output.join("model.agsf").display());
    Ok(())
}

fn check_modalities(model: &HashModel, dataset: &Dataset) -> Result<()> {
    let (want, got) = (model.dims(), dataset.dims());
    if want != got {
        return Err(Error::Shape(format!(
            "model was trained on modality dims {want:?} but the dataset has {got:?}"
        )));
    }
    Ok(())
}

/// Reports for each requested direction.
pub fn evaluate_model(
    model: &HashModel,
    dataset: &Dataset,
    task: Task,
    opts: &EvalOptions,
    stored_codes: bool,
) -> Result<Vec<RetrievalReport>> {
    check_modalities(model, dataset)?;
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs labels".into()))?;
    let query = &dataset.split.query;
    let db = dataset.split.database();
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>();
    let (q_labels, db_labels) = (LabelSets::new(&pick(query)), LabelSets::new(&pick(db)));

    task.directions()
        .into_iter()
        .map(|(name, qm, dm)| {
            let q_codes = encode(model, qm, &dataset.modalities[qm].select(query))?;
            let db_codes = encode_database(model, dm, &dataset.modalities[dm].data, db, stored_codes)?;
            evaluate(
                name,
                &PackedCodes::from_signs(&q_codes)?,
                &q_labels,
                &PackedCodes::from_signs(&db_codes)?,
                &db_labels,
                opts,
            )
        })
        .collect()
}

fn task_label(task: &str) -> &str {
    match task {
        "i2t" => "I->T",
        "t2i" => "T->I",
        other => other,
    }
}

/// MAP grid with one row per task and one column per code length.
pub fn grid_csv(bits: &[usize], reports: &[Vec<RetrievalReport>]) -> String {
    let mut out = String::from("task");
    for b in bits {
        let _ = write!(out, ",{b} bits");
    }
    out.push('\n');
    let tasks: Vec<String> = reports
        .first()
        .map(|r| r.iter().map(|x| x.task.clone()).collect())
        .unwrap_or_default();
    for (t, task) in tasks.iter().enumerate() {
        out += task_label(task);
        for per_bits in reports {
            let _ = write!(out, ",{:.4}", per_bits[t].map);
        }
        out.push('\n');
    }
    out
}

/// Parses a grid CSV into `(task, bits, value)` triples.
pub fn parse_grid(text: &str) -> Result<Vec<(String, usize, f64)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Config("empty grid".into()))?;
    let bits = header
        .split(',')
        .skip(1)
        .map(|h| {
            h.trim()
                .trim_end_matches("bits")
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad grid column {h:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for line in lines {
        let mut cells = line.split(',');
        let task = cells.next().unwrap_or_default().trim().to_string();
        for (b, cell) in bits.iter().zip(cells) {
            let v = cell
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad grid value {cell:?} for {task}")))?;
            out.push((task.clone(), *b, v));
        }
    }
    Ok(out)
}

pub fn comparison_csv(measured: &[(String, usize, f64)], reference: &[(String, usize, f64)]) -> String {
    let mut out = String::from("task,bits,measured,reference,difference\n");
    for (task, bits, m) in measured {
        if let Some((_, _, r)) = reference.iter().find(|(t, b, _)| t == task && b == bits) {
            let _ = writeln!(out, "{task},{bits},{m:.4},{r:.4},{:+.4}", m - r);
        }
    }
    out
}

fn write_reports(dir: &Path, reports: &[RetrievalReport], suffix: &str) -> Result<()> {
    for rep in reports {
        let stem = format!("{}{suffix}", rep.task);
        write_file(&dir.join(format!("{stem}.csv")), rep.to_csv())?;
        rep.save_json(&dir.join(format!("{stem}.json")))?;
        println!(
            "{} {} bits: MAP@{} = {:.4} ({} queries, {} without relevant items)",
            task_label(&rep.task),
            rep.bits,
            rep.map_cutoff,
            rep.map,
            rep.queries,
            rep.excluded_queries
        );
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = resolve_config(&args.data, &args.hyper, args.out.as_deref())?;
    setup(&cfg);
    let dataset = load_dataset(&cfg)?;
    let opts = EvalOptions {
        map_cutoff: args.map_cutoff,
        normalization: match args.map_norm {
            MapNorm::Min => ApNormalization::MinRelevantCutoff,
            MapNorm::Retrieved => ApNormalization::RetrievedRelevant,
        },
        top_n: args.top_n.clone(),
    };
    let stored = !args.no_stored_codes;
    create_dir(&cfg.output)?;

    if args.sweep_bits.is_empty() {
        let path = args
            .model
            .as_ref()
            .ok_or_else(|| Error::Config("--model is required unless --sweep-bits is given".into()))?;
        let model = load_model(path)?;
        let reports = evaluate_model(&model, &dataset, args.task, &opts, stored)?;
        return write_reports(&cfg.output, &reports, "");
    }

    let mut all = Vec::new();
    for &bits in &args.sweep_bits {
        let mut run = cfg.clone();
        run.hyper.bits = bits;
        let model = train_into(&dataset, &run, &cfg.output.join(format!("{bits}bits")))?;
        let reports = evaluate_model(&model, &dataset, args.task, &opts, stored)?;
        write_reports(&cfg.output, &reports, &format!("_{bits}bits"))?;
        all.push(reports);
    }
    let grid = grid_csv(&args.sweep_bits, &all);
    write_file(&cfg.output.join("grid.csv"), &grid)?;
    print!("{grid}");
    if let Some(path) = &args.reference {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let reference = parse_grid(&text)?;
        let cmp = comparison_csv(&parse_grid(&grid)?, &reference);
        write_file(&cfg.output.join("comparison.csv"), &cmp)?;
        print!("{cmp}");
    }
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let features = load_features(&args.features, FeatureFormat::from_path(&args.features))?;
    let n = features.count();
    let columns: Vec<usize> = match (args.subset, &args.split) {
        (Subset::All, _) => (0..n).collect(),
        (_, None) => return Err(Error::Config("--subset needs --split".into())),
        (subset, Some(path)) => {
            let split = Split::load(path)?;
            split.validate(n)?;
            match subset {
                Subset::Train => split.train.clone(),
                Subset::Query => split.query.clone(),
                _ => split.database().to_vec(),
            }
        }
    };
    let codes = encode_database(&model, args.modality, &features.data, &columns, args.stored_b)?;
    let packed = PackedCodes::from_signs(&codes)?;
    save_codes(&args.out, &packed)?;
    println!("{} codes of {} bits written to {}", packed.len(), packed.bits(), args.out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = parse_synth(&args.synth)?;
    let ds = synth_multimodal(&spec)?;
    create_dir(&args.out)?;
    for (m, f) in ds.modalities.iter().enumerate() {
        save_features_bin(&args.out.join(format!("modality{m}.bin")), &f.data)?;
    }
    if let Some(labels) = &ds.labels {
        save_labels(&args.out.join("labels.txt"), labels)?;
    }
    ds.split.save(&args.out.join("split.txt"))?;
    println!("wrote {} instances to {}", ds.len(), args.out.display());
    Ok(())
}
