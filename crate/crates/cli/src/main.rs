use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use s3ribp::eval::{
    binarize_features, binomial_baseline_qq, evaluate_folds, live_b_mean, qq_row_nonzeros, top_features, EvalOptions,
    FeatureReport,
};
use s3ribp::io::{
    load_counts, make_splits, read_json, save_counts, write_json, write_pairs, CountFormat, Preprocess, Provenance,
    RunConfig,
};
use s3ribp::mcmc::{resume_chain, run_chain, run_chain_with, sample_joint_prior, ChainCheckpoint, ChainConfig, Kernel};
use s3ribp::priors::{sample_3p_ibp, sample_3r_ibp, sample_ibp};
use s3ribp::{CountMatrix, Error, ObservationMask, PosteriorSummary};

/// Sparse restricted IBP Poisson factorization of count matrices.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-sample a feature matrix from an IBP-family prior.
    Generate(GenerateArgs),
    /// Fit the model to every cell of a count matrix.
    Fit(DataArgs),
    /// Cross-validated log-perplexity, coherence, qq points and feature matching.
    Eval(DataArgs),
    /// Row-nonzero qq tables for a fitted summary and the binomial baseline.
    Qq(SummaryArgs),
    /// Top-weighted columns of every live feature.
    Topics(SummaryArgs),
    /// Fit a second layer to the binarized features of a fitted summary.
    Meta(MetaArgs),
    /// Continue a checkpointed fit to completion.
    Resume(ResumeArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    samples: Option<u64>,
    #[arg(long)]
    alpha_b: Option<f64>,
    #[arg(long)]
    mu_b: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    nb_r: Option<f64>,
    #[arg(long)]
    nb_p: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    holdout: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    qq_draws: Option<usize>,
    /// Write `checkpoint.json` every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct Input {
    /// Count matrix file (`.csv`, or `.tsv` for tabs).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long, value_enum)]
    preprocess: Option<PreprocessArg>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SummaryArgs {
    /// `summary.json` written by `fit` or `resume`.
    #[arg(long)]
    summary: PathBuf,
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MetaArgs {
    #[arg(long)]
    summary: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    prior: PriorArg,
    /// Mass parameter for `ibp` and `3p`; `3r` draws it from its prior.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    rows: usize,
    /// Independent matrices to draw.
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    /// With `3r`, also draw a count matrix with this many columns.
    #[arg(long)]
    cols: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Ibp,
    #[value(name = "3p")]
    ThreeParam,
    #[value(name = "3r")]
    Restricted,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Dense,
    Triplet,
}

#[derive(Clone, Copy, ValueEnum)]
enum PreprocessArg {
    None,
    RcaRound,
    RcaBinary,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

fn build_config(common: &Common, input: Option<&Input>) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let hp = &mut cfg.hyper;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = common.$flag { $field = v; })*
        };
    }
    set!(
        seed => hp.seed, k_max => hp.k_max, burn_in => hp.burn_in, samples => hp.n_samples,
        alpha_b => hp.alpha_b, mu_b => hp.mu_b, c => hp.c, sigma => hp.sigma, nb_r => hp.nb_r, nb_p => hp.nb_p,
        folds => cfg.folds, holdout => cfg.holdout, top_m => cfg.top_m, qq_draws => cfg.qq_draws,
    );
    if let Some(e) = common.checkpoint_every {
        cfg.checkpoint_every = Some(e);
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    if let Some(input) = input {
        if let Some(d) = &input.data {
            cfg.dataset = Some(d.clone());
        }
        if let Some(f) = input.format {
            cfg.format = match f {
                FormatArg::Dense => CountFormat::Dense,
                FormatArg::Triplet => CountFormat::Triplet,
            };
        }
        if let Some(p) = input.preprocess {
            cfg.preprocess = match p {
                PreprocessArg::None => Preprocess::None,
                PreprocessArg::RcaRound => Preprocess::RcaRound,
                PreprocessArg::RcaBinary => Preprocess::RcaBinary,
            };
        }
    }
    cfg.hyper = cfg.hyper.clone().normalized().map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    cfg.resolve_paths()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<CountMatrix, Failure> {
    let path = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Failure::Usage("a dataset is required (--data or `dataset` in the config)".into()))?;
    load_counts(path, cfg.format, cfg.preprocess).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Failure {
    match e {
        Error::Io(io) => Failure::Run(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))),
        e => Failure::Run(e),
    }
}

fn output_dir(cfg: &RunConfig) -> Result<&Path, Failure> {
    fs::create_dir_all(&cfg.output).map_err(Error::from)?;
    Ok(&cfg.output)
}

fn finish(command: &str, cfg: &RunConfig) -> Outcome {
    Provenance::new(command, cfg).write(&cfg.output)?;
    Ok(())
}

fn write_topics(path: &Path, reports: &[FeatureReport]) -> Result<(), Error> {
    let mut s = String::from("feature\trank\tlabel\tweight\n");
    for r in reports {
        for (rank, (label, w)) in r.entries.iter().enumerate() {
            s.push_str(&format!("F{}\t{}\t{}\t{}\n", r.feature, rank + 1, label, w));
        }
    }
    s3ribp::io::atomic_write(path, s.as_bytes())
}

fn fit_chain(data: &CountMatrix, cfg: &RunConfig, out: &Path) -> Result<PosteriorSummary, Failure> {
    let config = ChainConfig { checkpoint_every: cfg.checkpoint_every, ..ChainConfig::new(cfg.hyper.clone()) };
    let cp_path = out.join("checkpoint.json");
    let summary = run_chain_with(data, &ObservationMask::none(), &config, |cp| {
        log::info!("checkpoint at iteration {}", cp.iteration);
        s3ribp::io::atomic_write(&cp_path, cp.to_json()?.as_bytes())
    })?;
    Ok(summary)
}

fn report_fit(summary: &PosteriorSummary) {
    println!(
        "live features {}, mean K+ {:.2}, acceptance {:.3}{}",
        summary.live_features().len(),
        summary.mean_k_plus(),
        summary.acceptance,
        summary.wall_clock_secs.map_or(String::new(), |s| format!(", {s:.1}s")),
    );
}

fn generate(args: &GenerateArgs) -> Outcome {
    let cfg = build_config(&args.common, None)?;
    if args.replicates == 0 {
        return Err(Failure::Usage("--replicates must be at least 1".into()));
    }
    if args.cols.is_some() && !matches!(args.prior, PriorArg::Restricted) {
        return Err(Failure::Usage("--cols requires --prior 3r".into()));
    }
    let hp = &cfg.hyper;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let kernel = args.cols.map(|_| Kernel::new(hp)).transpose()?;
    let mut matrices = Vec::with_capacity(args.replicates);
    let mut k_plus = Vec::with_capacity(args.replicates);
    for _ in 0..args.replicates {
        let (z, x) = match (args.prior, &kernel) {
            (PriorArg::Ibp, _) => (sample_ibp(args.alpha, args.rows, &mut rng)?.matrix().clone(), None),
            (PriorArg::ThreeParam, _) => {
                (sample_3p_ibp(args.alpha, hp.c, hp.sigma, args.rows, &mut rng)?.matrix().clone(), None)
            }
            (PriorArg::Restricted, None) => (sample_3r_ibp(hp, args.rows, &mut rng)?.matrix().clone(), None),
            (PriorArg::Restricted, Some(kernel)) => {
                let (state, x) = sample_joint_prior(kernel, args.rows, args.cols.unwrap_or(0), &mut rng)?;
                (state.z, Some(x))
            }
        };
        k_plus.push(z.columns().into_iter().filter(|c| c.iter().any(|&v| v)).count());
        matrices.push((z, x));
    }
    let out = output_dir(&cfg)?;
    let name = |stem: &str, i: usize| {
        if args.replicates == 1 {
            out.join(format!("{stem}.csv"))
        } else {
            out.join(format!("{stem}-{i:04}.csv"))
        }
    };
    for (i, (z, x)) in matrices.iter().enumerate() {
        save_counts(&binary_matrix(z)?, &name("z", i), CountFormat::Dense)?;
        if let Some(x) = x {
            save_counts(x, &name("x", i), CountFormat::Dense)?;
        }
    }
    let mean = k_plus.iter().sum::<usize>() as f64 / k_plus.len() as f64;
    let prior = args.prior.to_possible_value().map(|v| v.get_name().to_string());
    write_json(
        &out.join("generate.json"),
        &json!({ "prior": prior, "alpha": args.alpha, "rows": args.rows, "replicates": args.replicates, "k_plus": k_plus, "mean_k_plus": mean }),
    )?;
    println!("mean K+ {mean:.3} over {} replicates", args.replicates);
    finish("generate", &cfg)
}

fn binary_matrix(z: &Array2<bool>) -> Result<CountMatrix, Error> {
    let mut m = CountMatrix::new(
        (0..z.nrows()).map(|n| format!("r{n}")).collect(),
        (0..z.ncols()).map(|k| format!("f{k}")).collect(),
    )?;
    for ((n, k), &v) in z.indexed_iter() {
        if v {
            m.set(n, k, 1)?;
        }
    }
    Ok(m)
}

fn fit(args: &DataArgs) -> Outcome {
    let cfg = build_config(&args.common, Some(&args.input))?;
    let data = load_data(&cfg)?;
    let out = output_dir(&cfg)?;
    let summary = fit_chain(&data, &cfg, out)?;
    write_json(&out.join("summary.json"), &summary)?;
    report_fit(&summary);
    finish("fit", &cfg)
}

fn resume(args: &ResumeArgs) -> Outcome {
    let mut cfg = build_config(&args.common, Some(&args.input))?;
    let data = load_data(&cfg)?;
    let text = fs::read_to_string(&args.checkpoint).map_err(|e| with_path(e.into(), &args.checkpoint))?;
    let cp = ChainCheckpoint::from_json(&text)?;
    cfg.hyper = cp.hyper.clone();
    let out = output_dir(&cfg)?;
    let cp_path = out.join("checkpoint.json");
    let summary = resume_chain(&data, cp, cfg.checkpoint_every, |cp| {
        s3ribp::io::atomic_write(&cp_path, cp.to_json()?.as_bytes())
    })?;
    write_json(&out.join("summary.json"), &summary)?;
    report_fit(&summary);
    finish("resume", &cfg)
}

fn eval(args: &DataArgs) -> Outcome {
    let cfg = build_config(&args.common, Some(&args.input))?;
    let data = load_data(&cfg)?;
    let masks = make_splits(&data, cfg.holdout, cfg.folds, cfg.hyper.seed)?;
    let options = EvalOptions { top_m: cfg.top_m, qq_draws: cfg.qq_draws };
    let report = evaluate_folds(&data, &masks, &cfg.hyper, &options)?;
    let out = output_dir(&cfg)?;
    write_json(&out.join("eval.json"), &report)?;
    write_pairs(&out.join("qq_model.tsv"), ["empirical", "predicted"], &report.qq_points)?;
    write_pairs(&out.join("qq_baseline.tsv"), ["empirical", "predicted"], &report.baseline_qq_points)?;
    println!(
        "log-perplexity {} (row-mean baseline {}), coherence {}",
        report.log_perplexity, report.baseline_log_perplexity, report.coherence
    );
    finish("eval", &cfg)
}

fn read_summary(path: &Path) -> Result<PosteriorSummary, Failure> {
    read_json(path).map_err(|e| Failure::Run(Error::Data(format!("{}: {e}", path.display()))))
}

fn check_shape(summary: &PosteriorSummary, data: &CountMatrix) -> Outcome {
    if (summary.n_rows, summary.n_cols) != (data.n_rows(), data.n_cols()) {
        return Err(Failure::Run(Error::Data(format!(
            "summary is {}x{} but the data is {}x{}",
            summary.n_rows,
            summary.n_cols,
            data.n_rows(),
            data.n_cols()
        ))));
    }
    Ok(())
}

fn qq(args: &SummaryArgs) -> Outcome {
    let cfg = build_config(&args.common, Some(&args.input))?;
    let data = load_data(&cfg)?;
    let summary = read_summary(&args.summary)?;
    check_shape(&summary, &data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.hyper.seed);
    let model = qq_row_nonzeros(&summary, &data, cfg.qq_draws, &mut rng)?;
    let baseline = binomial_baseline_qq(&data, cfg.qq_draws, &mut rng)?;
    let out = output_dir(&cfg)?;
    write_pairs(&out.join("qq_model.tsv"), ["empirical", "predicted"], &model)?;
    write_pairs(&out.join("qq_baseline.tsv"), ["empirical", "predicted"], &baseline)?;
    println!(
        "mean |gap| model {:.3}, baseline {:.3}",
        s3ribp::eval::qq_mean_abs_gap(&model),
        s3ribp::eval::qq_mean_abs_gap(&baseline)
    );
    finish("qq", &cfg)
}

fn topics(args: &SummaryArgs) -> Outcome {
    let cfg = build_config(&args.common, Some(&args.input))?;
    let data = load_data(&cfg)?;
    let summary = read_summary(&args.summary)?;
    check_shape(&summary, &data)?;
    let reports = top_features(live_b_mean(&summary).view(), data.col_labels(), cfg.top_m)?;
    let out = output_dir(&cfg)?;
    write_topics(&out.join("topics.tsv"), &reports)?;
    for r in &reports {
        println!("{r}");
    }
    finish("topics", &cfg)
}

fn meta(args: &MetaArgs) -> Outcome {
    let cfg = build_config(&args.common, None)?;
    let first = read_summary(&args.summary)?;
    let input = binarize_features(&first)?;
    let config = ChainConfig::new(cfg.hyper.clone());
    let second = run_chain(&input, &ObservationMask::none(), &config)?;
    let reports = top_features(live_b_mean(&second).view(), input.col_labels(), cfg.top_m)?;
    let out = output_dir(&cfg)?;
    save_counts(&input, &out.join("features.csv"), CountFormat::Dense)?;
    write_json(&out.join("meta_summary.json"), &second)?;
    write_topics(&out.join("meta_topics.tsv"), &reports)?;
    for r in &reports {
        println!("{r}");
    }
    finish("meta", &cfg)
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Qq(a) => qq(a),
        Command::Topics(a) => topics(a),
        Command::Meta(a) => meta(a),
        Command::Resume(a) => resume(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            error_line("usage", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
