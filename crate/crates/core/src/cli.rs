//! Command-line interface.

use crate::error::{Error, Result};
use crate::io::{
    dataset_from_table, fmt_real, header_comment, histogram_table, r2_samples_table,
    ratio_samples_table, read_draws, read_model_spec, write_draws, write_json, Table,
};
use crate::model::{Model, ModelSpec, ParamDraw};
use crate::oracle::mc_sums;
use crate::partial::{partial_decompose_all, PartialDecomp, PartialSpec};
use crate::rsq::{decompose_all, summarize, RsqSummary};
use crate::sampler::{sample_posterior, SamplerConfig};
use crate::simstudy::{run_section5, simulate_section5, Section5Config, DEFAULT_SEED};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

const HIST_BINS: usize = 30;

#[derive(Parser, Debug)]
#[command(name = "gamm-r2", version, about = "Bayesian GAMMs and posterior-predictive R-squared")]
struct Cli {
    /// Worker threads (falls back to GAMM_R2_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the negative binomial example dataset.
    Simulate {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the posterior and write the draws.
    Fit {
        #[command(flatten)]
        inputs: ModelInputs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Also write the R-squared outputs.
        #[arg(long)]
        with_r2: bool,
    },
    /// Bayesian R-squared from a draws file.
    R2 {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Draws CSV written by `fit`
        #[arg(long)]
        draws: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Partial R-squared of a reduced model.
    Partial {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Draws CSV written by `fit`
        #[arg(long)]
        draws: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        terms: TermArgs,
    },
    /// Monte-Carlo check of the analytic sums of squares.
    OracleCheck {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Draws CSV written by `fit`
        #[arg(long)]
        draws: PathBuf,
        /// CSV file for the table (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        mc_reps: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Number of draws to check, evenly spaced.
        #[arg(long, default_value_t = 5)]
        max_draws: usize,
        #[command(flatten)]
        terms: TermArgs,
    },
    /// Simulate and fit the three-model example end to end.
    RunSection5 {
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelInputs {
    /// Data CSV (header row, '#' comments allowed)
    #[arg(long)]
    data: PathBuf,
    /// Model specification JSON
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    /// Sampler seed; a fixed default is used when omitted
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Adaptation iterations per chain, discarded
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    /// Retained iterations per chain, before thinning
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
}

impl SamplerArgs {
    fn config(&self, default_seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            warmup: self.warmup,
            iters: self.iters,
            thin: self.thin,
            seed: self.seed.unwrap_or(default_seed),
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct TermArgs {
    /// Terms of the reduced model (comma separated); the intercept is
    /// always kept.
    #[arg(long, value_delimiter = ',', conflicts_with = "exclude")]
    keep: Option<Vec<String>>,
    /// Terms removed from the full model (comma separated).
    #[arg(long, value_delimiter = ',')]
    exclude: Option<Vec<String>>,
}

impl TermArgs {
    fn resolve(&self, model: &Model) -> Result<Option<PartialSpec>> {
        match (&self.keep, &self.exclude) {
            (Some(k), _) => Ok(Some(PartialSpec::keep(model, k)?)),
            (None, Some(e)) => Ok(Some(PartialSpec::exclude(model, e)?)),
            (None, None) => Ok(None),
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads.or_else(|| {
        std::env::var("GAMM_R2_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
    });
    if threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))
    })
}

fn load_model(inputs: &ModelInputs) -> Result<Model> {
    let spec: ModelSpec = read_model_spec(&inputs.model)?;
    let table = Table::read(&inputs.data)?;
    Model::new(spec.clone(), dataset_from_table(&spec, &table)?)
}

#[derive(Serialize)]
struct R2Summary<'a> {
    n_draws: usize,
    #[serde(flatten)]
    summary: &'a RsqSummary,
}

fn write_r2_outputs(dir: &Path, model: &Model, draws: &[ParamDraw], seed: Option<u64>) -> Result<RsqSummary> {
    let decomps = decompose_all(model, draws)?;
    let summary = summarize(decomps.iter().map(|d| d.map(|s| s.r2)))?;
    let comment = header_comment(seed);
    r2_samples_table(&decomps).write(&dir.join("r2_samples.csv"), &comment)?;
    histogram_table(&summary, HIST_BINS).write(&dir.join("r2_hist.csv"), &comment)?;
    write_json(
        &dir.join("r2_summary.json"),
        seed,
        &R2Summary {
            n_draws: draws.len(),
            summary: &summary,
        },
    )?;
    Ok(summary)
}

#[derive(Serialize)]
struct FitSummary {
    n_draws: usize,
    chains: usize,
    warmup: usize,
    iters: usize,
    thin: usize,
    accept_rates: Vec<f64>,
    block_accept_rates: Vec<Vec<(String, f64)>>,
}

fn partial_table(parts: &[PartialDecomp]) -> Table {
    let mut t = Table::new(
        ["draw_id", "ess1", "rss", "rss0", "tss", "partial_r2", "marginal_ratio"]
            .map(String::from)
            .to_vec(),
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), fmt_real);
    for (i, p) in parts.iter().enumerate() {
        t.push_row(vec![
            (i + 1).to_string(),
            fmt_real(p.ess1),
            fmt_real(p.rss),
            fmt_real(p.rss0),
            fmt_real(p.tss),
            opt(p.partial_r2()),
            opt(p.marginal_ratio()),
        ]);
    }
    t
}

#[derive(Serialize)]
struct PartialSummary<'a> {
    kept: Vec<String>,
    excluded: Vec<String>,
    n_draws: usize,
    partial_r2: &'a RsqSummary,
    marginal_ratio: &'a RsqSummary,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { seed, n, out } => {
            let cfg = Section5Config {
                n,
                seed,
                ..Default::default()
            };
            let data = simulate_section5(&cfg)?;
            ensure_dir(&out)?;
            data.table().write(&out.join("data.csv"), &header_comment(Some(seed)))?;
            write_json(&out.join("truth.json"), Some(seed), &data.truth)?;
            write_json(&out.join("model.json"), Some(seed), &crate::simstudy::section5_specs()[2].1)?;
        }
        Command::Fit {
            inputs,
            sampler,
            out,
            with_r2,
        } => {
            let model = load_model(&inputs)?;
            let cfg = sampler.config(SamplerConfig::default().seed);
            let set = sample_posterior(&model, &cfg)?;
            ensure_dir(&out)?;
            write_draws(&out.join("draws.csv"), &model, &set)?;
            write_json(
                &out.join("fit.json"),
                Some(cfg.seed),
                &FitSummary {
                    n_draws: set.len(),
                    chains: cfg.chains,
                    warmup: cfg.warmup,
                    iters: cfg.iters,
                    thin: cfg.thin,
                    accept_rates: set.accept_rates.clone(),
                    block_accept_rates: set.block_accept_rates.clone(),
                },
            )?;
            if with_r2 {
                let s = write_r2_outputs(&out, &model, &set.draws, Some(cfg.seed))?;
                println!("bayes_r2 mean {:.4} [{:.4}, {:.4}]", s.mean, s.q05, s.q95);
            }
        }
        Command::R2 {
            inputs,
            draws,
            out,
        } => {
            let model = load_model(&inputs)?;
            let table = read_draws(&draws, &model)?;
            ensure_dir(&out)?;
            let s = write_r2_outputs(&out, &model, &table.draws, None)?;
            println!("bayes_r2 mean {:.4} [{:.4}, {:.4}]", s.mean, s.q05, s.q95);
        }
        Command::Partial {
            inputs,
            draws,
            out,
            terms,
        } => {
            let model = load_model(&inputs)?;
            let partial = terms.resolve(&model)?.ok_or_else(|| {
                Error::InvalidSpec("one of --keep or --exclude is required".into())
            })?;
            let table = read_draws(&draws, &model)?;
            let parts = partial_decompose_all(&model, &partial, &table.draws)?;
            let pr = summarize(parts.iter().map(PartialDecomp::partial_r2))?;
            let mr = summarize(parts.iter().map(PartialDecomp::marginal_ratio))?;
            ensure_dir(&out)?;
            let comment = header_comment(None);
            partial_table(&parts).write(&out.join("partial_samples.csv"), &comment)?;
            histogram_table(&pr, HIST_BINS).write(&out.join("partial_hist.csv"), &comment)?;
            let labels = |ts: &[crate::model::Term]| ts.iter().map(|&t| model.term_label(t)).collect();
            write_json(
                &out.join("partial_summary.json"),
                None,
                &PartialSummary {
                    kept: labels(partial.kept()),
                    excluded: labels(partial.excluded()),
                    n_draws: parts.len(),
                    partial_r2: &pr,
                    marginal_ratio: &mr,
                },
            )?;
            println!("partial_r2 mean {:.4} [{:.4}, {:.4}]", pr.mean, pr.q05, pr.q95);
        }
        Command::OracleCheck {
            inputs,
            draws,
            out,
            mc_reps,
            seed,
            max_draws,
            terms,
        } => {
            let model = load_model(&inputs)?;
            let table = read_draws(&draws, &model)?;
            let partial = terms.resolve(&model)?;
            let l = table.draws.len();
            let k = max_draws.clamp(1, l);
            let mut t = Table::new(
                ["draw_id", "formula", "analytic", "mc_mean", "se", "z", "pass"]
                    .map(String::from)
                    .to_vec(),
            );
            let mut all_pass = true;
            for j in 0..k {
                let id = j * l / k;
                let draw = &table.draws[id];
                let mc = mc_sums(&model, partial.as_ref(), draw, mc_reps, seed.wrapping_add(id as u64))?;
                let dec = crate::rsq::decompose(&model, draw).or_else(|e| match e {
                    Error::DegenerateR2 => Ok(crate::rsq::SsDecomp {
                        ess: 0.0,
                        rss: 0.0,
                        tss: 0.0,
                        r2: f64::NAN,
                    }),
                    e => Err(e),
                })?;
                let mut rows = vec![("tss = ess + rss", dec.tss, mc.tss), ("rss", dec.rss, mc.rss)];
                if let (Some(p), Some(r0)) = (&partial, mc.rss0) {
                    rows.push(("rss0 = rss + ess1", crate::partial::rss0(&model, p, draw)?, r0));
                }
                for (name, analytic, est) in rows {
                    let pass = est.agrees(analytic, 4.0);
                    all_pass &= pass;
                    t.push_row(vec![
                        (id + 1).to_string(),
                        name.to_string(),
                        fmt_real(analytic),
                        fmt_real(est.mean),
                        fmt_real(est.se),
                        fmt_real(est.z(analytic)),
                        pass.to_string(),
                    ]);
                }
            }
            let comment = header_comment(Some(seed));
            match out {
                Some(p) => t.write(&p, &comment)?,
                None => t.write_to(std::io::stdout().lock(), &comment)?,
            }
            if !all_pass {
                eprintln!("warning: some Monte-Carlo checks fell outside 4 standard errors");
            }
        }
        Command::RunSection5 { sampler, n, out } => {
            let seed = sampler.seed.unwrap_or(DEFAULT_SEED);
            let cfg = Section5Config {
                n,
                seed,
                ..Default::default()
            };
            let scfg = sampler.config(seed);
            let report = run_section5(&cfg, &scfg)?;
            ensure_dir(&out)?;
            let comment = header_comment(Some(seed));
            simulate_section5(&cfg)?
                .table()
                .write(&out.join("data.csv"), &comment)?;
            for fit in &report.fits {
                ratio_samples_table("r2", &fit.r2).write(&out.join(format!("r2_{}.csv", fit.name)), &comment)?;
                histogram_table(&fit.r2, HIST_BINS)
                    .write(&out.join(format!("r2_hist_{}.csv", fit.name)), &comment)?;
                println!(
                    "{}: bayes_r2 mean {:.4} [{:.4}, {:.4}]",
                    fit.name, fit.r2.mean, fit.r2.q05, fit.r2.q95
                );
            }
            ratio_samples_table("partial_r2", &report.partial_r2)
                .write(&out.join("partial_r2.csv"), &comment)?;
            let mut grid = Table::new(["u", "true_f1", "post_mean", "q05", "q95"].map(String::from).to_vec());
            for p in &report.f1_grid {
                grid.push_row([p.u, p.true_f1, p.post_mean, p.q05, p.q95].map(fmt_real).to_vec());
            }
            grid.write(&out.join("f1_grid.csv"), &comment)?;
            write_json(&out.join("summary.json"), Some(seed), &report)?;
            println!(
                "fit2 partial_r2 (keep intercept, x1) mean {:.4}; f1 grid rmse {:.4}",
                report.partial_r2.mean, report.f1_rmse
            );
        }
    }
    Ok(())
}
