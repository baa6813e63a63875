use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kconflict::backends::{MockServer, ServedBackend};
use kconflict::corpus::{
    answer_pool, build_manifest, build_multihop_conflicts, generate_counterfactual_llm, inject_memory_evidence,
    llm_counterfactual_variants, load_dataset, memory_label, passage_pool, popularity_buckets, sample_eval_set,
    substitution_counterfactuals, ConflictMixSpec, CounterfactualRecord, LlmCounterfactualConfig, MixManifest, QAItem,
    DEFAULT_POPULARITY_EDGES,
};
use kconflict::jsonl;
use kconflict::probe::{
    confidence_deltas, popularity_curves, write_confidence_csv, write_popularity_csv, CurveObservation,
    InternalMemoryRecord, ProbeConfig,
};
use kconflict::prompt::DEFAULT_TEMPLATE;
use kconflict::runner::{
    aggregate, emit_report, expand_sweep, held_out_demos, induce_all, probe_all, probe_markdown, render_markdown,
    run_experiment, verify_dataset, BackendSpec, Backends, BackendsConfig, ExperimentConfig, Mode, ReportFormat,
    RunReport, RunStatus, SweepFile,
};

#[derive(Parser)]
#[command(name = "kconflict", version, about = "Knowledge-conflict evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Llm,
    Substitution,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Markdown => ReportFormat::Markdown,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(clap::Args)]
struct Selection {
    /// Dataset JSONL.
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate a seeded sample of this many items instead of the whole dataset.
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Selection {
    fn load(&self) -> Result<(Vec<QAItem>, Vec<QAItem>)> {
        let all = load_dataset(&self.dataset).with_context(|| format!("loading {}", self.dataset.display()))?;
        let chosen = match self.sample_size {
            Some(n) => sample_eval_set(&all, n, self.seed)?,
            None => all.clone(),
        };
        Ok((all, chosen))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Closed-book answers and self-generated supporting evidence.
    Induce {
        #[command(flatten)]
        sel: Selection,
        /// Backend spec: http(s)://..., bigram:<corpus>, table:<file>.
        #[arg(long)]
        backend: BackendSpec,
        #[arg(long, default_value_t = 0)]
        demos: usize,
        #[arg(long, default_value = DEFAULT_TEMPLATE)]
        template: String,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Counterfactual answers and conflicting passages.
    GenConflicts {
        #[command(flatten)]
        sel: Selection,
        #[arg(long, value_enum)]
        generator: GeneratorArg,
        /// Generation backend for --generator llm.
        #[arg(long)]
        backend: Option<BackendSpec>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
        /// Conflicting passages per item for --generator llm.
        #[arg(long, default_value_t = 1)]
        variants: usize,
        /// Newline-separated alternates for --generator substitution; defaults to all gold answers.
        #[arg(long)]
        entity_pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evidence mixes with exact per-label counts, written as manifests.
    Mix {
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        counterfactuals: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        truthful: usize,
        #[arg(long, default_value_t = 0)]
        misleading: usize,
        #[arg(long, default_value_t = 0)]
        irrelevant: usize,
        /// Build multi-hop mixes with this many conflicting hops instead.
        #[arg(long)]
        conflicting_hops: Option<usize>,
        /// Add each item's self-generated evidence from this memory file.
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        entity_pool: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Conflict probe: contradict each item's closed-book memory with K docs.
    Probe {
        #[command(flatten)]
        sel: Selection,
        #[arg(long)]
        backend: BackendSpec,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        counterfactuals: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        demos: usize,
        #[arg(long, default_value = DEFAULT_TEMPLATE)]
        template: String,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a config and write the report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-render a JSON report, checking its aggregates against its records.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check a dataset and optional counterfactuals and manifests; non-zero exit on violations.
    Verify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        manifests: Option<PathBuf>,
        #[arg(long)]
        counterfactuals: Option<PathBuf>,
    },
    /// Expand a sweep file and run every configuration.
    Sweep {
        #[arg(long)]
        sweep: PathBuf,
        /// Only write the expanded configs.
        #[arg(long)]
        dry_run: bool,
    },
    /// Serve a toy backend over the HTTP protocol.
    Serve {
        #[arg(long)]
        backend: BackendSpec,
        #[arg(long)]
        generator: Option<BackendSpec>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
}

fn single_model(spec: &BackendSpec) -> Result<kconflict::decoder::Model> {
    let b = Backends::connect(&BackendsConfig {
        expert: Some(spec.clone()),
        ..Default::default()
    })?;
    b.expert.context("backend provides no logits")
}

fn read_pool(path: &Option<PathBuf>, items: &[QAItem]) -> Result<Vec<String>> {
    Ok(match path {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => answer_pool(items),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_eval(report: &RunReport, dir: &Path) -> Result<()> {
    for f in [ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv] {
        let p = emit_report(report, f, dir)?;
        log::info!("wrote {}", p.display());
    }
    print!("{}", render_markdown(report));
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Induce {
            sel,
            backend,
            demos,
            template,
            max_len,
            workers,
            out,
        } => {
            let (all, items) = sel.load()?;
            let model = single_model(&backend)?;
            let cfg = ProbeConfig {
                demos: held_out_demos(&all, &items, demos, sel.seed)?,
                template,
                max_answer_len: max_len,
                seed: sel.seed,
                ..ProbeConfig::default()
            };
            let (records, failures) = induce_all(&items, &model, &cfg, workers)?;
            for (id, e) in &failures {
                log::warn!("item {id}: {e}");
            }
            jsonl::write(&out, &records)?;
            let correct = records.iter().filter(|r| r.is_correct).count();
            println!(
                "{} memory records ({correct} correct, {} incorrect), {} failures",
                records.len(),
                records.len() - correct,
                failures.len()
            );
        }
        Command::GenConflicts {
            sel,
            generator,
            backend,
            temperature,
            max_retries,
            variants,
            entity_pool,
            out,
        } => {
            let (all, items) = sel.load()?;
            let items: Vec<QAItem> = items.into_iter().filter(|i| !i.evidence.is_empty()).collect();
            let mut records: Vec<CounterfactualRecord> = Vec::new();
            let mut skipped = 0usize;
            match generator {
                GeneratorArg::Substitution => {
                    let pool = read_pool(&entity_pool, &all)?;
                    for item in &items {
                        match substitution_counterfactuals(item, &pool, sel.seed) {
                            Ok(mut r) => records.append(&mut r),
                            Err(e) => {
                                log::warn!("{e}");
                                skipped += 1;
                            }
                        }
                    }
                }
                GeneratorArg::Llm => {
                    let spec = backend.context("--generator llm needs --backend")?;
                    let b = Backends::connect(&BackendsConfig {
                        generation: Some(spec),
                        ..Default::default()
                    })?;
                    let g = b.generation.context("backend cannot generate text")?;
                    let cfg = LlmCounterfactualConfig {
                        temperature,
                        max_retries,
                        ..LlmCounterfactualConfig::default()
                    };
                    for item in &items {
                        let r = if variants > 1 {
                            llm_counterfactual_variants(item, g.as_ref(), &cfg, variants)
                        } else {
                            generate_counterfactual_llm(item, g.as_ref(), &cfg).map(|r| vec![r])
                        };
                        match r {
                            Ok(mut r) => records.append(&mut r),
                            Err(e) => {
                                log::warn!("{e}");
                                skipped += 1;
                            }
                        }
                    }
                }
            }
            jsonl::write(&out, &records)?;
            println!("{} counterfactual records, {skipped} items skipped", records.len());
        }
        Command::Mix {
            sel,
            counterfactuals,
            k,
            truthful,
            misleading,
            irrelevant,
            conflicting_hops,
            memory,
            entity_pool,
            out,
        } => {
            let (all, items) = sel.load()?;
            let cfs: Vec<CounterfactualRecord> = match &counterfactuals {
                Some(p) => jsonl::read(p)?,
                None => Vec::new(),
            };
            let memory: Vec<InternalMemoryRecord> = match &memory {
                Some(p) => jsonl::read(p)?,
                None => Vec::new(),
            };
            let spec = ConflictMixSpec::new(truthful, misleading, irrelevant, sel.seed);
            if let Some(k) = k {
                if k != spec.k {
                    bail!("--k {k} does not equal truthful + misleading + irrelevant = {}", spec.k);
                }
            }
            let pool = read_pool(&entity_pool, &all)?;
            let mut manifests = Vec::new();
            let mut skipped = 0usize;
            for item in &items {
                let built = match conflicting_hops {
                    Some(h) => {
                        if item.hops.is_none() {
                            continue;
                        }
                        build_multihop_conflicts(item, h, &pool, sel.seed).map(|docs| {
                            let hops = item.hops.as_ref().map_or(0, Vec::len);
                            MixManifest {
                                item_id: item.id.clone(),
                                spec: ConflictMixSpec::new(hops, h, 0, sel.seed),
                                docs,
                                conflict_answer: None,
                                conflicting_hops: Some(h),
                            }
                        })
                    }
                    None => build_manifest(item, &spec, &cfs, &passage_pool(&all, &item.id)),
                };
                let mut m = match built {
                    Ok(m) => m,
                    Err(e) => {
                        log::warn!("{e}");
                        skipped += 1;
                        continue;
                    }
                };
                if let Some(rec) = memory.iter().find(|r| r.item_id == item.id) {
                    let label = memory_label(rec.is_correct);
                    m.docs = inject_memory_evidence(&m.docs, &item.id, &rec.memory_evidence, label, sel.seed)?;
                    m.spec = ConflictMixSpec::new(
                        m.count(kconflict::corpus::EvidenceLabel::Truthful),
                        m.count(kconflict::corpus::EvidenceLabel::Misleading),
                        m.count(kconflict::corpus::EvidenceLabel::Irrelevant),
                        sel.seed,
                    );
                }
                manifests.push(m);
            }
            jsonl::write(&out, &manifests)?;
            println!("{} manifests, {skipped} items skipped", manifests.len());
        }
        Command::Probe {
            sel,
            backend,
            memory,
            counterfactuals,
            k,
            demos,
            template,
            max_len,
            workers,
            out_dir,
        } => {
            let (all, items) = sel.load()?;
            let records: Vec<InternalMemoryRecord> = jsonl::read(&memory)?;
            let known: std::collections::HashSet<&str> = records.iter().map(|r| r.item_id.as_str()).collect();
            let items: Vec<QAItem> = items.into_iter().filter(|i| known.contains(i.id.as_str())).collect();
            let cfs: Vec<CounterfactualRecord> = match &counterfactuals {
                Some(p) => jsonl::read(p)?,
                None => Vec::new(),
            };
            let model = single_model(&backend)?;
            let cfg = ProbeConfig {
                demos: held_out_demos(&all, &items, demos, sel.seed)?,
                template,
                max_answer_len: max_len,
                k,
                seed: sel.seed,
                ..ProbeConfig::default()
            };
            let run = probe_all(&items, &records, &cfs, &model, &cfg, workers)?;
            for (id, e) in &run.failures {
                log::warn!("item {id}: {e}");
            }
            std::fs::create_dir_all(&out_dir)?;
            jsonl::write(&out_dir.join("probe_results.jsonl"), &run.results)?;
            jsonl::write(&out_dir.join("memory_conflicted.jsonl"), &run.records)?;
            write_json(&out_dir.join("summary.json"), &run.summary)?;
            let md = probe_markdown("probe", &run.summary);
            std::fs::write(out_dir.join("summary.md"), &md)?;
            write_confidence_csv(&out_dir.join("confidence.csv"), &confidence_deltas(&run.records, &run.results))?;
            if items.iter().any(|i| i.popularity.is_some()) {
                popularity_buckets(&items, &DEFAULT_POPULARITY_EDGES)?;
                let obs: Vec<CurveObservation> = run.results.iter().map(CurveObservation::from).collect();
                let curves = popularity_curves(&items, &obs, &DEFAULT_POPULARITY_EDGES)?;
                write_popularity_csv(&out_dir.join("popularity.csv"), &curves)?;
            }
            print!("{md}");
            println!("{} probed, {} failed", run.results.len(), run.failures.len());
        }
        Command::Eval {
            config,
            mode,
            alpha,
            beta,
            seed,
            out_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m.parse::<Mode>().map_err(anyhow::Error::msg)?;
            }
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.output_dir = d;
            }
            let report = run_experiment(&cfg)?;
            write_eval(&report, &cfg.output_dir)?;
            if let RunStatus::Aborted { reason } = &report.status {
                eprintln!("run aborted: {reason}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report {
            report,
            format,
            out_dir,
        } => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let r: RunReport = serde_json::from_str(&text)?;
            if aggregate(&r.records) != r.aggregate {
                bail!("stored aggregates do not match the per-item records");
            }
            match out_dir {
                Some(dir) => {
                    let p = emit_report(&r, format.into(), &dir)?;
                    println!("wrote {}", p.display());
                }
                None => match format {
                    FormatArg::Markdown => print!("{}", render_markdown(&r)),
                    FormatArg::Csv => print!("{}", kconflict::runner::render_csv(&r)?),
                    FormatArg::Json => println!("{}", serde_json::to_string_pretty(&r)?),
                },
            }
        }
        Command::Verify {
            dataset,
            manifests,
            counterfactuals,
        } => {
            let d = verify_dataset(&dataset, manifests.as_deref(), counterfactuals.as_deref());
            for v in &d.violations {
                println!("{v}");
            }
            println!(
                "checked {} items, {} counterfactuals, {} manifests: {} violations",
                d.items,
                d.counterfactuals,
                d.manifests,
                d.violations.len()
            );
            if !d.is_clean() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep { sweep, dry_run } => {
            let (base, axes) = SweepFile::load(&sweep)?;
            let runs = expand_sweep(&base, &axes)?;
            let mut failed = false;
            for run in &runs {
                std::fs::create_dir_all(&run.config.output_dir)?;
                std::fs::write(run.config.output_dir.join("config.toml"), run.config.to_toml())?;
                if dry_run {
                    println!("{}", run.config.output_dir.display());
                    continue;
                }
                println!("== {}", run.name);
                let report = run_experiment(&run.config)?;
                write_eval(&report, &run.config.output_dir)?;
                failed |= matches!(report.status, RunStatus::Aborted { .. });
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Serve {
            backend,
            generator,
            addr,
            threads,
        } => {
            let b = Backends::connect(&BackendsConfig {
                expert: Some(backend),
                generation: generator,
                ..Default::default()
            })?;
            let model = b.expert.clone().context("backend provides no logits")?;
            let served = ServedBackend {
                provider: Some(Arc::clone(&model.provider)),
                tokenizer: Some(Arc::clone(&model.tokenizer)),
                generator: b.generation.clone(),
            };
            let server = MockServer::start(&addr, served, threads)?;
            println!("serving on {}", server.base_url());
            server.wait();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
