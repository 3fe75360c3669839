use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use cgbc_core::classifier::{
    classify_all, read_labels, summarize, write_labels, ClassPromptSet, ClassificationRecord,
};
use cgbc_core::concepts::llm::API_KEY_ENV;
use cgbc_core::concepts::{Composition, ConceptPool, LlmClient, LlmMode, PoolExport};
use cgbc_core::diagnostics::{describe, write_qq_csv, DistributionReport, ShapeFlags};
use cgbc_core::dpp::SelectionReport;
use cgbc_core::embedding::{
    dot, load_container, manifest_path, save_container, EmbeddingContainer,
};
use cgbc_core::fixtures::{
    make_synthetic, pets_classes, pets_images, SyntheticDatasetSpec, PETS_DIM, PETS_LLM_FIXTURES,
    PETS_MODEL, PETS_SEED,
};
use cgbc_core::neighborhoods::{NeighborReport, NeighborhoodTable};
use cgbc_core::pipeline::{self, EmbedderConfig, PipelineConfig, PromptStyleKind};
use cgbc_core::simulator::{
    check_goodness, default_risk_grid, run_excess_risk, run_theorem1_sweep, GoodnessConfig,
    SweepConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::{Cli, Command, Dataset, Overrides, Preset, Switch};

/// Splits failures into usage errors (exit 1) and data errors (exit 2).
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

pub fn run(cli: Cli) -> Result<String, Failure> {
    let mut cfg = build_config(&cli.overrides).map_err(Failure::Usage)?;
    match cli.command {
        Command::Neighbors => neighbors(&cfg),
        Command::Gen { descriptive } => {
            if descriptive {
                cfg.prompt_style = PromptStyleKind::Descriptive;
            }
            gen(&cfg)
        }
        Command::Compose => compose(&cfg),
        Command::Select => select(&cfg),
        Command::Classify => classify(&cfg),
        Command::Evaluate => evaluate(&cfg),
        Command::Simulate { preset, trials } => simulate(&cfg, preset, trials),
        Command::Diagnose { image } => diagnose(&cfg, image.as_deref()),
        Command::Synth { preset } => synth(&cfg, preset),
    }
}

fn build_config(o: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = o.$flag.clone() { $field = v; })*
        };
    }
    set! {
        seed => cfg.seed,
        top_h => cfg.top_h,
        atoms => cfg.atoms,
        per_call => cfg.per_call,
        atoms_per_prompt => cfg.atoms_per_prompt,
        num_combos => cfg.num_combos,
        select_size => cfg.select_size,
        lambda => cfg.lambda,
        slope => cfg.slope,
        llm_model => cfg.llm.model,
        out => cfg.paths.out,
    }
    if let Some(a) = &o.aggregator {
        cfg.aggregator = a.parse().map_err(|e| anyhow!("--aggregator: {e}"))?;
    }
    if let Some(p) = &o.prob_mode {
        cfg.prob_mode = p.parse().map_err(|e: String| anyhow!("--prob-mode: {e}"))?;
    }
    if let Some(d) = o.dpp {
        cfg.dpp = d == Switch::On;
    }
    if let Some(e) = &o.llm_endpoint {
        cfg.llm.endpoint = e.clone();
        cfg.llm.mode = LlmMode::Live;
    }
    if let Some(p) = &o.replay {
        cfg.llm.mode = LlmMode::Replay;
        cfg.llm.fixture_path = Some(p.clone());
    }
    if let Some(p) = &o.record {
        cfg.llm.mode = LlmMode::Record;
        cfg.llm.fixture_path = Some(p.clone());
    }
    for (flag, field) in [
        (&o.classes, &mut cfg.paths.classes),
        (&o.images, &mut cfg.paths.images),
        (&o.labels, &mut cfg.paths.labels),
        (&o.prompts, &mut cfg.paths.prompts),
    ] {
        if flag.is_some() {
            field.clone_from(flag);
        }
    }
    cfg.llm.api_key = std::env::var(API_KEY_ENV).ok();
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref().ok_or_else(|| {
        usage(format!(
            "{flag} is required (or set it under \"paths\" in --config)"
        ))
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load(path: &Path) -> Result<EmbeddingContainer> {
    load_container(path).with_context(|| format!("loading {}", path.display()))
}

fn neighbors(cfg: &PipelineConfig) -> Result<String, Failure> {
    let classes = load(required(&cfg.paths.classes, "--classes")?)?;
    let table = pipeline::neighbors(cfg, &classes).map_err(anyhow::Error::from)?;
    let path = cfg.paths.out.join("neighbors.json");
    write_json(&path, &table.report())?;
    Ok(format!(
        "neighbors: {} classes, {} neighbors each{} -> {}",
        table.len(),
        table.neighbors.first().map_or(0, Vec::len),
        if table.clamped { " (clamped)" } else { "" },
        path.display()
    ))
}

fn neighbor_table(cfg: &PipelineConfig) -> Result<NeighborhoodTable, Failure> {
    let saved = cfg.paths.out.join("neighbors.json");
    if saved.is_file() {
        let report: Vec<NeighborReport> = read_json(&saved)?;
        return NeighborhoodTable::from_report(&report)
            .ok_or_else(|| Failure::Data(anyhow!("{} names unknown classes", saved.display())));
    }
    let classes = load(required(&cfg.paths.classes, "--classes")?)?;
    Ok(pipeline::neighbors(cfg, &classes).map_err(anyhow::Error::from)?)
}

fn gen(cfg: &PipelineConfig) -> Result<String, Failure> {
    let table = neighbor_table(cfg)?;
    let llm = LlmClient::from_config(&cfg.llm_config()).map_err(|e| usage(e.to_string()))?;
    let embedder = cfg.embedder.build().map_err(anyhow::Error::from)?;
    let pools = pipeline::generate_pools(cfg, &table, &llm, embedder.as_ref())
        .map_err(anyhow::Error::from)?;
    let exports: Vec<PoolExport> = pools.iter().map(ConceptPool::export).collect();
    let path = cfg.paths.out.join("pools.json");
    write_json(&path, &exports)?;
    Ok(format!(
        "gen: {} pools, {} atoms from {} calls -> {}",
        pools.len(),
        pools.iter().map(ConceptPool::len).sum::<usize>(),
        pools.iter().map(|p| p.call_log.len()).sum::<usize>(),
        path.display()
    ))
}

fn compose(cfg: &PipelineConfig) -> Result<String, Failure> {
    let exports: Vec<PoolExport> = read_json(&cfg.paths.out.join("pools.json"))?;
    let pools: Vec<ConceptPool> = exports.into_iter().map(ConceptPool::from).collect();
    let comps = pipeline::compose_pools(cfg, &pools).map_err(anyhow::Error::from)?;
    let path = cfg.paths.out.join("composites.json");
    write_json(&path, &comps)?;
    Ok(format!(
        "compose: {} classes, {} composites, {} exhausted -> {}",
        comps.len(),
        comps.iter().map(|c| c.composites.len()).sum::<usize>(),
        comps.iter().filter(|c| c.exhausted).count(),
        path.display()
    ))
}

fn select(cfg: &PipelineConfig) -> Result<String, Failure> {
    let comps: Vec<Composition> = read_json(&cfg.paths.out.join("composites.json"))?;
    let embedder = cfg.embedder.build().map_err(anyhow::Error::from)?;
    let (reports, containers) =
        pipeline::select_prompts(cfg, &comps, embedder.as_ref()).map_err(anyhow::Error::from)?;
    let dir = cfg.prompts_dir();
    for (report, c) in reports.iter().zip(&containers) {
        save_container(c, manifest_path(&dir, &report.class))
            .with_context(|| format!("writing prompts for {}", report.class))?;
    }
    let path = cfg.paths.out.join("selection.json");
    write_json(&path, &reports)?;
    Ok(format!(
        "select: {} classes, {} prompts (dpp {}) -> {}",
        reports.len(),
        reports.iter().map(|r| r.selected.len()).sum::<usize>(),
        if cfg.dpp { "on" } else { "off" },
        path.display()
    ))
}

fn class_names(cfg: &PipelineConfig) -> Result<Vec<String>, Failure> {
    if let Some(path) = &cfg.paths.classes {
        return Ok(load(path)?.names().to_vec());
    }
    let saved = cfg.paths.out.join("selection.json");
    if saved.is_file() {
        let reports: Vec<SelectionReport> = read_json(&saved)?;
        return Ok(reports.into_iter().map(|r| r.class).collect());
    }
    Err(usage("--classes is required (or run select first)"))
}

fn prompt_set(cfg: &PipelineConfig) -> Result<ClassPromptSet, Failure> {
    let names = class_names(cfg)?;
    let dir = cfg.prompts_dir();
    let prompts = names
        .iter()
        .map(|n| load(&manifest_path(&dir, n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pipeline::prompt_set(names, prompts).map_err(anyhow::Error::from)?)
}

fn score(
    cfg: &PipelineConfig,
) -> Result<
    (
        EmbeddingContainer,
        ClassPromptSet,
        Vec<ClassificationRecord>,
    ),
    Failure,
> {
    let prompts = prompt_set(cfg)?;
    let images = load(required(&cfg.paths.images, "--images")?)?;
    let records = classify_all(
        &images,
        &prompts,
        &cfg.aggregator_config(),
        cfg.prob_mode,
        cfg.logit_scale,
    )
    .map_err(anyhow::Error::from)?;
    Ok((images, prompts, records))
}

fn write_records(path: &Path, records: &[ClassificationRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn classify(cfg: &PipelineConfig) -> Result<String, Failure> {
    let (_, prompts, records) = score(cfg)?;
    let path = cfg.paths.out.join("results.jsonl");
    write_records(&path, &records)?;
    Ok(format!(
        "classify: {} images over {} classes ({}) -> {}",
        records.len(),
        prompts.num_classes(),
        cfg.aggregator,
        path.display()
    ))
}

fn evaluate(cfg: &PipelineConfig) -> Result<String, Failure> {
    let labels_path = required(&cfg.paths.labels, "--labels")?.to_path_buf();
    let (images, prompts, records) = score(cfg)?;
    let labels = read_labels(&labels_path, &images).map_err(anyhow::Error::from)?;
    let report =
        summarize(&records, &labels, prompts.num_classes()).map_err(anyhow::Error::from)?;
    write_records(&cfg.paths.out.join("results.jsonl"), &records)?;
    let path = cfg.paths.out.join("report.json");
    write_json(&path, &report)?;
    Ok(format!(
        "evaluate: top-1 {:.4} ({}/{}), mean rho {:.4} ({}) -> {}",
        report.top1_accuracy,
        report.correct,
        report.n_images,
        report.mean_rho,
        cfg.aggregator,
        path.display()
    ))
}

fn simulate(
    cfg: &PipelineConfig,
    preset: Preset,
    trials: Option<usize>,
) -> Result<String, Failure> {
    let out = &cfg.paths.out;
    match preset {
        Preset::Theorem1 => {
            let mut sweep = SweepConfig {
                seed: cfg.seed,
                lambda: cfg.lambda,
                slopes: vec![cfg.slope],
                ..SweepConfig::default()
            };
            if let Some(t) = trials {
                sweep.trials = t;
            }
            let report = run_theorem1_sweep(&sweep).map_err(|e| usage(e.to_string()))?;
            let csv_path = out.join("theorem1.csv");
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let file = fs::File::create(&csv_path)
                .with_context(|| format!("writing {}", csv_path.display()))?;
            report.write_csv(file).map_err(anyhow::Error::from)?;
            write_json(&out.join("theorem1.json"), &report)?;
            let fit = &report.fits[0];
            Ok(format!(
                "simulate theorem1: {} cells, log-log slope at rho=0 {} -> {}",
                report.cells.len(),
                fit.log_log_slope_rho0
                    .map_or("n/a".into(), |s| format!("{s:.3}")),
                csv_path.display()
            ))
        }
        Preset::Goodness => {
            let mut g = GoodnessConfig {
                seed: cfg.seed,
                ..GoodnessConfig::default()
            };
            if let Some(t) = trials {
                g.trials = t;
            }
            let rows = check_goodness(&g).map_err(|e| usage(e.to_string()))?;
            let path = out.join("goodness.json");
            write_json(&path, &json!({ "config": g, "rows": rows }))?;
            let worst = rows
                .iter()
                .map(|r| r.max_mean_ratio.max(r.max_var_ratio))
                .fold(0.0, f64::max);
            Ok(format!(
                "simulate goodness: {} alphas, largest ratio {worst:.3} -> {}",
                rows.len(),
                path.display()
            ))
        }
        Preset::ExcessRisk => {
            let grid = default_risk_grid(trials.unwrap_or(2000), cfg.seed);
            let mut cells = Vec::with_capacity(grid.len());
            for spec in grid {
                let report = run_excess_risk(&spec).map_err(|e| usage(e.to_string()))?;
                cells.push(json!({ "spec": spec, "report": report }));
            }
            let holding = cells
                .iter()
                .filter(|c| c["report"]["holds"].as_bool() == Some(true))
                .count();
            let path = out.join("excess_risk.json");
            write_json(&path, &cells)?;
            Ok(format!(
                "simulate excess-risk: bound holds on {holding}/{} cells -> {}",
                cells.len(),
                path.display()
            ))
        }
    }
}

#[derive(Serialize)]
struct ClassDiagnostics<'a> {
    class: &'a str,
    n: usize,
    mean: f64,
    std: f64,
    skewness: f64,
    excess_kurtosis: f64,
    flags: ShapeFlags,
}

fn diagnose(cfg: &PipelineConfig, image: Option<&str>) -> Result<String, Failure> {
    let prompts = prompt_set(cfg)?;
    let images = load(required(&cfg.paths.images, "--images")?)?;
    let rows: Vec<usize> = match image {
        Some(name) => vec![images
            .index_of(name)
            .ok_or_else(|| Failure::Data(anyhow!("no image named {name:?}")))?],
        None => (0..images.count()).collect(),
    };
    let mut reports: Vec<(String, DistributionReport)> = Vec::new();
    for (c, class) in prompts.class_names().iter().enumerate() {
        let p = prompts.prompts(c);
        let scores: Vec<f64> = rows
            .iter()
            .flat_map(|&i| {
                let img = images.row(i);
                p.rows().map(move |row| dot(img, row))
            })
            .collect();
        let r = describe(&scores).with_context(|| format!("class {class}"))?;
        reports.push((class.clone(), r));
    }
    let summary: Vec<ClassDiagnostics> = reports
        .iter()
        .map(|(class, r)| ClassDiagnostics {
            class,
            n: r.n,
            mean: r.mean,
            std: r.std,
            skewness: r.skewness,
            excess_kurtosis: r.excess_kurtosis,
            flags: r.flags,
        })
        .collect();
    let path = cfg.paths.out.join("diagnostics.json");
    write_json(&path, &summary)?;
    let qq_path = cfg.paths.out.join("qq.csv");
    let file =
        fs::File::create(&qq_path).with_context(|| format!("writing {}", qq_path.display()))?;
    let refs: Vec<(String, &DistributionReport)> =
        reports.iter().map(|(c, r)| (c.clone(), r)).collect();
    write_qq_csv(file, &refs).map_err(anyhow::Error::from)?;
    Ok(format!(
        "diagnose: {} classes, {} skewed, {} heavy-tailed -> {}",
        summary.len(),
        summary.iter().filter(|d| d.flags.skewed).count(),
        summary.iter().filter(|d| d.flags.heavy_tailed).count(),
        path.display()
    ))
}

fn synth(cfg: &PipelineConfig, preset: Dataset) -> Result<String, Failure> {
    let out = &cfg.paths.out;
    match preset {
        Dataset::Planted => {
            let spec = SyntheticDatasetSpec {
                seed: cfg.seed,
                ..SyntheticDatasetSpec::default()
            };
            let data = make_synthetic(&spec).map_err(anyhow::Error::from)?;
            data.write(out).map_err(anyhow::Error::from)?;
            let run = json!({
                "seed": cfg.seed,
                "paths": {
                    "classes": "classes.manifest.json",
                    "images": "images.manifest.json",
                    "labels": "labels.json",
                    "prompts": "prompts",
                    "out": "."
                }
            });
            write_json(&out.join("run.json"), &run)?;
            write_json(&out.join("spec.json"), &spec)?;
            Ok(format!(
                "synth planted: {} classes, {} prompts each, {} images -> {}",
                spec.k,
                spec.m_per_class,
                spec.n_images,
                out.join("run.json").display()
            ))
        }
        Dataset::Pets => {
            let classes = pets_classes();
            let (images, labels) = pets_images(6, cfg.seed);
            save_container(&classes, manifest_path(out, "classes")).map_err(anyhow::Error::from)?;
            save_container(&images, manifest_path(out, "images")).map_err(anyhow::Error::from)?;
            write_labels(out.join("labels.json"), &images, &labels).map_err(anyhow::Error::from)?;
            fs::write(out.join("pets_llm.json"), PETS_LLM_FIXTURES)
                .with_context(|| format!("writing {}", out.display()))?;
            let run = json!({
                "seed": cfg.seed,
                "atoms": 12,
                "max_calls": 4,
                "num_combos": 64,
                "select_size": 16,
                "embedder": EmbedderConfig::Hash { dim: PETS_DIM, seed: PETS_SEED },
                "llm": { "mode": "replay", "model": PETS_MODEL, "fixture_path": "pets_llm.json" },
                "paths": {
                    "classes": "classes.manifest.json",
                    "images": "images.manifest.json",
                    "labels": "labels.json",
                    "out": "."
                }
            });
            write_json(&out.join("run.json"), &run)?;
            Ok(format!(
                "synth pets: {} classes, {} images -> {}",
                classes.count(),
                images.count(),
                out.join("run.json").display()
            ))
        }
    }
}
