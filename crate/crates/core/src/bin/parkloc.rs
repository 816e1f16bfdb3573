use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use parkloc::config::RunConfig;
use parkloc::evaluation::{
    annotations_from_manifest, count_matrix_csv, evaluate, format_ablation_table, format_accuracy, format_summary,
    histogram_csv, normalized_matrix_csv, run_ablation, save_matrix_png, unknown_labels, verdicts_csv, EvalReport,
};
use parkloc::features::{extract, FeatureBackend};
use parkloc::gallery::{build_index, load_index, load_manifest, GalleryIndex};
use parkloc::imaging::load_image;
use parkloc::localizer::{format_report, localize_all, prepare_queries, LocalizationResult};
use parkloc::matcher::match_pyramids;
use parkloc::synth::{generate, SceneSpec};
use parkloc::vehicle_filter::{filter_matches_with, load_detections, DetectionMap, DetectionSet, RemovalRule};

#[derive(Parser)]
#[command(name = "parkloc", version, about = "Visual localization for indoor parking lots")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Overrides {
    /// Feature backend: builtin-hog or injected-file.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Directory of injected `.pklf` feature files.
    #[arg(long, global = true)]
    features_dir: Option<PathBuf>,
    /// Softmax temperature for coarse matching.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Minimum coarse match confidence.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Odd fine refinement window, in fine cells.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Softmax temperature of the refinement heatmap.
    #[arg(long, global = true)]
    fine_temperature: Option<f64>,
    /// Detections scoring below this are ignored.
    #[arg(long, global = true)]
    min_score: Option<f64>,
    /// Comma-separated detection classes treated as vehicles.
    #[arg(long, global = true, value_delimiter = ',')]
    vehicle_classes: Option<Vec<String>>,
    #[arg(long, global = true)]
    use_vehicle_filter: Option<bool>,
    /// either-endpoint or both-endpoints.
    #[arg(long, global = true)]
    removal_rule: Option<String>,
    /// Long side after resizing; 0 keeps the original size.
    #[arg(long, global = true)]
    target_long_side: Option<u32>,
    /// Bins of the second-best ratio histogram.
    #[arg(long, global = true)]
    histogram_bins: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a gallery index from a manifest.
    Index {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match two images and report match counts.
    Match {
        image_a: PathBuf,
        image_b: PathBuf,
        /// Detections for either image, keyed by file stem.
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Write `xa ya xb yb conf` records in original pixels.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Localize every query of a manifest against an index.
    Localize {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        index: PathBuf,
        /// Report file; a JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score localization results against query labels.
    Evaluate {
        /// Report written by `localize` (its JSON sidecar is read).
        #[arg(long, required_unless_present = "ablation")]
        results: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Rerun matching with and without vehicle removal.
        #[arg(long, requires = "index")]
        ablation: bool,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Also render the normalized count matrix, this many px per cell.
        #[arg(long)]
        render: Option<u32>,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    match (o.backend.as_deref(), &o.features_dir) {
        (Some("builtin-hog"), None) => c.backend = FeatureBackend::BuiltinHog,
        (Some("builtin-hog"), Some(_)) => bail!("--features-dir only applies to --backend injected-file"),
        (Some("injected-file") | None, Some(dir)) => c.backend = FeatureBackend::InjectedFile { dir: dir.clone() },
        (Some("injected-file"), None) => match &c.backend {
            FeatureBackend::InjectedFile { .. } => {}
            _ => bail!("--backend injected-file needs --features-dir"),
        },
        (Some(other), _) => bail!("unknown backend {other:?}; expected builtin-hog or injected-file"),
        (None, None) => {}
    }
    macro_rules! take {
        ($($f:ident),*) => { $(if let Some(v) = o.$f.clone() { c.$f = v; })* };
    }
    take!(
        temperature,
        threshold,
        window,
        fine_temperature,
        min_score,
        vehicle_classes,
        use_vehicle_filter,
        target_long_side,
        histogram_bins
    );
    if let Some(rule) = &o.removal_rule {
        c.removal_rule = match rule.as_str() {
            "either-endpoint" => RemovalRule::EitherEndpoint,
            "both-endpoints" => RemovalRule::BothEndpoints,
            other => bail!("unknown removal rule {other:?}; expected either-endpoint or both-endpoints"),
        };
    }
    if let Some(j) = cli.jobs {
        c.jobs = j;
    }
    c.validate()?;
    Ok(c)
}

fn optional_detections(path: Option<&Path>, config: &RunConfig) -> Result<DetectionMap> {
    match path {
        Some(p) => Ok(load_detections(p, &config.detection_filter())?),
        None => Ok(DetectionMap::new()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_echo(config: &RunConfig, body: &str) -> String {
    format!("# config {}\n{body}", config.echo())
}

#[derive(Serialize, Deserialize)]
struct EntryInfo {
    source_id: String,
    section_id: String,
}

#[derive(Serialize, Deserialize)]
struct ResultsFile {
    config: serde_json::Value,
    entries: Vec<EntryInfo>,
    results: Vec<LocalizationResult>,
}

fn entry_infos(index: &GalleryIndex) -> Vec<EntryInfo> {
    index
        .entries
        .iter()
        .map(|e| EntryInfo {
            source_id: e.source_id.clone(),
            section_id: e.section_id.clone(),
        })
        .collect()
}

fn cmd_index(config: &RunConfig, manifest: &Path, detections: Option<&Path>, out: &Path) -> Result<()> {
    let dets = optional_detections(detections, config)?;
    let index = build_index(
        manifest,
        &config.backend,
        config.target_long_side,
        &dets,
        &config.detection_filter(),
    )?;
    index.save(out)?;
    write(&out.join("run_config.toml"), &config_provenance(config))?;
    println!(
        "indexed {} images across {} sections into {}",
        index.len(),
        index.sections.len(),
        out.display()
    );
    Ok(())
}

/// The config as TOML, minus the worker count.
fn config_provenance(config: &RunConfig) -> String {
    let mut text = String::from("# run configuration used to build this index\n");
    for line in config.to_toml().lines() {
        if !line.starts_with("jobs ") {
            text.push_str(line);
            text.push('\n');
        }
    }
    text
}

fn cmd_match(config: &RunConfig, a: &Path, b: &Path, detections: Option<&Path>, dump: Option<&Path>) -> Result<()> {
    let ia = load_image(a, config.target_long_side)?;
    let ib = load_image(b, config.target_long_side)?;
    let pa = extract(&ia, &config.backend)?;
    let pb = extract(&ib, &config.backend)?;
    let matches = match_pyramids(&pa, &pb, &config.match_params())?;
    let dets = optional_detections(detections, config)?;
    let frame = |img: &parkloc::imaging::Image| {
        dets.get(img.source_id())
            .map(|d| d.to_image_frame(img.scale_from_original(), img.width(), img.height()))
            .unwrap_or_else(|| DetectionSet::empty(img.source_id()))
    };
    let (da, db) = (frame(&ia), frame(&ib));
    let kept = if config.use_vehicle_filter {
        filter_matches_with(&matches, &da, &db, config.removal_rule)
    } else {
        matches.clone()
    };
    println!("textured_cells_a {}", pa.coarse.textured_count());
    println!("textured_cells_b {}", pb.coarse.textured_count());
    println!("matches {}", matches.len());
    println!("matches_after_vehicle_removal {}", kept.len());
    println!("clamped {}", kept.iter().filter(|m| m.clamped).count());
    if let Some(path) = dump {
        let (sa, sb) = (ia.scale_from_original(), ib.scale_from_original());
        let original: Vec<_> = kept
            .iter()
            .map(|m| {
                let mut m = *m;
                m.point_a = [m.point_a[0] / sa.0, m.point_a[1] / sa.1];
                m.point_b = [m.point_b[0] / sb.0, m.point_b[1] / sb.1];
                m
            })
            .collect();
        write(
            path,
            &with_echo(config, &parkloc::matcher::format_match_dump(&original)),
        )?;
    }
    Ok(())
}

fn cmd_localize(
    config: &RunConfig,
    queries: &Path,
    detections: Option<&Path>,
    index_dir: &Path,
    out: &Path,
) -> Result<()> {
    let index = load_index(index_dir)?;
    index.compare_query_settings(&config.backend, config.target_long_side);
    let records = load_manifest(queries, 2)?;
    let dets = optional_detections(detections, config)?;
    let inputs = prepare_queries(
        &records,
        &config.backend,
        config.target_long_side,
        &dets,
        &config.detection_filter(),
    )?;
    let results = localize_all(&inputs, &index, &config.localize_options())?;
    write(out, &with_echo(config, &format_report(&results)))?;
    let sidecar = ResultsFile {
        config: serde_json::from_str(&config.echo())?,
        entries: entry_infos(&index),
        results,
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    write(&out.with_extension("json"), &json)?;
    let low = sidecar.results.iter().filter(|r| r.low_confidence).count();
    println!("localized {} queries into {}", sidecar.results.len(), out.display());
    if low > 0 {
        log::warn!("{low} queries had no surviving matches");
    }
    Ok(())
}

fn write_report(
    config: &RunConfig,
    dir: &Path,
    query_ids: &[&str],
    entry_ids: &[&str],
    r: &EvalReport,
    render: Option<u32>,
) -> Result<()> {
    write(&dir.join("summary.txt"), &with_echo(config, &format_summary(r)))?;
    write(&dir.join("verdicts.csv"), &with_echo(config, &verdicts_csv(r)))?;
    write(
        &dir.join("count_matrix.csv"),
        &with_echo(config, &count_matrix_csv(query_ids, entry_ids, &r.count_matrix)),
    )?;
    write(
        &dir.join("normalized_matrix.csv"),
        &with_echo(
            config,
            &normalized_matrix_csv(query_ids, entry_ids, &r.normalized_matrix),
        ),
    )?;
    write(
        &dir.join("ratio_histogram.csv"),
        &with_echo(config, &histogram_csv(&r.ratio_histogram)),
    )?;
    if let Some(cell) = render {
        save_matrix_png(&r.normalized_matrix, cell, dir.join("normalized_matrix.png"))?;
    }
    Ok(())
}

struct EvaluateArgs<'a> {
    results: Option<&'a Path>,
    queries: &'a Path,
    out_dir: &'a Path,
    ablation: bool,
    index: Option<&'a Path>,
    detections: Option<&'a Path>,
    render: Option<u32>,
}

fn cmd_evaluate(config: &RunConfig, args: EvaluateArgs) -> Result<()> {
    let records = load_manifest(args.queries, 2)?;
    let annotations = annotations_from_manifest(&records)?;

    if let Some(results_path) = args.results {
        let sidecar = results_path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?;
        let file: ResultsFile =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", sidecar.display()))?;
        let sections = file.entries.iter().map(|e| e.section_id.clone()).collect();
        let unknown = unknown_labels(&annotations, &sections);
        if !unknown.is_empty() {
            log::warn!("labels not among gallery sections: {}", unknown.join(", "));
        }
        let report = evaluate(&file.results, &annotations, config.histogram_bins)?;
        let qids: Vec<&str> = file.results.iter().map(|r| r.query_id.as_str()).collect();
        let eids: Vec<&str> = file.entries.iter().map(|e| e.source_id.as_str()).collect();
        write_report(config, args.out_dir, &qids, &eids, &report, args.render)?;
        println!(
            "accuracy {} ({}/{})",
            format_accuracy(report.accuracy),
            report.n_correct,
            report.n_queries
        );
    }

    if args.ablation {
        let index_dir = args.index.expect("clap enforces --index with --ablation");
        let index = load_index(index_dir)?;
        index.compare_query_settings(&config.backend, config.target_long_side);
        let dets = optional_detections(args.detections, config)?;
        let inputs = prepare_queries(
            &records,
            &config.backend,
            config.target_long_side,
            &dets,
            &config.detection_filter(),
        )?;
        let ab = run_ablation(
            &inputs,
            &annotations,
            &index,
            &config.match_params(),
            config.removal_rule,
            config.histogram_bins,
        )?;
        let table = format_ablation_table(&ab);
        write(&args.out_dir.join("ablation.txt"), &with_echo(config, &table))?;
        let csv = format!(
            "arm,accuracy,correct,queries\nwithout vehicle remover,{},{},{}\nfull,{},{},{}\n",
            format_accuracy(ab.report_without.accuracy),
            ab.report_without.n_correct,
            ab.report_without.n_queries,
            format_accuracy(ab.report_with.accuracy),
            ab.report_with.n_correct,
            ab.report_with.n_queries
        );
        write(&args.out_dir.join("ablation.csv"), &with_echo(config, &csv))?;
        let qids: Vec<&str> = ab.with_filter.iter().map(|r| r.query_id.as_str()).collect();
        let eids: Vec<&str> = index.entries.iter().map(|e| e.source_id.as_str()).collect();
        write_report(
            config,
            &args.out_dir.join("with_filter"),
            &qids,
            &eids,
            &ab.report_with,
            args.render,
        )?;
        write_report(
            config,
            &args.out_dir.join("without_filter"),
            &qids,
            &eids,
            &ab.report_without,
            args.render,
        )?;
        print!("{table}");
    }
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = SceneSpec::load(spec_path)?;
    let o = generate(&spec, out)?;
    println!(
        "wrote {} gallery and {} query images to {}",
        o.n_gallery,
        o.n_queries,
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build()?;
    pool.install(|| match &cli.command {
        Command::Index {
            manifest,
            detections,
            out,
        } => cmd_index(&config, manifest, detections.as_deref(), out),
        Command::Match {
            image_a,
            image_b,
            detections,
            dump,
        } => cmd_match(&config, image_a, image_b, detections.as_deref(), dump.as_deref()),
        Command::Localize {
            queries,
            detections,
            index,
            out,
        } => cmd_localize(&config, queries, detections.as_deref(), index, out),
        Command::Evaluate {
            results,
            queries,
            out_dir,
            ablation,
            index,
            detections,
            render,
        } => cmd_evaluate(
            &config,
            EvaluateArgs {
                results: results.as_deref(),
                queries,
                out_dir,
                ablation: *ablation,
                index: index.as_deref(),
                detections: detections.as_deref(),
                render: *render,
            },
        ),
        Command::Synth { spec, out } => cmd_synth(spec, out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
