use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pie_core::eval::EvalReport;
use pie_core::io::{read_features, write_features, Split};
use pie_core::metric::{read_metric, sample_pairs, write_metric, kissme_fit, MetricModel, Ridge};
use pie_core::net::{gradcheck, read_params, write_params, ConfigFile, PieLayer};
use pie_core::pipeline::{
    evaluate_split, extract_features, load_inputs, num_train_identities, run_pipeline, train_split, write_poseboxes,
    write_run, Dataset, Experiment, MetricChoice, PipelineOptions, PAIR_STREAM,
};
use pie_core::posebox::BoxType;
use pie_core::report::{emit_report, read_run_report, write_cmc, write_run_report};
use pie_core::seed::mix_seed;
use pie_core::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(name = "pie", version, about = "Pose-aligned person re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest CSV (image_path,identity,camera,split).
    #[arg(long)]
    manifest: PathBuf,
    /// Keypoint annotations, one JSON object per line.
    #[arg(long)]
    keypoints: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build a PoseBox for every manifest image.
    Posebox {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "type", value_parser = parse_box_type)]
        box_type: BoxType,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the fusion network on the training split.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Directory of PoseBoxes written by `pie posebox`.
        #[arg(long)]
        posebox_dir: Option<PathBuf>,
        /// Flat key=value network and training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract retrieval embeddings for one split.
    Extract {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        posebox_dir: Option<PathBuf>,
        #[arg(long, default_value = "concat")]
        layer: String,
        #[arg(long, default_value = "query")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on toy networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Fit a KISSME metric on features of one split.
    KissmeFit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Ridge weight, or `auto`.
        #[arg(long, default_value = "auto")]
        reg: String,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate query features against gallery features.
    Eval {
        #[arg(long)]
        query_feats: PathBuf,
        #[arg(long)]
        gallery_feats: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `euclid` or `kissme:PATH`.
        #[arg(long, default_value = "euclid")]
        metric: String,
        #[arg(long)]
        cmc_out: Option<PathBuf>,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Generate a synthetic benchmark.
    Synth {
        #[arg(long, default_value_t = 100)]
        ids: usize,
        #[arg(long, default_value_t = 4)]
        per_id: usize,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        #[arg(long, default_value_t = 20.0)]
        pose_jitter: f64,
        #[arg(long, default_value_t = 12.0)]
        v_misalign: f64,
        #[arg(long, default_value_t = 0.15)]
        conf_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PoseBox, train, extract and evaluate in one go.
    Run {
        /// Dataset directory holding manifest.csv and keypoints.jsonl.
        #[arg(long, conflicts_with_all = ["manifest", "keypoints"])]
        data: Option<PathBuf>,
        #[arg(long, requires = "keypoints")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        experiment: String,
        #[arg(long, default_value = "2", value_parser = parse_box_type)]
        box_type: BoxType,
        #[arg(long, default_value = "euclid")]
        metric: String,
        /// Overrides the default network and training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "concat")]
        layer: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine run reports under a directory into one table and CMC plot.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_box_type(s: &str) -> Result<BoxType, String> {
    let n: u32 = s.parse().map_err(|_| format!("box type must be 1, 2 or 3, got {s:?}"))?;
    BoxType::from_number(n).map_err(|e| e.to_string())
}

fn parse_layer(s: &str) -> Result<PieLayer> {
    Ok(s.parse::<PieLayer>()?)
}

fn parse_ridge(s: &str) -> Result<Ridge> {
    if s == "auto" {
        return Ok(Ridge::Auto);
    }
    let r: f64 = s.parse().with_context(|| format!("ridge weight {s:?}"))?;
    Ok(Ridge::Fixed(r))
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ConfigFile::parse(&text)?)
        }
        None => Ok(ConfigFile::default()),
    }
}

fn cmd_posebox(data: &DataArgs, box_type: BoxType, out: &Path, seed: u64) -> Result<()> {
    let ds = Dataset::load(&data.manifest, &data.keypoints)?;
    let flags = write_poseboxes(&ds, box_type, seed, out)?;
    let mut csv = String::from("image_path,part\n");
    for (img, part) in &flags {
        let _ = writeln!(csv, "{img},{part}");
    }
    fs::write(out.join("flags.csv"), csv)?;
    println!("wrote {} PoseBoxes to {} ({} degenerate parts)", ds.records().len(), out.display(), flags.len());
    Ok(())
}

fn cmd_train(data: &DataArgs, posebox_dir: Option<&Path>, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = read_config(config)?;
    let ds = Dataset::load(&data.manifest, &data.keypoints)?;
    let n_train = num_train_identities(&ds);
    if !cfg.n3_given {
        cfg.net.n3 = n_train;
    }
    if cfg.net.streams.pb && posebox_dir.is_none() {
        bail!("the PoseBox stream is enabled; pass --posebox-dir");
    }
    let inputs = load_inputs(&ds, &cfg.net, posebox_dir)?;
    let result = train_split(&ds, &inputs, &cfg.net, &cfg.train, seed)?;
    write_params(out, &result.params)?;
    for (e, l) in result.loss_history.iter().enumerate() {
        println!("epoch {e:>3}  loss {l:.6}");
    }
    Ok(())
}

fn cmd_extract(params: &Path, data: &DataArgs, posebox_dir: Option<&Path>, layer: &str, split: &str, out: &Path) -> Result<()> {
    let params = read_params(params)?;
    let layer = parse_layer(layer)?;
    let split: Split = split.parse()?;
    let ds = Dataset::load(&data.manifest, &data.keypoints)?;
    if params.config.streams.pb && posebox_dir.is_none() {
        bail!("the PoseBox stream is enabled; pass --posebox-dir");
    }
    let inputs = load_inputs(&ds, &params.config, posebox_dir)?;
    let feats = extract_features(&params, &inputs, &ds.manifest.split_indices(split), layer)?;
    write_features(out, &feats)?;
    println!("wrote {}x{} features to {}", feats.n(), feats.dim(), out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, count: usize, tolerance: f64) -> Result<bool> {
    let reports = gradcheck::run_suite(seed, count)?;
    let mut ok = true;
    for r in &reports {
        let pass = r.passed(tolerance);
        ok &= pass;
        println!(
            "{:<20} {:>6} params  max rel error {:.3e} at {}  {}",
            r.label,
            r.checked,
            r.max_rel_error,
            r.worst,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_kissme_fit(features: &Path, manifest: &Path, reg: &str, split: &str, seed: u64, out: &Path) -> Result<()> {
    let feats = read_features(features)?;
    let manifest = pie_core::io::parse_manifest(manifest)?;
    let split: Split = split.parse()?;
    let records: Vec<_> = manifest
        .split_indices(split)
        .into_iter()
        .map(|i| manifest.records()[i].clone())
        .collect();
    if records.len() != feats.n() {
        bail!("{} features but {} {split} records", feats.n(), records.len());
    }
    let ids: Vec<u32> = records.iter().map(|r| r.identity).collect();
    let cams: Vec<u32> = records.iter().map(|r| r.camera).collect();
    let pairs = sample_pairs(&ids, &cams, mix_seed(seed, PAIR_STREAM))?;
    let model = kissme_fit(&feats, &pairs, parse_ridge(reg)?)?;
    write_metric(out, &model)?;
    println!(
        "fitted {d}x{d} metric from {} similar / {} dissimilar pairs",
        pairs.similar.len(),
        pairs.dissimilar.len(),
        d = model.dim()
    );
    Ok(())
}

fn parse_metric_arg(s: &str, dim: usize) -> Result<(MetricModel, String)> {
    if s == "euclid" {
        return Ok((MetricModel::euclidean(dim), "euclid".into()));
    }
    match s.strip_prefix("kissme:") {
        Some(path) => Ok((read_metric(path)?, "kissme".into())),
        None => bail!("metric must be `euclid` or `kissme:PATH`, got {s:?}"),
    }
}

fn print_summary(label: &str, r: &EvalReport) {
    println!(
        "{label}: rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  rank20 {:.4}  mAP {:.4}  ({} queries, {} skipped)",
        r.cmc.at(1),
        r.cmc.at(5),
        r.cmc.at(10),
        r.cmc.at(20),
        r.map,
        r.per_query_ap.len(),
        r.skipped.len()
    );
}

fn cmd_eval(
    query: &Path,
    gallery: &Path,
    manifest: &Path,
    metric: &str,
    cmc_out: Option<&Path>,
    report_out: Option<&Path>,
) -> Result<()> {
    let q = read_features(query)?;
    let g = read_features(gallery)?;
    let manifest = pie_core::io::parse_manifest(manifest)?;
    let (model, metric_name) = parse_metric_arg(metric, q.dim())?;
    let ds = Dataset {
        manifest,
        images: Vec::new(),
        joints: Vec::new(),
    };
    let report = evaluate_split(&ds, &q, &g, &model)?;
    print_summary("eval", &report);
    if let Some(p) = cmc_out {
        write_cmc(p, &report.cmc)?;
    }
    if let Some(p) = report_out {
        let mut cfg = BTreeMap::new();
        cfg.insert("metric".to_string(), metric_name);
        cfg.insert("query_feats".to_string(), query.display().to_string());
        cfg.insert("gallery_feats".to_string(), gallery.display().to_string());
        write_run_report(p, "eval", &report, &cfg)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    data: Option<&Path>,
    manifest: Option<&Path>,
    keypoints: Option<&Path>,
    experiment: &str,
    box_type: BoxType,
    metric: &str,
    config: Option<&Path>,
    layer: &str,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (manifest, keypoints) = match (data, manifest, keypoints) {
        (Some(d), _, _) => (d.join("manifest.csv"), d.join("keypoints.jsonl")),
        (None, Some(m), Some(k)) => (m.to_path_buf(), k.to_path_buf()),
        _ => bail!("pass --data DIR or both --manifest and --keypoints"),
    };
    let experiment: Experiment = experiment.parse()?;
    let metric: MetricChoice = metric.parse()?;
    let cfg = read_config(config)?;
    let opts = PipelineOptions {
        net: cfg.net,
        train: cfg.train,
        layer: parse_layer(layer)?,
        ..PipelineOptions::default()
    };
    let ds = Dataset::load(&manifest, &keypoints)?;
    let result = run_pipeline(&ds, experiment, box_type, metric, seed, &opts)?;
    write_run(out, &result)?;
    print_summary(&format!("{} ({metric})", result.variant), &result.report);
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.csv") {
            found.push(p);
        }
    }
    Ok(())
}

fn cmd_report(input: &Path, out: &Path) -> Result<()> {
    let mut paths = Vec::new();
    find_reports(input, &mut paths)?;
    if paths.is_empty() {
        bail!("no report.csv files under {}", input.display());
    }
    let mut reports = Vec::new();
    for p in paths {
        let (label, r) = read_run_report(&p)?;
        // runs are named after their directory when nested
        let name = p
            .parent()
            .and_then(|d| d.strip_prefix(input).ok())
            .map(|d| d.display().to_string())
            .filter(|d| !d.is_empty())
            .unwrap_or(label);
        reports.push((name, r));
    }
    let svg = emit_report(&reports, out)?;
    println!("wrote {} ({} configs) and {}", out.display(), reports.len(), svg.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Posebox {
            data,
            box_type,
            out,
            seed,
        } => cmd_posebox(&data, box_type, &out, seed)?,
        Command::Train {
            data,
            posebox_dir,
            config,
            seed,
            out,
        } => cmd_train(&data, posebox_dir.as_deref(), config.as_deref(), seed, &out)?,
        Command::Extract {
            params,
            data,
            posebox_dir,
            layer,
            split,
            out,
        } => cmd_extract(&params, &data, posebox_dir.as_deref(), &layer, &split, &out)?,
        Command::Gradcheck { seed, count, tolerance } => return cmd_gradcheck(seed, count, tolerance),
        Command::KissmeFit {
            features,
            manifest,
            reg,
            split,
            seed,
            out,
        } => cmd_kissme_fit(&features, &manifest, &reg, &split, seed, &out)?,
        Command::Eval {
            query_feats,
            gallery_feats,
            manifest,
            metric,
            cmc_out,
            report_out,
        } => cmd_eval(
            &query_feats,
            &gallery_feats,
            &manifest,
            &metric,
            cmc_out.as_deref(),
            report_out.as_deref(),
        )?,
        Command::Synth {
            ids,
            per_id,
            cameras,
            pose_jitter,
            v_misalign,
            conf_noise,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                n_ids: ids,
                images_per_id: per_id,
                n_cameras: cameras,
                pose_jitter,
                v_misalign,
                conf_noise,
                seed,
            };
            let d = generate(&cfg)?;
            d.write(&out)?;
            println!("wrote {} images to {}", d.samples.len(), out.display());
        }
        Command::Run {
            data,
            manifest,
            keypoints,
            experiment,
            box_type,
            metric,
            config,
            layer,
            seed,
            out,
        } => cmd_run(
            data.as_deref(),
            manifest.as_deref(),
            keypoints.as_deref(),
            &experiment,
            box_type,
            &metric,
            config.as_deref(),
            &layer,
            seed,
            &out,
        )?,
        Command::Report { input, out } => cmd_report(&input, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
