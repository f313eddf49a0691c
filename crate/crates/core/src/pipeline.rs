//! End-to-end runs: PoseBox construction, training, embedding extraction and
//! evaluation, for single experiments and ablation suites.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::io::{
    load_png, parse_keypoints, parse_manifest, resolve_image_path, save_png, write_features, DatasetManifest,
    FeatureMatrix, ImageTensor, JointSet, Provenance, SampleRecord, Split, NUM_JOINTS,
};
use crate::metric::{kissme_fit, l2_normalize, sample_pairs, write_metric, MetricModel, Ridge};
use crate::net::{
    extract_pie, image_to_input, train, write_params, NetConfig, NetInput, NetParams, PieLayer, TrainConfig,
    TrainResult, TrainSample, Variant,
};
use crate::posebox::{build_posebox, BoxType, PartName, PoseBoxTemplate};
use crate::report::write_run_report;
use crate::seed::mix_seed;
use crate::synth::SynthDataset;

const POSEBOX_STREAM: u64 = 0x706f_7365;
/// Seed stream for KISSME pair sampling.
pub const PAIR_STREAM: u64 = 0x7061_6972;

/// Images and annotations parallel to the manifest records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
    pub joints: Vec<JointSet>,
}

impl Dataset {
    /// Loads every manifest image (relative to the manifest) and its keypoints.
    pub fn load(manifest_path: impl AsRef<Path>, keypoints_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = parse_manifest(manifest_path)?;
        let mut keypoints = parse_keypoints(keypoints_path)?;
        let joints = manifest
            .records()
            .iter()
            .map(|r| {
                keypoints
                    .remove(&r.image_path)
                    .ok_or_else(|| Error::Validation(format!("no keypoints for {}", r.image_path)))
            })
            .collect::<Result<Vec<_>>>()?;
        let images = manifest
            .records()
            .par_iter()
            .map(|r| load_png(resolve_image_path(manifest_path, &r.image_path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            manifest,
            images,
            joints,
        })
    }

    pub fn from_synth(d: &SynthDataset) -> Self {
        Dataset {
            manifest: d.manifest.clone(),
            images: d.samples.iter().map(|s| s.image.clone()).collect(),
            joints: d.samples.iter().map(|s| s.joints.clone()).collect(),
        }
    }

    pub fn records(&self) -> &[SampleRecord] {
        self.manifest.records()
    }
}

/// Network-ready buffers for every record, in manifest order.
#[derive(Debug, Clone)]
pub struct PreparedInputs {
    pub img: Vec<Vec<f64>>,
    /// Present when PoseBoxes were built.
    pub pb: Option<Vec<Vec<f64>>>,
    pub conf: Vec<[f64; NUM_JOINTS]>,
    /// Parts left blank across all PoseBoxes.
    pub flagged_parts: usize,
}

fn posebox_seed(seed: u64, record: usize) -> u64 {
    mix_seed(mix_seed(seed, POSEBOX_STREAM), record as u64)
}

/// Resizes every image to the network input and, if `box_type` is given,
/// builds its PoseBox with a per-record seed derived from `seed`.
pub fn prepare_inputs(ds: &Dataset, net: &NetConfig, box_type: Option<BoxType>, seed: u64) -> PreparedInputs {
    let img = ds.images.par_iter().map(|im| image_to_input(im, net)).collect();
    let template = PoseBoxTemplate::default();
    let (pb, flagged_parts) = match box_type {
        Some(bt) => {
            let boxes: Vec<(Vec<f64>, usize)> = ds
                .images
                .par_iter()
                .zip(&ds.joints)
                .enumerate()
                .map(|(i, (im, js))| {
                    let pb = build_posebox(im, js, bt, &template, posebox_seed(seed, i));
                    (image_to_input(&pb.image, net), pb.flagged.len())
                })
                .collect();
            let flagged = boxes.iter().map(|b| b.1).sum();
            (Some(boxes.into_iter().map(|b| b.0).collect()), flagged)
        }
        None => (None, 0),
    };
    PreparedInputs {
        img,
        pb,
        conf: ds.joints.iter().map(JointSet::confidences).collect(),
        flagged_parts,
    }
}

/// Writes every record's PoseBox to `dir/<image_path>`. Returns the flagged
/// `(image_path, part)` pairs in manifest order.
pub fn write_poseboxes(
    ds: &Dataset,
    box_type: BoxType,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<Vec<(String, PartName)>> {
    let dir = dir.as_ref();
    let template = PoseBoxTemplate::default();
    let flags: Vec<Vec<(String, PartName)>> = ds
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let pb = build_posebox(&ds.images[i], &ds.joints[i], box_type, &template, posebox_seed(seed, i));
            let out = dir.join(&r.image_path);
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_png(&out, &pb.image)?;
            Ok(pb.flagged.into_iter().map(|p| (r.image_path.clone(), p)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(flags.into_iter().flatten().collect())
}

/// Network inputs with PoseBoxes read from `posebox_dir/<image_path>`.
pub fn load_inputs(ds: &Dataset, net: &NetConfig, posebox_dir: Option<&Path>) -> Result<PreparedInputs> {
    let mut inputs = prepare_inputs(ds, net, None, 0);
    if let Some(dir) = posebox_dir {
        let pb = ds
            .records()
            .par_iter()
            .map(|r| Ok(image_to_input(&load_png(dir.join(&r.image_path))?, net)))
            .collect::<Result<Vec<_>>>()?;
        inputs.pb = Some(pb);
    }
    Ok(inputs)
}

impl PreparedInputs {
    fn input(&self, i: usize, cfg: &NetConfig) -> Result<NetInput> {
        let pb = if cfg.streams.pb {
            self.pb
                .as_ref()
                .ok_or_else(|| Error::Argument("configuration needs PoseBoxes but none were built".into()))?[i]
                .clone()
        } else {
            Vec::new()
        };
        Ok(NetInput {
            img: if cfg.streams.img { self.img[i].clone() } else { Vec::new() },
            pb,
            conf: self.conf[i],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Baseline1,
    Baseline2,
    Pie,
}

impl Experiment {
    pub fn variant(self) -> Variant {
        match self {
            Experiment::Baseline1 => Variant::Baseline1,
            Experiment::Baseline2 => Variant::Baseline2,
            Experiment::Pie => Variant::Full,
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline1" => Ok(Experiment::Baseline1),
            "baseline2" => Ok(Experiment::Baseline2),
            "pie" => Ok(Experiment::Pie),
            other => Err(Error::Argument(format!("unknown experiment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricChoice {
    Euclid,
    Kissme,
}

impl fmt::Display for MetricChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricChoice::Euclid => "euclid",
            MetricChoice::Kissme => "kissme",
        })
    }
}

impl FromStr for MetricChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclid" => Ok(MetricChoice::Euclid),
            "kissme" => Ok(MetricChoice::Kissme),
            other => Err(Error::Argument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Everything besides the data, variant and seed that determines a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    /// Base network; `n3` is replaced by the number of training identities.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub layer: PieLayer,
    pub ridge: Ridge,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            net: NetConfig::toy(1),
            train: TrainConfig::desk_scale(),
            layer: PieLayer::Concat,
            ridge: Ridge::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub variant: Variant,
    pub metric: MetricChoice,
    pub seed: u64,
    pub params: NetParams,
    pub loss_history: Vec<f64>,
    pub train_feats: FeatureMatrix,
    pub query_feats: FeatureMatrix,
    pub gallery_feats: FeatureMatrix,
    pub model: MetricModel,
    pub report: EvalReport,
}

/// Maps training identities to class indices in ascending identity order.
fn train_labels(ds: &Dataset) -> BTreeMap<u32, usize> {
    let ids: std::collections::BTreeSet<u32> = ds
        .records()
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.identity)
        .collect();
    ids.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
}

pub fn num_train_identities(ds: &Dataset) -> usize {
    train_labels(ds).len()
}

/// Trains `config` on the training split; `config.n3` must equal the number
/// of training identities.
pub fn train_split(
    ds: &Dataset,
    inputs: &PreparedInputs,
    config: &NetConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainResult> {
    let labels = train_labels(ds);
    if labels.is_empty() {
        return Err(Error::Validation("manifest has no training records".into()));
    }
    if labels.len() != config.n3 {
        return Err(Error::Argument(format!(
            "n3 = {} but the training split has {} identities",
            config.n3,
            labels.len()
        )));
    }
    let samples = ds
        .manifest
        .split_indices(Split::Train)
        .into_iter()
        .map(|i| {
            Ok(TrainSample {
                input: inputs.input(i, config)?,
                label: labels[&ds.records()[i].identity],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train(config, train_cfg, &samples, seed)
}

/// Retrieval vector: the ReLU'd embedding, ℓ2-normalized. An all-zero
/// embedding stays zero.
pub fn retrieval_vector(raw: &[f64]) -> Vec<f32> {
    match l2_normalize(raw) {
        Ok(v) => v.into_iter().map(|x| x as f32).collect(),
        Err(_) => vec![0.0; raw.len()],
    }
}

/// Provenance tag for features of a network configuration.
pub fn feature_provenance(config: &NetConfig, layer: PieLayer) -> Provenance {
    let s = config.streams;
    match layer {
        PieLayer::Fused => Provenance::PieFused,
        PieLayer::Concat if s.img && !s.pb && !s.conf => Provenance::BaselineImg,
        PieLayer::Concat if s.pb && !s.img && !s.conf => Provenance::BaselinePb,
        PieLayer::Concat => Provenance::PieConcat,
    }
}

/// Extracts retrieval vectors for the given records.
pub fn extract_features(
    params: &NetParams,
    inputs: &PreparedInputs,
    indices: &[usize],
    layer: PieLayer,
) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f32>> = indices
        .par_iter()
        .map(|&i| {
            let input = inputs.input(i, &params.config)?;
            Ok(retrieval_vector(&extract_pie(params, &input, layer)?))
        })
        .collect::<Result<_>>()?;
    let dim = match layer {
        PieLayer::Concat => params.config.embedding_width(),
        PieLayer::Fused => params.config.n3,
    };
    Ok(FeatureMatrix::from_rows(dim, &rows)?.with_provenance(feature_provenance(&params.config, layer)))
}

fn records_of(ds: &Dataset, idx: &[usize]) -> Vec<SampleRecord> {
    idx.iter().map(|&i| ds.records()[i].clone()).collect()
}

/// Fits the requested metric on training features.
pub fn fit_metric(
    ds: &Dataset,
    train_feats: &FeatureMatrix,
    choice: MetricChoice,
    ridge: Ridge,
    seed: u64,
) -> Result<MetricModel> {
    match choice {
        MetricChoice::Euclid => Ok(MetricModel::euclidean(train_feats.dim())),
        MetricChoice::Kissme => {
            let train = records_of(ds, &ds.manifest.split_indices(Split::Train));
            let ids: Vec<u32> = train.iter().map(|r| r.identity).collect();
            let cams: Vec<u32> = train.iter().map(|r| r.camera).collect();
            let pairs = sample_pairs(&ids, &cams, mix_seed(seed, PAIR_STREAM))?;
            kissme_fit(train_feats, &pairs, ridge)
        }
    }
}

/// Evaluates query against gallery features of `ds` under `model`.
pub fn evaluate_split(
    ds: &Dataset,
    query_feats: &FeatureMatrix,
    gallery_feats: &FeatureMatrix,
    model: &MetricModel,
) -> Result<EvalReport> {
    let q = records_of(ds, &ds.manifest.split_indices(Split::Query));
    let g = records_of(ds, &ds.manifest.split_indices(Split::Gallery));
    evaluate(&q, query_feats, &g, gallery_feats, model)
}

/// Trains one variant on the training split and evaluates it.
pub fn run_variant(
    ds: &Dataset,
    inputs: &PreparedInputs,
    variant: Variant,
    metric: MetricChoice,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<RunOutput> {
    let base = NetConfig {
        n3: num_train_identities(ds),
        ..opts.net.clone()
    };
    let config = variant.apply(&base);
    let trained = train_split(ds, inputs, &config, &opts.train, seed)?;

    let feats = |split: Split| {
        extract_features(&trained.params, inputs, &ds.manifest.split_indices(split), opts.layer)
    };
    let train_feats = feats(Split::Train)?;
    let query_feats = feats(Split::Query)?;
    let gallery_feats = feats(Split::Gallery)?;
    let model = fit_metric(ds, &train_feats, metric, opts.ridge, seed)?;
    let report = evaluate_split(ds, &query_feats, &gallery_feats, &model)?;
    Ok(RunOutput {
        variant,
        metric,
        seed,
        params: trained.params,
        loss_history: trained.loss_history,
        train_feats,
        query_feats,
        gallery_feats,
        model,
        report,
    })
}

/// One experiment end to end. PoseBoxes are built only when the experiment
/// uses them.
pub fn run_pipeline(
    ds: &Dataset,
    experiment: Experiment,
    box_type: BoxType,
    metric: MetricChoice,
    seed: u64,
    opts: &PipelineOptions,
) -> Result<RunOutput> {
    let variant = experiment.variant();
    let inputs = prepare_inputs(ds, &opts.net, variant.needs_posebox().then_some(box_type), seed);
    run_variant(ds, &inputs, variant, metric, seed, opts)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

/// Every `(variant, seed)` pair with Euclidean retrieval. PoseBoxes are built
/// once per seed and shared by all variants.
pub fn run_ablation(
    ds: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    box_type: BoxType,
    opts: &PipelineOptions,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        let need_pb = variants.iter().any(|v| v.needs_posebox());
        let inputs = prepare_inputs(ds, &opts.net, need_pb.then_some(box_type), seed);
        for &variant in variants {
            let out = run_variant(ds, &inputs, variant, MetricChoice::Euclid, seed, opts)?;
            rows.push(AblationRow {
                variant,
                seed,
                report: out.report,
            });
        }
    }
    Ok(rows)
}

/// Writes features, parameters, the metric (if learned) and the report
/// into `dir`.
pub fn write_run(dir: impl AsRef<Path>, out: &RunOutput) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_features(dir.join("train.feat"), &out.train_feats)?;
    write_features(dir.join("query.feat"), &out.query_feats)?;
    write_features(dir.join("gallery.feat"), &out.gallery_feats)?;
    write_params(dir.join("params.bin"), &out.params)?;
    if out.metric == MetricChoice::Kissme {
        write_metric(dir.join("metric.bin"), &out.model)?;
    }
    let config: BTreeMap<String, String> = [
        ("variant", out.variant.to_string()),
        ("metric", out.metric.to_string()),
        ("seed", out.seed.to_string()),
        ("embedding_dim", out.query_feats.dim().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_run_report(dir.join("report.csv"), &out.variant.to_string(), &out.report, &config)?;
    crate::report::write_cmc(dir.join("cmc.csv"), &out.report.cmc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_opts() -> PipelineOptions {
        PipelineOptions {
            net: NetConfig {
                input_h: 16,
                input_w: 8,
                conv_channels: vec![4],
                n1: 8,
                n3: 1,
                streams: crate::net::Streams::ALL,
                aux_losses: true,
            },
            train: TrainConfig {
                epochs: 2,
                lr0: 0.01,
                lr_decay_every: 1,
                batch_size: 4,
            },
            layer: PieLayer::Concat,
            ridge: Ridge::Auto,
        }
    }

    fn tiny_data() -> Dataset {
        Dataset::from_synth(
            &generate(&SynthConfig {
                n_ids: 6,
                images_per_id: 4,
                ..SynthConfig::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn baseline1_builds_no_poseboxes() {
        let ds = tiny_data();
        let inputs = prepare_inputs(&ds, &tiny_opts().net, None, 0);
        assert!(inputs.pb.is_none());
        let out = run_variant(&ds, &inputs, Variant::Baseline1, MetricChoice::Euclid, 0, &tiny_opts()).unwrap();
        assert_eq!(out.query_feats.dim(), 8);
        assert_eq!(out.params.config.n3, 3);
        assert!(run_variant(&ds, &inputs, Variant::Full, MetricChoice::Euclid, 0, &tiny_opts()).is_err());
    }

    #[test]
    fn pie_run_produces_all_artifacts() {
        let ds = tiny_data();
        let out = run_pipeline(&ds, Experiment::Pie, BoxType::Two, MetricChoice::Kissme, 1, &tiny_opts()).unwrap();
        assert_eq!(out.query_feats.dim(), 2 * 8 + 14);
        assert_eq!(out.query_feats.n(), 6);
        assert!(out.model.min_eigenvalue() >= -1e-10);
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &out).unwrap();
        for f in ["train.feat", "query.feat", "gallery.feat", "params.bin", "metric.bin", "report.csv", "cmc.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn ablation_has_one_row_per_variant_and_seed() {
        let ds = tiny_data();
        let v = [Variant::Full, Variant::Baseline1, Variant::Baseline2];
        let rows = run_ablation(&ds, &v, &[3], BoxType::Two, &tiny_opts()).unwrap();
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn zero_embedding_stays_zero() {
        assert_eq!(retrieval_vector(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(retrieval_vector(&[3.0, 4.0]), vec![0.6, 0.8]);
    }

    #[test]
    fn experiments_parse() {
        assert_eq!("pie".parse::<Experiment>().unwrap(), Experiment::Pie);
        assert!("baseline3".parse::<Experiment>().is_err());
        assert!(BoxType::from_number(4).is_err());
    }
}
