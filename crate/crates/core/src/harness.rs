//! Dataset synthesis and the experiment suites behind the `langground` binary.
//!
//! All randomness comes from a [`SeedTree`] rooted at the run seed, with one
//! named stream per scene, item or trial. Work is spread over a rayon pool but
//! every result is a pure function of its stream, so outputs do not depend on
//! the number of workers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{follow_instruction, DynamicsSource, Episode, FollowConfig};
use crate::detector::{
    dataset_views, observe, ood_views, propose_boxes, proposal_recall, resolve_with_boxes, DetectorModels, PairwiseClassifier, UnaryModel,
};
use crate::generator::{
    classify_affordable, compose_scene, synthesize_scene, table_workspace, ComposeConfig, OracleChecker, SceneConfig, SyntheticScene,
    Verdict, WhatModel, WhereModel, DEFAULT_BUDGET,
};
use crate::geometry::{iou3d, relation_oracle, Box3D, Camera, RelationKind, Vec3, DEFAULT_CAMERA_RADIUS, DEFAULT_MARGIN};
use crate::grammar::{make_contradiction_set, parse_utterance, GenConfig, SceneGraph};
use crate::params::{load_json, save_json};
use crate::rng::SeedTree;
use crate::trainer::{
    make_training_pairs_from_scenes, pairwise_accuracy_by_relation, train_pairwise, train_unary, unary_accuracy, DataConfig, Split,
    TrainConfig,
};
use crate::vocab::{Color, Material, ObjectAttrs, Shape, Size};
use crate::voxel::{project, render_scene, GridSpec, SceneObject};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const UNARY_FILE: &str = "unary.json";
pub const PAIRWISE_FILE: &str = "pairwise.json";
pub const WHAT_FILE: &str = "what.json";
pub const WHERE_FILE: &str = "where.json";

/// Runs `f` on a pool of `jobs` workers (0 picks the rayon default).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(pool.install(f))
}

fn csv_writer(path: impl AsRef<Path>) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self {
            azimuth,
            elevation,
            radius: DEFAULT_CAMERA_RADIUS,
        }
    }

    pub fn camera(&self) -> Camera {
        Camera::new(self.azimuth, self.elevation, self.radius)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Every scene is rendered from each of these cameras.
    pub cameras: Vec<CameraPose>,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 800,
            n_test: 400,
            cameras: dataset_views().into_iter().map(|(a, e)| CameraPose::new(a, e)).collect(),
            max_objects: 2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.cameras.is_empty() || self.max_objects == 0 {
            return Err(Error::Invalid(format!(
                "dataset needs at least one train scene, test scene, camera and object (got {}/{}/{}/{})",
                self.n_train,
                self.n_test,
                self.cameras.len(),
                self.max_objects
            )));
        }
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            utterances: GenConfig {
                n_objects_max: self.max_objects,
                ..GenConfig::default()
            },
            ..SceneConfig::default()
        }
    }

    /// Scene `index` counts train scenes first, then test scenes.
    pub fn scene(&self, index: usize) -> SyntheticScene {
        let mut rng = SeedTree::new(self.seed).stream("scene", index as u64);
        synthesize_scene(&self.scene_config(), &WhatModel::canonical(0.0), &WhereModel::canonical(), &mut rng)
    }
}

/// On-disk form of one scene: `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub utterance: String,
    pub graph: SceneGraph,
    /// Boxes of the mentioned objects, in node order.
    pub boxes: Vec<Box3D>,
    pub cameras: Vec<CameraPose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub dir: String,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub max_objects: usize,
    pub cameras: Vec<CameraPose>,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dataset: impl AsRef<Path>) -> Result<Self> {
        load_json(dataset.as_ref().join(MANIFEST))
    }
}

fn scene_dir(split: Split, i: usize) -> String {
    match split {
        Split::Train => format!("train/{i:05}"),
        Split::HeldOut => format!("test/{i:05}"),
    }
}

fn write_scene(root: &Path, dir: &str, scene: &SyntheticScene, cameras: &[CameraPose]) -> Result<()> {
    let d = root.join(dir);
    fs::create_dir_all(&d)?;
    let record = SceneRecord {
        utterance: scene.utterance.clone(),
        graph: scene.graph.clone(),
        boxes: scene.objects[..scene.graph.nodes.len()].iter().map(|o| o.bbox).collect(),
        cameras: cameras.to_vec(),
    };
    save_json(&record, d.join("scene.json"))?;
    save_json(&scene.objects, d.join("objects.json"))?;
    for (k, cam) in cameras.iter().enumerate() {
        let img = render_scene(&scene.objects, &cam.camera());
        img.write_ppm(d.join(format!("view_{k:02}.ppm")))?;
        img.write_depth_pgm(d.join(format!("view_{k:02}_depth.pgm")))?;
    }
    Ok(())
}

/// Synthesizes and renders the dataset under `out`, one directory per scene.
pub fn cmd_synth(spec: &DatasetSpec, out: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let entries = (0..spec.n_train + spec.n_test)
        .into_par_iter()
        .map(|i| {
            let (split, local) = if i < spec.n_train {
                (Split::Train, i)
            } else {
                (Split::HeldOut, i - spec.n_train)
            };
            let scene = spec.scene(i);
            let dir = scene_dir(split, local);
            write_scene(out, &dir, &scene, &spec.cameras)?;
            Ok(ManifestEntry {
                split,
                dir,
                objects: scene.objects.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: spec.seed,
        n_train: spec.n_train,
        n_test: spec.n_test,
        max_objects: spec.max_objects,
        cameras: spec.cameras.clone(),
        scenes: entries,
    };
    save_json(&manifest, out.join(MANIFEST))?;
    log::info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(manifest)
}

/// Reads back the scenes of one split.
pub fn load_split(dataset: impl AsRef<Path>, split: Split) -> Result<Vec<SyntheticScene>> {
    let root = dataset.as_ref();
    let manifest = Manifest::load(root)?;
    manifest
        .scenes
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let d = root.join(&e.dir);
            let record: SceneRecord = load_json(d.join("scene.json"))?;
            let objects: Vec<SceneObject> = load_json(d.join("objects.json"))?;
            Ok(SyntheticScene {
                utterance: record.utterance,
                graph: record.graph,
                objects,
            })
        })
        .collect()
}

/// Trained detector models plus the generator models, as stored in a models directory.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub detector: DetectorModels,
    pub what: WhatModel,
    pub where_: WhereModel,
}

impl ModelSet {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.detector.unary.save(dir.join(UNARY_FILE))?;
        self.detector.pairwise.save(dir.join(PAIRWISE_FILE))?;
        self.what.save(dir.join(WHAT_FILE))?;
        self.where_.save(dir.join(WHERE_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            detector: load_detector(dir)?,
            what: WhatModel::load(dir.join(WHAT_FILE))?,
            where_: WhereModel::load(dir.join(WHERE_FILE))?,
        })
    }
}

pub fn load_detector(dir: impl AsRef<Path>) -> Result<DetectorModels> {
    let dir = dir.as_ref();
    let need = |f: &str| -> Result<PathBuf> {
        let p = dir.join(f);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Invalid(format!("{} is missing; run `langground train` first", p.display())))
        }
    };
    Ok(DetectorModels {
        unary: UnaryModel::load(need(UNARY_FILE)?)?,
        pairwise: PairwiseClassifier::load(need(PAIRWISE_FILE)?)?,
    })
}

/// The generator models in `dir`, or the canonical ones when none were saved.
pub fn load_generator(dir: impl AsRef<Path>) -> Result<(WhatModel, WhereModel)> {
    let dir = dir.as_ref();
    let what = if dir.join(WHAT_FILE).is_file() {
        WhatModel::load(dir.join(WHAT_FILE))?
    } else {
        WhatModel::canonical(0.0)
    };
    let where_ = if dir.join(WHERE_FILE).is_file() {
        WhereModel::load(dir.join(WHERE_FILE))?
    } else {
        WhereModel::canonical()
    };
    Ok((what, where_))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub unary: TrainConfig,
    pub pairwise: TrainConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            unary: TrainConfig::unary_default(),
            pairwise: TrainConfig::pairwise_default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    pub unary_examples: usize,
    pub pairwise_examples: usize,
    pub unary_accuracy: Option<f64>,
    pub pairwise_accuracy: BTreeMap<RelationKind, f64>,
}

/// Trains both detector models on the train split, evaluating on the test
/// split, and writes the four model files plus per-epoch logs to `models`.
pub fn cmd_train(dataset: impl AsRef<Path>, models: impl AsRef<Path>, opts: &TrainOptions) -> Result<(ModelSet, TrainSummary)> {
    let dataset = dataset.as_ref();
    let models = models.as_ref();
    let manifest = Manifest::load(dataset)?;
    let train = load_split(dataset, Split::Train)?;
    if train.is_empty() {
        return Err(Error::Invalid(format!("{} has no training scenes", dataset.display())));
    }
    let test = load_split(dataset, Split::HeldOut)?;
    let tree = SeedTree::new(opts.seed);
    let data = DataConfig {
        views: manifest.cameras.iter().map(|c| (c.azimuth, c.elevation)).collect(),
        ..DataConfig::default()
    };
    let ts = make_training_pairs_from_scenes(&data, &train, Split::Train, &mut tree.stream("train-examples", 0))?;
    let held = if test.is_empty() {
        None
    } else {
        Some(make_training_pairs_from_scenes(&data, &test, Split::HeldOut, &mut tree.stream("heldout-examples", 0))?)
    };
    log::info!("{} unary and {} pairwise examples", ts.unary.len(), ts.pairwise.len());
    let pcfg = TrainConfig {
        seed: tree.seed("shuffle", 0),
        ..opts.pairwise
    };
    let (pairwise, plog) = train_pairwise(&ts, held.as_ref(), &pcfg)?;
    let ucfg = TrainConfig {
        seed: tree.seed("shuffle", 1),
        ..opts.unary
    };
    let (unary, ulog) = train_unary(&ts, held.as_ref(), &ucfg)?;
    let set = ModelSet {
        detector: DetectorModels { unary, pairwise },
        what: WhatModel::canonical(0.0),
        where_: WhereModel::canonical(),
    };
    set.save(models)?;
    plog.save_csv(models.join("pairwise_log.csv"))?;
    ulog.save_csv(models.join("unary_log.csv"))?;
    let eval = held.as_ref().unwrap_or(&ts);
    let summary = TrainSummary {
        train_scenes: train.len(),
        heldout_scenes: test.len(),
        unary_examples: ts.unary.len(),
        pairwise_examples: ts.pairwise.len(),
        unary_accuracy: held.as_ref().map(|h| unary_accuracy(&set.detector.unary, &h.unary)),
        pairwise_accuracy: pairwise_accuracy_by_relation(&set.detector.pairwise, &eval.pairwise),
    };
    save_json(&summary, models.join("training.json"))?;
    Ok((set, summary))
}

/// Whether every edge of `g` holds between the given node boxes.
pub fn satisfies_graph(g: &SceneGraph, boxes: &[Box3D]) -> bool {
    g.edges
        .iter()
        .all(|e| relation_oracle(e.relation, &boxes[e.subject], &boxes[e.object], DEFAULT_MARGIN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub image: String,
    pub boxes: Vec<Box3D>,
    /// Placement restarts used by the sampler.
    pub samples: u64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub utterance: String,
    pub graph: SceneGraph,
    pub camera: CameraPose,
    pub budget: u64,
    pub samples: Vec<GeneratedSample>,
}

/// Samples `n_samples` layouts of `utterance` and renders each canvas from `camera`.
pub fn cmd_generate(
    utterance: &str,
    models: impl AsRef<Path>,
    n_samples: usize,
    camera: CameraPose,
    seed: u64,
    out: impl AsRef<Path>,
) -> Result<GenerateReport> {
    let out = out.as_ref();
    let graph = parse_utterance(utterance)?;
    let (what, where_) = load_generator(models)?;
    let cfg = ComposeConfig {
        tabletop: true,
        workspace: Some(table_workspace()),
        ..ComposeConfig::default()
    };
    let tree = SeedTree::new(seed);
    let placements = (0..n_samples)
        .into_par_iter()
        .map(|k| compose_scene(&graph, &what, &where_, &OracleChecker::default(), &cfg, &mut tree.stream("generate", k as u64)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let cam = camera.camera();
    let mut samples = Vec::with_capacity(n_samples);
    for (k, p) in placements.iter().enumerate() {
        let canvas = p.canvas.as_ref().expect("canvas requested");
        let img = project(canvas, &cam);
        let image = format!("sample_{k:02}.ppm");
        img.write_ppm(out.join(&image))?;
        img.write_depth_pgm(out.join(format!("sample_{k:02}_depth.pgm")))?;
        let boxes = p.boxes();
        samples.push(GeneratedSample {
            image,
            satisfied: satisfies_graph(&graph, &boxes),
            boxes,
            samples: p.samples,
        });
    }
    let report = GenerateReport {
        utterance: utterance.to_string(),
        graph,
        camera,
        budget: cfg.max_samples,
        samples,
    };
    save_json(&report, out.join("generate.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordItem {
    pub utterance: String,
    pub label: bool,
    pub verdict: bool,
    pub samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub budget: u64,
}

/// The seeded contradiction set of `n` labelled utterances.
pub fn contradiction_items(n: usize, seed: u64) -> Vec<(String, bool)> {
    make_contradiction_set(n, &mut SeedTree::new(seed).stream("afford-set", 0))
}

/// Reads `label<TAB>utterance` lines; labels are `1`/`0` or `affordable`/`unaffordable`.
pub fn read_afford_items(path: impl AsRef<Path>) -> Result<Vec<(String, bool)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (label, utterance) = l.split_once('\t').ok_or_else(|| Error::Invalid(format!("expected label<TAB>utterance: {l:?}")))?;
            let label = match label.trim() {
                "1" | "affordable" | "true" => true,
                "0" | "unaffordable" | "false" => false,
                other => return Err(Error::Invalid(format!("bad label {other:?}"))),
            };
            Ok((utterance.trim().to_string(), label))
        })
        .collect()
}

/// Classifies each utterance with the rejection sampler at the default budget;
/// writes `afford.csv` (one row per item) and `afford.json`.
pub fn cmd_afford(items: &[(String, bool)], models: impl AsRef<Path>, seed: u64, out: impl AsRef<Path>) -> Result<AffordReport> {
    if items.is_empty() {
        return Err(Error::Invalid("affordability set is empty".into()));
    }
    let out = out.as_ref();
    let (what, where_) = load_generator(models)?;
    let cfg = ComposeConfig {
        max_samples: DEFAULT_BUDGET,
        render_canvas: false,
        ..ComposeConfig::default()
    };
    let tree = SeedTree::new(seed);
    let rows = items
        .par_iter()
        .enumerate()
        .map(|(i, (utterance, label))| {
            let g = parse_utterance(utterance)?;
            let v = classify_affordable(&g, &what, &where_, &OracleChecker::default(), &cfg, &mut tree.stream("afford", i as u64))?;
            let samples = match &v {
                Verdict::Affordable(p) => p.samples,
                Verdict::Unaffordable { samples } => *samples,
            };
            Ok(AffordItem {
                utterance: utterance.clone(),
                label: *label,
                verdict: v.is_affordable(),
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let mut w = csv_writer(out.join("afford.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let correct = rows.iter().filter(|r| r.label == r.verdict).count();
    let report = AffordReport {
        n: rows.len(),
        correct,
        accuracy: correct as f64 / rows.len() as f64,
        budget: cfg.max_samples,
    };
    save_json(&report, out.join("afford.json"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSet {
    InDomain,
    OutOfDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    GroundTruth,
    Proposals,
}

/// One referent prediction: `detections.csv` has one row per scene, view set and box mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRow {
    pub scene: usize,
    pub views: ViewSet,
    pub mode: BoxMode,
    pub azimuth: f64,
    pub elevation: f64,
    pub predicted: bool,
    pub correct: bool,
    pub iou: f64,
    /// Objects in the scene, and how many are covered by a proposal at IoU 0.5.
    pub objects: usize,
    pub recalled: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// One prediction per scene: a correct referent is a true positive, a wrong
    /// one counts against both precision and recall, a missing one against recall.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut n, mut tp, mut fp, mut fn_) = (0, 0, 0, 0);
        for (predicted, correct) in outcomes {
            n += 1;
            match (predicted, correct) {
                (true, true) => tp += 1,
                (true, false) => {
                    fp += 1;
                    fn_ += 1;
                }
                _ => fn_ += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            n,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub ground_truth: Prf,
    pub proposals: Prf,
    pub proposal_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectReport {
    pub in_domain: ViewScores,
    pub out_of_domain: ViewScores,
}

impl DetectReport {
    pub fn from_rows(rows: &[DetectRow]) -> Self {
        let scores = |views: ViewSet| {
            let prf = |mode: BoxMode| {
                Prf::from_outcomes(
                    rows.iter()
                        .filter(|r| r.views == views && r.mode == mode)
                        .map(|r| (r.predicted, r.correct)),
                )
            };
            let (hit, total) = rows
                .iter()
                .filter(|r| r.views == views && r.mode == BoxMode::Proposals)
                .fold((0, 0), |(h, t), r| (h + r.recalled, t + r.objects));
            ViewScores {
                ground_truth: prf(BoxMode::GroundTruth),
                proposals: prf(BoxMode::Proposals),
                proposal_recall: if total == 0 { 1.0 } else { hit as f64 / total as f64 },
            }
        };
        Self {
            in_domain: scores(ViewSet::InDomain),
            out_of_domain: scores(ViewSet::OutOfDomain),
        }
    }
}

fn recalled(proposals: &[Box3D], truth: &[Box3D]) -> usize {
    (proposal_recall(proposals, truth, 0.5) * truth.len() as f64).round() as usize
}

/// Resolves the first-mentioned object of one scene seen from one camera, in
/// both box modes. A prediction is correct at IoU 0.5 with its true box.
pub fn detect_scene(scene: &SyntheticScene, index: usize, views: ViewSet, view: (f64, f64), models: &DetectorModels) -> Result<Vec<DetectRow>> {
    let grid = observe(&scene.objects, view.0, view.1, &GridSpec::default())?;
    let truth = scene.boxes();
    let props = propose_boxes(&grid).boxes;
    let n_recalled = recalled(&props, &truth);
    let mut rows = Vec::with_capacity(2);
    for (mode, boxes) in [(BoxMode::GroundTruth, &truth), (BoxMode::Proposals, &props)] {
        let (predicted, iou) = match resolve_with_boxes(&scene.graph, &grid, boxes, models) {
            Ok(d) => (true, iou3d(&boxes[d.assignment[0]], &truth[0])),
            Err(Error::NoCandidate { .. }) => (false, 0.0),
            Err(e) => return Err(e),
        };
        rows.push(DetectRow {
            scene: index,
            views,
            mode,
            azimuth: view.0,
            elevation: view.1,
            predicted,
            correct: predicted && iou >= 0.5,
            iou,
            objects: truth.len(),
            recalled: n_recalled,
        });
    }
    Ok(rows)
}

/// Referential detection over the test split, from one random in-domain and
/// one random out-of-domain camera per scene. Writes `detections.csv` and
/// `detect.json`.
pub fn cmd_detect(dataset: impl AsRef<Path>, models: impl AsRef<Path>, seed: u64, out: impl AsRef<Path>) -> Result<DetectReport> {
    let dataset = dataset.as_ref();
    let out = out.as_ref();
    let manifest = Manifest::load(dataset)?;
    let scenes = load_split(dataset, Split::HeldOut)?;
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("{} has no test scenes", dataset.display())));
    }
    let detector = load_detector(models)?;
    let in_views: Vec<(f64, f64)> = manifest.cameras.iter().map(|c| (c.azimuth, c.elevation)).collect();
    let out_views = ood_views();
    let tree = SeedTree::new(seed);
    let rows: Vec<DetectRow> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = tree.stream("detect-view", i as u64);
            let a = *in_views.choose(&mut rng).expect("cameras");
            let b = *out_views.choose(&mut rng).expect("views");
            let mut rows = detect_scene(scene, i, ViewSet::InDomain, a, &detector)?;
            rows.extend(detect_scene(scene, i, ViewSet::OutOfDomain, b, &detector)?);
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    fs::create_dir_all(out)?;
    let mut w = csv_writer(out.join("detections.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let report = DetectReport::from_rows(&rows);
    save_json(&report, out.join("detect.json"))?;
    Ok(report)
}

/// Largest per-axis separation between two boxes; negative when they overlap.
pub fn box_gap(a: &Box3D, b: &Box3D) -> f64 {
    (0..3)
        .map(|k| (a.center[k] - b.center[k]).abs() - a.half_extent[k] - b.half_extent[k])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Two objects touch when less than one voxel pitch separates them.
pub fn has_touching_pair(objects: &[SceneObject], pitch: f64) -> bool {
    objects
        .iter()
        .enumerate()
        .any(|(i, a)| objects[i + 1..].iter().any(|b| box_gap(&a.bbox, &b.bbox) < pitch))
}

/// Moves object 1 flush against a random side of object 0. `None` when the
/// result leaves the table or intersects a third object.
fn make_touching<R: Rng + ?Sized>(objects: &mut [SceneObject], rng: &mut R) -> Option<()> {
    if objects.len() < 2 {
        return None;
    }
    let (a, b) = (objects[0].bbox, objects[1].bbox);
    let (axis, other) = if rng.random_bool(0.5) { (0, 2) } else { (2, 0) };
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let slide = a.half_extent[other].min(b.half_extent[other]) * 0.5;
    let mut c = a.center;
    c[axis] += side * (a.half_extent[axis] + b.half_extent[axis]);
    c[other] += rng.random_range(-slide..=slide);
    c.y = b.half_extent.y;
    let moved = Box3D::new(c, b.half_extent);
    let clear = objects[2..].iter().all(|o| o.bbox.intersection_volume(&moved) == 0.0);
    if !table_workspace().contains_box(&moved) || !clear {
        return None;
    }
    objects[1].bbox = moved;
    Some(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRow {
    pub scene: usize,
    pub touching: bool,
    pub azimuth: f64,
    pub elevation: f64,
    pub objects: usize,
    pub recalled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalReport {
    pub non_touching: f64,
    pub touching: f64,
    pub all: f64,
    pub scenes: usize,
}

impl ProposalReport {
    pub fn from_rows(rows: &[ProposalRow]) -> Self {
        let recall = |f: &dyn Fn(&ProposalRow) -> bool| {
            let (h, t) = rows.iter().filter(|r| f(r)).fold((0, 0), |(h, t), r| (h + r.recalled, t + r.objects));
            if t == 0 {
                1.0
            } else {
                h as f64 / t as f64
            }
        };
        Self {
            non_touching: recall(&|r| !r.touching),
            touching: recall(&|r| r.touching),
            all: recall(&|_| true),
            scenes: rows.len(),
        }
    }
}

/// Proposal recall at IoU 0.5 on `n` dataset-style scenes in which no two
/// objects touch, and on `n` more in which two objects are pushed into contact.
pub fn proposal_suite(n: usize, seed: u64, out: impl AsRef<Path>) -> Result<ProposalReport> {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    let cfg = spec.scene_config();
    let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
    let grid = GridSpec::default();
    let views = dataset_views();
    let tree = SeedTree::new(seed);
    let rows = (0..2 * n)
        .into_par_iter()
        .map(|i| {
            let touching = i >= n;
            let mut rng = tree.stream("proposal-scene", i as u64);
            let objects = loop {
                let mut objects = synthesize_scene(&cfg, &what, &where_, &mut rng).objects;
                if touching {
                    if make_touching(&mut objects, &mut rng).is_some() {
                        break objects;
                    }
                } else if !has_touching_pair(&objects, grid.pitch) {
                    break objects;
                }
            };
            let &(az, el) = views.choose(&mut rng).expect("views");
            let g = observe(&objects, az, el, &grid)?;
            let truth: Vec<Box3D> = objects.iter().map(|o| o.bbox).collect();
            Ok(ProposalRow {
                scene: i,
                touching,
                azimuth: az,
                elevation: el,
                objects: truth.len(),
                recalled: recalled(&propose_boxes(&g).boxes, &truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    let mut w = csv_writer(out.join("proposals.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let report = ProposalReport::from_rows(&rows);
    save_json(&report, out.join("proposals.json"))?;
    Ok(report)
}

/// The relations of the placement table, in column order.
pub const FOLLOW_RELATIONS: [RelationKind; 7] = [
    RelationKind::LeftOf,
    RelationKind::LeftBehind,
    RelationKind::LeftFront,
    RelationKind::RightOf,
    RelationKind::RightBehind,
    RelationKind::RightFront,
    RelationKind::Inside,
];

/// Clearance between the bowl rim and a cube held above it.
pub const HOLD_CLEARANCE: f64 = 0.3;

/// Starting scene of placement trial `trial`: a large bowl on the table and a
/// small cube of another color held right above it.
pub fn follow_scene(seed: u64, trial: usize) -> Vec<SceneObject> {
    let mut rng = SeedTree::new(seed).stream("follow-scene", trial as u64);
    let bowl_color = *Color::ALL.choose(&mut rng).unwrap();
    let cube_color = loop {
        let c = *Color::ALL.choose(&mut rng).unwrap();
        if c != bowl_color {
            break c;
        }
    };
    let (big, small) = (Size::Large.half_extent(), Size::Small.half_extent());
    let x = rng.random_range(-1.0..=1.0);
    let z = rng.random_range(-1.0..=1.0);
    let bowl = SceneObject {
        bbox: Box3D::cube(Vec3::new(x, big, z), big),
        attrs: ObjectAttrs {
            size: Size::Large,
            color: bowl_color,
            material: *Material::ALL.choose(&mut rng).unwrap(),
            shape: Shape::Bowl,
        },
    };
    let cube = SceneObject {
        bbox: Box3D::cube(Vec3::new(x, 2.0 * big + HOLD_CLEARANCE + small, z), small),
        attrs: ObjectAttrs {
            size: Size::Small,
            color: cube_color,
            material: *Material::ALL.choose(&mut rng).unwrap(),
            shape: Shape::Cube,
        },
    };
    vec![cube, bowl]
}

pub fn follow_instruction_text(objects: &[SceneObject], rel: RelationKind) -> String {
    format!(
        "put the {} cube {} the {} bowl",
        objects[0].attrs.color.word(),
        rel.phrase(),
        objects[1].attrs.color.word()
    )
}

fn relation_slug(rel: RelationKind) -> String {
    serde_json::to_value(rel)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn dynamics_name(d: DynamicsSource) -> &'static str {
    match d {
        DynamicsSource::Known => "known",
        DynamicsSource::Fitted { .. } => "fitted",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowRow {
    pub dynamics: String,
    pub relation: RelationKind,
    pub trial: usize,
    pub instruction: String,
    /// Released with the relation holding against the true bowl.
    pub success: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowTable {
    pub dynamics: String,
    /// Successes per relation, out of `trials`.
    pub by_relation: BTreeMap<RelationKind, usize>,
    pub trials: usize,
    pub successes: usize,
    pub episodes: usize,
}

impl FollowTable {
    pub fn from_rows(dynamics: &str, trials: usize, rows: &[FollowRow]) -> Self {
        let mut by_relation: BTreeMap<RelationKind, usize> = FOLLOW_RELATIONS.iter().map(|r| (*r, 0)).collect();
        for r in rows.iter().filter(|r| r.success) {
            *by_relation.entry(r.relation).or_default() += 1;
        }
        Self {
            dynamics: dynamics.to_string(),
            successes: by_relation.values().sum(),
            by_relation,
            trials,
            episodes: rows.len(),
        }
    }
}

fn run_trial(objects: &[SceneObject], rel: RelationKind, models: &ModelSet, cfg: &FollowConfig, view: (f64, f64), seed: u64) -> Result<Episode> {
    let grid = observe(objects, view.0, view.1, &GridSpec::default())?;
    let text = follow_instruction_text(objects, rel);
    follow_instruction(&text, &grid, &models.detector, &models.where_, cfg, &mut crate::rng::seeded(seed))
}

/// Runs `trials` episodes per relation from the held-cube start, planning with
/// `dynamics`. Writes each trajectory, `follow_<dynamics>.csv` and the table.
pub fn cmd_follow(models: impl AsRef<Path>, seed: u64, trials: usize, dynamics: DynamicsSource, out: impl AsRef<Path>) -> Result<FollowTable> {
    if trials == 0 {
        return Err(Error::Invalid("need at least one trial per relation".into()));
    }
    let out = out.as_ref();
    let set = ModelSet::load(models)?;
    let name = dynamics_name(dynamics);
    let cfg = FollowConfig {
        dynamics,
        ..FollowConfig::default()
    };
    let tree = SeedTree::new(seed);
    let views = dataset_views();
    let episodes_dir = out.join(format!("episodes_{name}"));
    fs::create_dir_all(&episodes_dir)?;
    let rows = (0..FOLLOW_RELATIONS.len() * trials)
        .into_par_iter()
        .map(|i| {
            let (rel, trial) = (FOLLOW_RELATIONS[i / trials], i % trials);
            let objects = follow_scene(seed, trial);
            let view = *views.choose(&mut tree.stream("follow-view", trial as u64)).unwrap();
            let instruction = follow_instruction_text(&objects, rel);
            let mut row = FollowRow {
                dynamics: name.to_string(),
                relation: rel,
                trial,
                instruction,
                success: false,
                iterations: 0,
                final_cost: f64::NAN,
                error: String::new(),
            };
            match run_trial(&objects, rel, &set, &cfg, view, tree.seed("follow", i as u64)) {
                Ok(ep) => {
                    let (cube, bowl) = (objects[0].bbox, objects[1].bbox);
                    let mut c = ep.final_box().center;
                    c.y = cube.half_extent.y;
                    let truth = Box3D::new(c, cube.half_extent);
                    row.success = ep.success && relation_oracle(rel, &truth, &bowl, DEFAULT_MARGIN);
                    row.iterations = ep.iterations;
                    row.final_cost = ep.final_cost;
                    ep.save(&episodes_dir, &format!("{}_{trial}", relation_slug(rel)))?;
                }
                Err(e) => row.error = e.to_string(),
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv_writer(out.join(format!("follow_{name}.csv")))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let table = FollowTable::from_rows(name, trials, &rows);
    save_json(&table, out.join(format!("follow_{name}.json")))?;
    Ok(table)
}

/// Every suite's headline numbers, as written by `eval-all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub affordability: AffordReport,
    pub detection: DetectReport,
    pub proposals: ProposalReport,
    pub placement_known: FollowTable,
    pub placement_fitted: FollowTable,
}


#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub dataset: DatasetSpec,
    pub train: TrainOptions,
    pub afford_items: usize,
    pub proposal_scenes: usize,
    pub follow_trials: usize,
    pub fitted_rollouts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            train: TrainOptions::default(),
            afford_items: 92,
            proposal_scenes: 500,
            follow_trials: 5,
            fitted_rollouts: 24,
        }
    }
}

/// Synthesizes a dataset, trains on it and runs every suite, writing each
/// suite's files under `out` and the combined `metrics.json`.
pub fn cmd_eval_all(opts: &EvalOptions, models: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<MetricsReport> {
    let (models, out) = (models.as_ref(), out.as_ref());
    let seed = opts.dataset.seed;
    let dataset = out.join("dataset");
    cmd_synth(&opts.dataset, &dataset)?;
    let train = TrainOptions { seed, ..opts.train.clone() };
    cmd_train(&dataset, models, &train)?;
    let items = contradiction_items(opts.afford_items, seed);
    let report = MetricsReport {
        seed,
        affordability: cmd_afford(&items, models, seed, out.join("afford"))?,
        detection: cmd_detect(&dataset, models, seed, out.join("detect"))?,
        proposals: proposal_suite(opts.proposal_scenes, seed, out.join("proposals"))?,
        placement_known: cmd_follow(models, seed, opts.follow_trials, DynamicsSource::Known, out.join("follow"))?,
        placement_fitted: cmd_follow(
            models,
            seed,
            opts.follow_trials,
            DynamicsSource::Fitted {
                rollouts: opts.fitted_rollouts,
            },
            out.join("follow"),
        )?,
    };
    save_json(&report, out.join("metrics.json"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::UnaryModel;
    use crate::vocab::Token;
    use crate::voxel::{ch, OBJ_RES};
    use tempfile::tempdir;

    fn tiny_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_train: 2,
            n_test: 1,
            cameras: vec![CameraPose::new(30.0, 40.0)],
            seed,
            ..DatasetSpec::default()
        }
    }

    fn files_in(dir: &Path) -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        names
    }

    fn color_models() -> ModelSet {
        let mut unary = UnaryModel::zeros();
        unary.bias = -5.0;
        let len = OBJ_RES * OBJ_RES * OBJ_RES;
        for c in Color::ALL {
            let k = ch::COLOR + c.index();
            unary.templates.get_mut(&Token::Color(c)).unwrap()[k * len..(k + 1) * len].fill(50.0);
        }
        ModelSet {
            detector: DetectorModels {
                unary,
                pairwise: PairwiseClassifier::zeros(),
            },
            what: WhatModel::canonical(0.0),
            where_: WhereModel::canonical(),
        }
    }

    #[test]
    fn default_spec_matches_the_dataset_counts() {
        let s = DatasetSpec::default();
        assert_eq!((s.n_train, s.n_test, s.cameras.len(), s.max_objects), (800, 400, 48, 2));
        let mut elevations: Vec<f64> = s.cameras.iter().map(|c| c.elevation).collect();
        elevations.dedup();
        assert_eq!(elevations, vec![12.0, 20.0, 40.0, 60.0]);
        assert!(DatasetSpec { n_test: 0, ..tiny_spec(0) }.validate().is_err());
    }

    #[test]
    fn synth_writes_four_files_per_scene_and_a_manifest() {
        let dir = tempdir().unwrap();
        let m = cmd_synth(&tiny_spec(1), dir.path()).unwrap();
        assert_eq!(m.scenes.len(), 3);
        assert_eq!(files_in(dir.path()), vec!["manifest.json", "test", "train"]);
        for e in &m.scenes {
            assert_eq!(
                files_in(&dir.path().join(&e.dir)),
                vec!["objects.json", "scene.json", "view_00.ppm", "view_00_depth.pgm"]
            );
        }
        let manifest: serde_json::Value = load_json(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest["seed"], 1);
    }

    #[test]
    fn scene_json_follows_the_schema() {
        let dir = tempdir().unwrap();
        cmd_synth(&tiny_spec(2), dir.path()).unwrap();
        let v: serde_json::Value = load_json(dir.path().join("train/00000/scene.json")).unwrap();
        assert!(v["utterance"].is_string());
        let node = &v["graph"]["nodes"][0];
        assert!(node["adjectives"].is_array() && node["noun"].is_string());
        for e in v["graph"]["edges"].as_array().unwrap() {
            let e = e.as_array().unwrap();
            assert_eq!(e.len(), 3);
            assert!(e[0].is_u64() && e[1].is_string() && e[2].is_u64());
        }
        let b = &v["boxes"][0];
        assert_eq!(b["center"].as_array().unwrap().len(), 3);
        assert_eq!(b["half_extent"].as_array().unwrap().len(), 3);
        assert_eq!(v["cameras"][0]["azimuth"], 30.0);
        assert_eq!(v["cameras"][0]["radius"], DEFAULT_CAMERA_RADIUS);
    }

    #[test]
    fn synth_is_byte_identical_across_runs_and_worker_counts() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        with_jobs(1, || cmd_synth(&tiny_spec(3), a.path())).unwrap().unwrap();
        with_jobs(3, || cmd_synth(&tiny_spec(3), b.path())).unwrap().unwrap();
        for f in ["manifest.json", "train/00000/scene.json", "train/00001/objects.json", "test/00000/scene.json", "test/00000/view_00.ppm"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn load_split_reads_back_the_scenes() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(4);
        cmd_synth(&spec, dir.path()).unwrap();
        let train = load_split(dir.path(), Split::Train).unwrap();
        let test = load_split(dir.path(), Split::HeldOut).unwrap();
        assert_eq!(train, vec![spec.scene(0), spec.scene(1)]);
        assert_eq!(test, vec![spec.scene(2)]);
        let images = crate::voxel::RgbdImage::read(
            dir.path().join("test/00000/view_00.ppm"),
            dir.path().join("test/00000/view_00_depth.pgm"),
        )
        .unwrap();
        assert!(images.foreground() > 0);
    }

    #[test]
    fn training_needs_scenes() {
        let dir = tempdir().unwrap();
        let manifest = Manifest {
            seed: 0,
            n_train: 0,
            n_test: 0,
            max_objects: 2,
            cameras: vec![CameraPose::new(0.0, 40.0)],
            scenes: vec![],
        };
        save_json(&manifest, dir.path().join(MANIFEST)).unwrap();
        let r = cmd_train(dir.path(), dir.path().join("models"), &TrainOptions::default());
        assert!(matches!(r, Err(Error::Invalid(_))), "{r:?}");
    }

    #[test]
    fn train_writes_models_and_one_log_row_per_epoch() {
        let dir = tempdir().unwrap();
        cmd_synth(&tiny_spec(5), dir.path().join("data")).unwrap();
        let opts = TrainOptions {
            unary: TrainConfig {
                epochs: 3,
                ..TrainConfig::unary_default()
            },
            pairwise: TrainConfig {
                epochs: 4,
                ..TrainConfig::pairwise_default()
            },
            seed: 0,
        };
        let models = dir.path().join("models");
        let (set, summary) = cmd_train(dir.path().join("data"), &models, &opts).unwrap();
        assert_eq!(summary.train_scenes, 2);
        for f in [UNARY_FILE, PAIRWISE_FILE, WHAT_FILE, WHERE_FILE, "training.json"] {
            assert!(models.join(f).is_file(), "{f}");
        }
        let rows = |f: &str| fs::read_to_string(models.join(f)).unwrap().lines().count();
        assert_eq!(rows("unary_log.csv"), 1 + 3);
        assert_eq!(rows("pairwise_log.csv"), 1 + 4);
        let back = ModelSet::load(&models).unwrap();
        assert_eq!(back.detector.pairwise, set.detector.pairwise);
        assert_eq!(back.detector.unary, set.detector.unary);
    }

    #[test]
    fn generate_renders_each_sample() {
        let dir = tempdir().unwrap();
        let r = cmd_generate("a red cube is to the left of a blue sphere", dir.path(), 3, CameraPose::new(0.0, 40.0), 0, dir.path()).unwrap();
        assert_eq!(r.samples.len(), 3);
        assert!(r.samples.iter().all(|s| s.satisfied));
        let ppm = files_in(dir.path()).into_iter().filter(|f| f.ends_with(".ppm")).count();
        assert_eq!(ppm, 3);
    }

    #[test]
    fn generated_four_object_scenes_verify() {
        let dir = tempdir().unwrap();
        let text = "a red cube is to the left of a blue sphere and behind a green cylinder, \
                    a yellow bowl is to the right of the blue sphere";
        let r = cmd_generate(text, dir.path(), 2, CameraPose::new(30.0, 40.0), 1, dir.path()).unwrap();
        assert_eq!(r.graph.nodes.len(), 4);
        for s in &r.samples {
            assert!(s.satisfied);
            assert!(satisfies_graph(&r.graph, &s.boxes));
        }
    }

    #[test]
    fn infeasible_generation_cites_the_budget() {
        let dir = tempdir().unwrap();
        let text = "a red cube is to the left of a blue sphere, the blue sphere is to the left of the red cube";
        let e = cmd_generate(text, dir.path(), 1, CameraPose::new(0.0, 40.0), 0, dir.path()).unwrap_err();
        // every restart exhausts its per-node draws
        assert!(matches!(e, Error::Infeasible { samples } if samples >= DEFAULT_BUDGET * DEFAULT_BUDGET), "{e:?}");
    }

    #[test]
    fn afford_scores_and_reproduces() {
        let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
        assert!(matches!(cmd_afford(&[], a.path(), 0, a.path()), Err(Error::Invalid(_))));
        let items = contradiction_items(6, 7);
        let r = cmd_afford(&items, a.path(), 7, a.path()).unwrap();
        assert_eq!((r.n, r.correct), (6, 6));
        cmd_afford(&items, b.path(), 7, b.path()).unwrap();
        let csv = fs::read(a.path().join("afford.csv")).unwrap();
        assert_eq!(csv, fs::read(b.path().join("afford.csv")).unwrap());
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn afford_items_parse_from_tsv() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("set.tsv");
        fs::write(&p, "# comment\n1\ta red cube\nunaffordable\ta blue sphere\n").unwrap();
        let items = read_afford_items(&p).unwrap();
        assert_eq!(items, vec![("a red cube".to_string(), true), ("a blue sphere".to_string(), false)]);
        fs::write(&p, "maybe\ta red cube\n").unwrap();
        assert!(read_afford_items(&p).is_err());
    }

    #[test]
    fn prf_counts() {
        let p = Prf::from_outcomes([(true, true), (true, true), (true, false), (false, false)]);
        assert_eq!((p.n, p.tp, p.fp, p.fn_), (4, 2, 1, 2));
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.recall - 0.5).abs() < 1e-15);
        assert!((p.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(Prf::from_outcomes([(false, false)]).f1, 0.0);
    }

    #[test]
    fn detect_reports_a_single_scene_split() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        let spec = DatasetSpec {
            n_train: 1,
            ..tiny_spec(6)
        };
        cmd_synth(&spec, &data).unwrap();
        color_models().save(dir.path()).unwrap();
        let r = cmd_detect(&data, dir.path(), 0, dir.path().join("out")).unwrap();
        for v in [&r.in_domain, &r.out_of_domain] {
            assert_eq!((v.ground_truth.n, v.proposals.n), (1, 1));
        }
        let rows = fs::read_to_string(dir.path().join("out/detections.csv")).unwrap();
        assert_eq!(rows.lines().count(), 1 + 4);
    }

    #[test]
    fn detect_without_models_asks_for_training() {
        let dir = tempdir().unwrap();
        cmd_synth(&tiny_spec(6), dir.path()).unwrap();
        let e = cmd_detect(dir.path(), dir.path().join("none"), 0, dir.path()).unwrap_err();
        assert!(e.to_string().contains("train"), "{e}");
    }

    #[test]
    fn touching_scenes_touch() {
        let mut rng = crate::rng::seeded(9);
        let mut made = 0;
        for _ in 0..20 {
            let mut objects = synthesize_scene(&DatasetSpec::default().scene_config(), &WhatModel::canonical(0.0), &WhereModel::canonical(), &mut rng).objects;
            if make_touching(&mut objects, &mut rng).is_some() {
                made += 1;
                assert!(box_gap(&objects[0].bbox, &objects[1].bbox).abs() < 1e-12);
                assert!(has_touching_pair(&objects, 0.01));
            }
        }
        assert!(made > 5);
        let a = Box3D::cube(Vec3::zeros(), 0.5);
        assert!((box_gap(&a, &a.translated(&Vec3::new(1.3, 0.0, 0.2))) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn proposal_suite_splits_touching_scenes() {
        let dir = tempdir().unwrap();
        let r = proposal_suite(3, 0, dir.path()).unwrap();
        assert_eq!(r.scenes, 6);
        let text = fs::read_to_string(dir.path().join("proposals.csv")).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains(",true,")).count(), 3);
        for v in [r.non_touching, r.touching, r.all] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn follow_scene_holds_the_cube_over_the_bowl() {
        let objs = follow_scene(0, 0);
        let (cube, bowl) = (objs[0].bbox, objs[1].bbox);
        assert_eq!((cube.center.x, cube.center.z), (bowl.center.x, bowl.center.z));
        assert!((cube.min().y - bowl.max().y - HOLD_CLEARANCE).abs() < 1e-12);
        assert_ne!(objs[0].attrs.color, objs[1].attrs.color);
        let text = follow_instruction_text(&objs, RelationKind::LeftFront);
        assert!(crate::grammar::parse_instruction(&text).is_ok(), "{text}");
    }

    #[test]
    fn follow_table_matches_the_episodes() {
        let dir = tempdir().unwrap();
        color_models().save(dir.path()).unwrap();
        let t = cmd_follow(dir.path(), 0, 1, DynamicsSource::Known, dir.path().join("out")).unwrap();
        assert_eq!((t.episodes, t.trials), (7, 1));
        let rows = fs::read_to_string(dir.path().join("out/follow_known.csv")).unwrap();
        let ok = rows.lines().skip(1).filter(|l| l.contains(",true,")).count();
        assert_eq!(t.successes, ok);
        assert_eq!(t.by_relation.values().sum::<usize>(), t.successes);
        assert_eq!(t.successes, 7, "{rows}");
        let episodes = files_in(&dir.path().join("out/episodes_known"));
        assert!(episodes.contains(&"left_of_0.csv".to_string()), "{episodes:?}");
        assert_eq!(episodes.len(), 14);
    }
}
