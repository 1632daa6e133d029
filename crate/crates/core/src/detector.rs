//! Referential expression grounding: geometric region proposals, unary
//! appearance scores, pairwise box scores and exhaustive assignment search.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou3d, Box3D, Camera, RelationKind, Vec3, DEFAULT_CAMERA_RADIUS};
use crate::grammar::SceneGraph;
use crate::params::{load_json, save_json, TensorParam};
use crate::vocab::{NounPhrase, Token, SMALL_HALF_EXTENT};
use crate::voxel::{
    ch, crop_and_resize, render_scene, unproject_views, GridSpec, ObjectTensor, RgbdImage, SceneFeatureGrid, SceneObject,
    GRID_CHANNELS, OBJ_RES,
};
use crate::{Error, Result};

/// Proposals must clear this unary score to take part in an assignment.
pub const UNARY_THRESHOLD: f64 = 0.4;
/// Connected components with fewer voxels are discarded.
pub const MIN_COMPONENT: usize = 4;
/// Box-to-parts volume ratio that triggers a split.
pub const SPLIT_RATIO: f64 = 1.8;
/// Footprint aspect ratio that triggers a split; every shape has a square footprint.
pub const ASPECT_RATIO: f64 = 1.4;
/// Channels a detector looks at: occupancy, color, material, shape and size.
pub const FEATURE_CHANNELS: usize = ch::SURFACE;

const TEMPLATE_LEN: usize = OBJ_RES * OBJ_RES * OBJ_RES;

/// Azimuth offsets of the four cameras that observe a scene from one view.
pub const RIG_OFFSETS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

/// The camera ring for a view: the view camera plus three more at the same
/// elevation, a quarter turn apart.
pub fn rig_cameras(azimuth: f64, elevation: f64) -> Vec<Camera> {
    RIG_OFFSETS
        .iter()
        .map(|d| Camera::new((azimuth + d).rem_euclid(360.0), elevation, DEFAULT_CAMERA_RADIUS))
        .collect()
}

/// Renders a scene from a view's camera ring and fuses the images into one grid.
pub fn observe(objects: &[SceneObject], azimuth: f64, elevation: f64, spec: &GridSpec) -> Result<SceneFeatureGrid> {
    let cams = rig_cameras(azimuth, elevation);
    let imgs: Vec<RgbdImage> = cams.iter().map(|c| render_scene(objects, c)).collect();
    let views: Vec<(&RgbdImage, &Camera)> = imgs.iter().zip(&cams).collect();
    unproject_views(&views, spec)
}

/// Elevations of the dataset cameras, in degrees.
pub const DATASET_ELEVATIONS: [f64; 4] = [12.0, 20.0, 40.0, 60.0];
/// Elevations of the out-of-domain cameras, in degrees.
pub const OOD_ELEVATIONS: [f64; 2] = [30.0, 50.0];
/// Azimuth shift of the out-of-domain cameras relative to the dataset azimuths.
pub const OOD_AZIMUTH_OFFSET: f64 = 15.0;

/// The 48 dataset views: 12 azimuths every 30 degrees times 4 elevations.
pub fn dataset_views() -> Vec<(f64, f64)> {
    DATASET_ELEVATIONS
        .iter()
        .flat_map(|el| (0..12).map(move |k| (k as f64 * 30.0, *el)))
        .collect()
}

/// The 24 out-of-domain views.
pub fn ood_views() -> Vec<(f64, f64)> {
    OOD_ELEVATIONS
        .iter()
        .flat_map(|el| (0..12).map(move |k| (k as f64 * 30.0 + OOD_AZIMUTH_OFFSET, *el)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub boxes: Vec<Box3D>,
    pub spec: GridSpec,
}

type Voxel = [usize; 3];

/// Color and material class of a voxel, when one class clearly dominates.
fn voxel_class(grid: &SceneFeatureGrid, v: &Voxel) -> Option<usize> {
    let f = |c| grid.get(c, v[0], v[1], v[2]);
    let top2 = |start: usize, len: usize| {
        let mut vals: Vec<(f32, usize)> = (0..len).map(|k| (f(start + k), k)).collect();
        vals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        (vals[0].1, vals[0].0 - vals[1].0, vals[0].0)
    };
    let (color, gap, top) = top2(ch::COLOR, ch::N_COLOR);
    if top <= 0.0 || gap < 0.25 {
        return None;
    }
    let (material, mgap, _) = top2(ch::MATERIAL, ch::N_MATERIAL);
    let material = if mgap < 0.25 { ch::N_MATERIAL } else { material };
    Some(color * (ch::N_MATERIAL + 1) + material)
}

/// Voxels this many rows apart in the same or adjacent columns are connected.
/// Steeply viewed walls leave single empty rows between their samples.
pub const VERTICAL_REACH: i64 = 2;

/// Connected components of `members` (restricted to `allowed`) under the
/// 26-neighbourhood stretched to `VERTICAL_REACH` rows vertically.
fn components(dims: [usize; 3], members: &[Voxel], allowed: impl Fn(&Voxel, &Voxel) -> bool) -> Vec<Vec<Voxel>> {
    let idx = |v: &Voxel| (v[2] * dims[1] + v[1]) * dims[0] + v[0];
    let mut slot = vec![usize::MAX; dims.iter().product()];
    for (i, v) in members.iter().enumerate() {
        slot[idx(v)] = i;
    }
    let mut seen = vec![false; members.len()];
    let mut out = Vec::new();
    for start in 0..members.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![members[start]];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let v = members[i];
            for dz in -1i64..=1 {
                for dy in -VERTICAL_REACH..=VERTICAL_REACH {
                    for dx in -1i64..=1 {
                        let n = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                        if n.iter().zip(&dims).any(|(c, d)| *c < 0 || *c >= *d as i64) {
                            continue;
                        }
                        let n = [n[0] as usize, n[1] as usize, n[2] as usize];
                        let j = slot[idx(&n)];
                        if j != usize::MAX && !seen[j] && allowed(&v, &n) {
                            seen[j] = true;
                            comp.push(n);
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn voxel_bounds(vox: &[Voxel]) -> (Voxel, Voxel) {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    for v in vox {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

fn bounds_volume(vox: &[Voxel]) -> f64 {
    if vox.is_empty() {
        return 0.0;
    }
    let (lo, hi) = voxel_bounds(vox);
    (0..3).map(|k| (hi[k] - lo[k] + 1) as f64).product()
}

/// Splits a component in two when it looks like touching objects: its box is
/// much larger than the boxes of its best two-way split, or its footprint is
/// elongated (single objects have square footprints).
fn split_touching(vox: Vec<Voxel>) -> Vec<Vec<Voxel>> {
    let (lo, hi) = voxel_bounds(&vox);
    let ext: Vec<usize> = (0..3).map(|k| hi[k] - lo[k] + 1).collect();
    let whole = bounds_volume(&vox);
    let partition = |axis: usize, s: usize| -> (Vec<Voxel>, Vec<Voxel>) { vox.iter().partition(|v| v[axis] < s) };
    let mut best: Option<(f64, usize, usize)> = None;
    for axis in [0, 2] {
        for s in lo[axis] + 1..=hi[axis] {
            let (a, b) = partition(axis, s);
            let sum = bounds_volume(&a) + bounds_volume(&b);
            if best.is_none_or(|(bs, _, _)| sum < bs) {
                best = Some((sum, axis, s));
            }
        }
    }
    let cut = match best {
        Some((sum, axis, s)) if whole > SPLIT_RATIO * sum => Some((axis, s)),
        _ => {
            let (long, short) = if ext[0] >= ext[2] { (0, 2) } else { (2, 0) };
            if ext[long] as f64 > ASPECT_RATIO * ext[short] as f64 {
                // occupancy valley in the middle third, nearest the center on ties
                let mut counts = vec![0usize; ext[long]];
                for v in &vox {
                    counts[v[long] - lo[long]] += 1;
                }
                let n = ext[long];
                let mid = n as f64 / 2.0;
                (n / 3..=(2 * n) / 3)
                    .filter(|s| *s >= 1 && *s < n)
                    .min_by(|a, b| {
                        counts[*a]
                            .cmp(&counts[*b])
                            .then((*a as f64 - mid).abs().total_cmp(&(*b as f64 - mid).abs()))
                    })
                    .map(|s| (long, lo[long] + s))
            } else {
                None
            }
        }
    };
    match cut {
        Some((axis, s)) => {
            let (a, b) = partition(axis, s);
            vec![a, b]
        }
        None => vec![vox],
    }
}

/// Category-agnostic 3D proposals from occupancy.
///
/// Occupied voxels (occupancy above 0.5) are grouped into components that
/// reach adjacent columns and up to `VERTICAL_REACH` rows vertically. A
/// component whose voxels carry two or more confident color and material
/// classes is separated by class; components that still look like
/// touching objects are split once along the footprint. Each surviving component
/// of at least four voxels yields the union of its voxel cells, that is its
/// tight voxel-center box dilated by one voxel.
pub fn propose_boxes(grid: &SceneFeatureGrid) -> ProposalSet {
    let spec = grid.spec;
    let occupied: Vec<Voxel> = grid.occupied();
    let mut out = Vec::new();
    for comp in components(spec.dims, &occupied, |_, _| true) {
        if comp.len() < MIN_COMPONENT {
            continue;
        }
        let classes: Vec<Option<usize>> = comp.iter().map(|v| voxel_class(grid, v)).collect();
        let mut count: BTreeMap<usize, usize> = BTreeMap::new();
        for c in classes.iter().flatten() {
            *count.entry(*c).or_default() += 1;
        }
        let major = count
            .values()
            .filter(|n| **n >= MIN_COMPONENT && **n * 10 >= comp.len())
            .count();
        let pieces = if major >= 2 {
            let class_of: BTreeMap<Voxel, Option<usize>> = comp.iter().copied().zip(classes).collect();
            let confident: Vec<Voxel> = comp.iter().copied().filter(|v| class_of[v].is_some()).collect();
            components(spec.dims, &confident, |a, b| class_of[a] == class_of[b])
        } else {
            vec![comp]
        };
        for piece in pieces {
            if piece.len() < MIN_COMPONENT {
                continue;
            }
            for part in split_touching(piece) {
                if part.len() < MIN_COMPONENT {
                    continue;
                }
                let (lo, hi) = voxel_bounds(&part);
                let min = spec.voxel_to_world(&Vec3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64));
                let max = spec.voxel_to_world(&Vec3::new((hi[0] + 1) as f64, (hi[1] + 1) as f64, (hi[2] + 1) as f64));
                out.push(Box3D::from_min_max(min, max));
            }
        }
    }
    // deterministic order: by box minimum corner
    out.sort_by(|a, b| {
        let (a, b) = (a.min(), b.min());
        a.x.total_cmp(&b.x).then(a.z.total_cmp(&b.z)).then(a.y.total_cmp(&b.y))
    });
    ProposalSet { boxes: out, spec }
}

/// Fraction of `truth` boxes matched by some proposal at IoU of at least `iou`.
pub fn proposal_recall(proposals: &[Box3D], truth: &[Box3D], iou: f64) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth
        .iter()
        .filter(|t| proposals.iter().any(|p| iou3d(p, t) >= iou))
        .count();
    hit as f64 / truth.len() as f64
}

/// Size cue in [0, 1] from a box: 0 at the small half extent, 1 at twice it.
pub fn size_cue(b: &Box3D) -> f32 {
    let h = b.half_extent.max();
    ((h - SMALL_HALF_EXTENT) / SMALL_HALF_EXTENT).clamp(0.0, 1.0) as f32
}

/// Crop of the feature channels under a box, with the size channels written
/// from the box extent wherever the crop is occupied.
pub fn object_crop(grid: &SceneFeatureGrid, b: &Box3D) -> Result<ObjectTensor> {
    let mut t = crop_and_resize(grid, b)?;
    t.data.truncate(FEATURE_CHANNELS * TEMPLATE_LEN);
    t.channels = FEATURE_CHANNELS;
    let u = size_cue(b);
    let (occ, rest) = t.data.split_at_mut(TEMPLATE_LEN);
    let size = &mut rest[(ch::SIZE - 1) * TEMPLATE_LEN..(ch::SIZE + 1) * TEMPLATE_LEN];
    let (small, large) = size.split_at_mut(TEMPLATE_LEN);
    for i in 0..TEMPLATE_LEN {
        let o = occ[i].clamp(0.0, 1.0);
        small[i] = (1.0 - u) * o;
        large[i] = u * o;
    }
    Ok(t)
}

/// Channels a token's template acts on. The groups are disjoint, so the
/// elementwise product over a phrase's tokens leaves each channel with at most
/// one factor; channels no token gates contribute nothing.
pub fn gate_channels(tok: Token) -> Vec<usize> {
    match tok {
        Token::Shape(_) => std::iter::once(ch::OCC).chain(ch::SHAPE..ch::SHAPE + ch::N_SHAPE).collect(),
        Token::Color(_) => (ch::COLOR..ch::COLOR + ch::N_COLOR).collect(),
        Token::Material(_) => (ch::MATERIAL..ch::MATERIAL + ch::N_MATERIAL).collect(),
        Token::Size(_) => (ch::SIZE..ch::SIZE + ch::N_SIZE).collect(),
    }
}

/// Detection templates per token (16^3 x 32, channel-major) and a shared bias.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryModel {
    pub templates: BTreeMap<Token, Vec<f64>>,
    pub bias: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl UnaryModel {
    pub fn zeros() -> Self {
        Self {
            templates: Token::all()
                .into_iter()
                .map(|t| (t, vec![0.0; GRID_CHANNELS * TEMPLATE_LEN]))
                .collect(),
            bias: 0.0,
        }
    }

    /// `<aggregate template, t> / 16^3 + bias`.
    pub fn logit(&self, p: &NounPhrase, t: &ObjectTensor) -> Result<f64> {
        assert_eq!(t.res, OBJ_RES);
        let mut z = self.bias;
        for tok in p.tokens() {
            let tpl = self
                .templates
                .get(&tok)
                .ok_or_else(|| Error::UnknownToken(tok.word().to_string()))?;
            for c in gate_channels(tok) {
                if c >= t.channels {
                    continue;
                }
                let r = c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN;
                z += tpl[r.clone()]
                    .iter()
                    .zip(&t.data[r])
                    .map(|(a, b)| a * *b as f64)
                    .sum::<f64>()
                    / TEMPLATE_LEN as f64;
            }
        }
        Ok(z)
    }

    pub fn score(&self, p: &NounPhrase, t: &ObjectTensor) -> Result<f64> {
        Ok(sigmoid(self.logit(p, t)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let shape = [GRID_CHANNELS, OBJ_RES, OBJ_RES, OBJ_RES];
        let j = UnaryJson {
            bias: self.bias,
            templates: self
                .templates
                .iter()
                .map(|(t, v)| (t.word().to_string(), TensorParam::from_f64(v, &shape)))
                .collect(),
        };
        save_json(&j, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let j: UnaryJson = load_json(path)?;
        let mut templates = BTreeMap::new();
        for (w, p) in j.templates {
            let v = p.to_f64()?;
            if v.len() != GRID_CHANNELS * TEMPLATE_LEN || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("template `{w}` is malformed")));
            }
            templates.insert(Token::from_word(&w)?, v);
        }
        Ok(Self { templates, bias: j.bias })
    }
}

#[derive(Serialize, Deserialize)]
struct UnaryJson {
    bias: f64,
    templates: BTreeMap<String, TensorParam>,
}

pub const PAIR_FEATURES: usize = 7;

/// Multiplies the iou entry so that its spread matches the distance entries.
pub const IOU_FEATURE_SCALE: f64 = 10.0;

/// `[center_a - center_b, half_a - half_b, IOU_FEATURE_SCALE * iou(a, b)]`.
pub fn pair_features(a: &Box3D, b: &Box3D) -> [f64; PAIR_FEATURES] {
    let dc = a.center - b.center;
    let dh = a.half_extent - b.half_extent;
    [dc.x, dc.y, dc.z, dh.x, dh.y, dh.z, IOU_FEATURE_SCALE * iou3d(a, b)]
}

/// Logistic scorers for the primitive relations; composites multiply their components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseClassifier {
    /// Per primitive relation: 7 weights followed by the bias.
    pub weights: BTreeMap<RelationKind, [f64; PAIR_FEATURES + 1]>,
}

impl PairwiseClassifier {
    pub fn zeros() -> Self {
        Self {
            weights: RelationKind::PRIMITIVE
                .into_iter()
                .map(|r| (r, [0.0; PAIR_FEATURES + 1]))
                .collect(),
        }
    }

    pub fn primitive_logit(&self, rel: RelationKind, x: &[f64; PAIR_FEATURES]) -> f64 {
        let w = &self.weights[&rel];
        w[PAIR_FEATURES] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn score(&self, rel: RelationKind, a: &Box3D, b: &Box3D) -> f64 {
        let x = pair_features(a, b);
        let prims: &[RelationKind] = if rel == RelationKind::Inside {
            &[RelationKind::Inside]
        } else {
            rel.components()
        };
        prims
            .iter()
            .map(|p| sigmoid(self.primitive_logit(*p, &x)))
            .product()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = load_json(path)?;
        for r in RelationKind::PRIMITIVE {
            let w = c
                .weights
                .get(&r)
                .ok_or_else(|| Error::Invalid(format!("pairwise model lacks {r:?}")))?;
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite weights for {r:?}")));
            }
        }
        Ok(c)
    }
}

/// Pairwise scorer used by the generator when checking sampled layouts.
impl crate::generator::EdgeChecker for PairwiseClassifier {
    fn holds(&self, rel: RelationKind, a: &Box3D, b: &Box3D) -> bool {
        self.score(rel, a, b) > 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModels {
    pub unary: UnaryModel,
    pub pairwise: PairwiseClassifier,
}

/// A grounded scene graph: one proposal per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub referent: Box3D,
    pub assignment: Vec<usize>,
    pub score: f64,
    pub scores: DetectionScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    /// Unary score of each node's assigned proposal.
    pub unary: Vec<f64>,
    /// Pairwise score of each edge under the assignment.
    pub pairwise: Vec<f64>,
}

impl Detection {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "referent": self.referent,
            "assignment": self.assignment,
            "scores": self.scores,
        })
    }
}

/// Unary score of every node against every candidate box.
pub fn unary_table(g: &SceneGraph, grid: &SceneFeatureGrid, boxes: &[Box3D], m: &UnaryModel) -> Result<Vec<Vec<f64>>> {
    let crops: Vec<ObjectTensor> = boxes.iter().map(|b| object_crop(grid, b)).collect::<Result<_>>()?;
    g.nodes
        .iter()
        .map(|p| crops.iter().map(|t| m.score(p, t)).collect())
        .collect()
}

/// Best injective node-to-box assignment given precomputed unary scores.
///
/// Only boxes scoring above the unary threshold are candidates for a node. The
/// score of an assignment is the product of its unary scores and of the pairwise
/// scores of every edge; ties go to the lexicographically smallest assignment.
pub fn best_assignment(
    g: &SceneGraph,
    boxes: &[Box3D],
    unary: &[Vec<f64>],
    pairwise: &PairwiseClassifier,
) -> Result<(Vec<usize>, f64)> {
    let cands: Vec<Vec<usize>> = unary
        .iter()
        .map(|row| (0..row.len()).filter(|k| row[*k] > UNARY_THRESHOLD).collect())
        .collect();
    if let Some(node) = cands.iter().position(|c| c.is_empty()) {
        return Err(Error::NoCandidate { node });
    }
    struct Search<'a> {
        g: &'a SceneGraph,
        boxes: &'a [Box3D],
        unary: &'a [Vec<f64>],
        pairwise: &'a PairwiseClassifier,
        cands: &'a [Vec<usize>],
        cur: Vec<usize>,
        best: Option<(Vec<usize>, f64)>,
        deepest: usize,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, score: f64) {
            self.deepest = self.deepest.max(i);
            if i == self.cands.len() {
                if self.best.as_ref().is_none_or(|(_, s)| score > *s) {
                    self.best = Some((self.cur.clone(), score));
                }
                return;
            }
            for &k in &self.cands[i] {
                if self.cur.contains(&k) {
                    continue;
                }
                let mut s = score * self.unary[i][k];
                self.cur.push(k);
                // edges closed by this node
                for e in &self.g.edges {
                    if e.subject.max(e.object) == i {
                        s *= self
                            .pairwise
                            .score(e.relation, &self.boxes[self.cur[e.subject]], &self.boxes[self.cur[e.object]]);
                    }
                }
                self.go(i + 1, s);
                self.cur.pop();
            }
        }
    }
    let mut search = Search {
        g,
        boxes,
        unary,
        pairwise,
        cands: &cands,
        cur: Vec::new(),
        best: None,
        deepest: 0,
    };
    search.go(0, 1.0);
    match search.best {
        Some(b) => Ok(b),
        None => Err(Error::NoCandidate { node: search.deepest }),
    }
}

/// Grounds every node of `g` to one of `boxes`; node 0 is the referent.
pub fn resolve_with_boxes(g: &SceneGraph, grid: &SceneFeatureGrid, boxes: &[Box3D], models: &DetectorModels) -> Result<Detection> {
    g.validate().map_err(Error::Invalid)?;
    let unary = unary_table(g, grid, boxes, &models.unary)?;
    let (assignment, score) = best_assignment(g, boxes, &unary, &models.pairwise)?;
    let scores = DetectionScores {
        unary: assignment.iter().enumerate().map(|(i, k)| unary[i][*k]).collect(),
        pairwise: g
            .edges
            .iter()
            .map(|e| models.pairwise.score(e.relation, &boxes[assignment[e.subject]], &boxes[assignment[e.object]]))
            .collect(),
    };
    Ok(Detection {
        referent: boxes[assignment[0]],
        assignment,
        score,
        scores,
    })
}

/// Grounds `g` in a feature grid using its own region proposals.
pub fn resolve_referent(g: &SceneGraph, grid: &SceneFeatureGrid, models: &DetectorModels) -> Result<Detection> {
    let props = propose_boxes(grid);
    resolve_with_boxes(g, grid, &props.boxes, models)
}
