//! Supervised training of the unary and pairwise detectors by mini-batch
//! gradient descent, plus finite-difference gradient verification.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    dataset_views, gate_channels, object_crop, observe, pair_features, propose_boxes, sigmoid, PairwiseClassifier,
    UnaryModel, PAIR_FEATURES, UNARY_THRESHOLD,
};
use crate::generator::{fill_attrs, synthesize_scene, table_workspace, SceneConfig, SyntheticScene, WhatModel, WhereModel};
use crate::geometry::{iou3d, relation_oracle, Box3D, RelationKind, Vec3, DEFAULT_MARGIN};
use crate::rng::seeded;
use crate::vocab::{Color, Material, NounPhrase, ObjectAttrs, Shape, Size, Token, LARGE_HALF_EXTENT, SMALL_HALF_EXTENT};
use crate::voxel::{GridSpec, ObjectTensor, OBJ_RES};
use crate::{Error, Result};

const TEMPLATE_LEN: usize = OBJ_RES * OBJ_RES * OBJ_RES;

#[derive(Debug, Clone, PartialEq)]
pub struct UnaryExample {
    pub phrase: NounPhrase,
    pub crop: Arc<ObjectTensor>,
    pub label: bool,
    /// The object whose box was cropped; `None` for empty regions.
    pub object: Option<ObjectAttrs>,
    /// Bit `c` set when crop channel `c` has a nonzero entry.
    active: u32,
}

impl UnaryExample {
    pub fn new(phrase: NounPhrase, crop: Arc<ObjectTensor>, label: bool, object: Option<ObjectAttrs>) -> Self {
        let active = (0..crop.channels.min(32))
            .filter(|c| crop.data[c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN].iter().any(|v| *v != 0.0))
            .fold(0u32, |m, c| m | 1 << c);
        Self {
            phrase,
            crop,
            label,
            object,
            active,
        }
    }

    fn is_active(&self, c: usize) -> bool {
        c < 32 && self.active & (1 << c) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    /// Always a primitive relation.
    pub relation: RelationKind,
    pub a: Box3D,
    pub b: Box3D,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub unary: Vec<UnaryExample>,
    pub pairwise: Vec<PairExample>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl TrainConfig {
    pub fn pairwise_default() -> Self {
        Self {
            lr: 0.1,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            l2: 1e-4,
        }
    }

    pub fn unary_default() -> Self {
        Self {
            lr: 8.0,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            l2: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.epochs == 0 || self.batch_size == 0 || self.l2 < 0.0 {
            return Err(Error::Invalid(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pairwise_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,heldout_accuracy")?;
        for r in &self.epochs {
            let acc = r.heldout_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(w, "{},{:.9},{}", r.epoch, r.train_loss, acc)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// How training examples are drawn from synthetic scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenes: SceneConfig,
    /// Phrases paired with each object crop, half matching and half near misses.
    pub phrases_per_crop: usize,
    /// Containment positives synthesized per scene.
    pub inside_pairs_per_scene: usize,
    pub views: Vec<(f64, f64)>,
    pub grid: GridSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: SceneConfig::default(),
            phrases_per_crop: 8,
            inside_pairs_per_scene: 1,
            views: dataset_views(),
            grid: GridSpec::default(),
        }
    }
}

/// A random phrase that describes `a`: the noun plus each adjective with probability 1/2.
pub fn phrase_for<R: Rng + ?Sized>(a: &ObjectAttrs, rng: &mut R) -> NounPhrase {
    NounPhrase {
        size: rng.random_bool(0.5).then_some(a.size),
        color: rng.random_bool(0.5).then_some(a.color),
        material: rng.random_bool(0.5).then_some(a.material),
        shape: a.shape,
    }
}

/// A phrase that does not describe `a`, biased toward phrases of `other`.
fn phrase_against<R: Rng + ?Sized>(a: &ObjectAttrs, other: Option<&ObjectAttrs>, rng: &mut R) -> NounPhrase {
    if let Some(o) = other {
        for _ in 0..10 {
            let p = phrase_for(o, rng);
            if !p.matches(a) {
                return p;
            }
        }
    }
    loop {
        let p = phrase_for(&fill_attrs(&NounPhrase::new(*Shape::ALL.choose(rng).unwrap()), rng), rng);
        if !p.matches(a) {
            return p;
        }
    }
}

fn other_than<T: Copy + PartialEq, R: Rng + ?Sized>(all: &[T], v: T, rng: &mut R) -> T {
    let rest: Vec<T> = all.iter().copied().filter(|x| *x != v).collect();
    *rest.choose(rng).expect("vocabulary has alternatives")
}

/// A phrase for `a` with exactly one attribute changed. Attributes are picked in
/// proportion to their number of alternative values.
fn near_miss<R: Rng + ?Sized>(a: &ObjectAttrs, rng: &mut R) -> NounPhrase {
    let mut p = phrase_for(a, rng);
    let n_size = Size::ALL.len() - 1;
    let n_color = Color::ALL.len() - 1;
    let n_material = Material::ALL.len() - 1;
    let n_shape = Shape::ALL.len() - 1;
    let mut k = rng.random_range(0..n_size + n_color + n_material + n_shape);
    let mut pick = |n: usize| {
        let hit = k < n;
        k = k.wrapping_sub(n);
        hit
    };
    let which = [pick(n_size), pick(n_color), pick(n_material)].iter().position(|h| *h).unwrap_or(3);
    match which {
        0 => p.size = Some(other_than(&Size::ALL, a.size, rng)),
        1 => p.color = Some(other_than(&Color::ALL, a.color, rng)),
        2 => p.material = Some(other_than(&Material::ALL, a.material, rng)),
        _ => p.shape = other_than(&Shape::ALL, a.shape, rng),
    }
    p
}

/// A cube of random size on the table that touches no object.
fn empty_region<R: Rng + ?Sized>(objects: &[Box3D], rng: &mut R) -> Option<Box3D> {
    for _ in 0..200 {
        let h = rng.random_range(SMALL_HALF_EXTENT..=LARGE_HALF_EXTENT);
        let b = Box3D::cube(Vec3::new(rng.random_range(-2.0..2.0), h, rng.random_range(-2.0..2.0)), h);
        if table_workspace().contains_box(&b) && objects.iter().all(|o| o.intersection_volume(&b) == 0.0) {
            return Some(b);
        }
    }
    None
}

/// Every labeled primitive pair among a scene's boxes.
fn scene_pairs(boxes: &[Box3D], out: &mut BTreeMap<RelationKind, (Vec<PairExample>, Vec<PairExample>)>) {
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if i == j {
                continue;
            }
            for r in RelationKind::PRIMITIVE {
                let label = relation_oracle(r, a, b, DEFAULT_MARGIN);
                let e = PairExample {
                    relation: r,
                    a: *a,
                    b: *b,
                    label,
                };
                let slot = out.entry(r).or_default();
                if label { slot.0.push(e) } else { slot.1.push(e) }
            }
        }
    }
}

/// A containee placed uniformly inside a large container on the table.
fn inside_pair<R: Rng + ?Sized>(where_: &WhereModel, rng: &mut R) -> PairExample {
    let outer = Vec3::repeat(LARGE_HALF_EXTENT);
    let inner = Vec3::repeat(if rng.random_bool(0.5) { SMALL_HALF_EXTENT } else { 0.5 });
    let b = Box3D::new(Vec3::new(rng.random_range(-2.0..2.0), outer.y, rng.random_range(-2.0..2.0)), outer);
    let d = where_.sample_inside(&inner, &outer, rng).expect("containee fits");
    PairExample {
        relation: RelationKind::Inside,
        a: Box3D::new(b.center + d, inner),
        b,
        label: true,
    }
}

/// Supervision from `n_scenes` synthetic scenes with the default data settings.
pub fn make_training_pairs<R: Rng + ?Sized>(n_scenes: usize, rng: &mut R) -> Result<TrainSet> {
    make_training_pairs_with(&DataConfig::default(), n_scenes, Split::Train, rng)
}

/// Builds balanced unary and pairwise examples.
///
/// Each scene is observed from a random dataset view. Unary positives pair a
/// phrase describing an object with a crop of its box (the ground-truth box or
/// the proposal that matches it). Negatives use another object's crop or an
/// empty table region in equal measure. Pairwise examples label every ordered
/// pair of scene boxes under every primitive relation, plus synthesized
/// containment pairs; each relation is then subsampled to equal class counts.
pub fn make_training_pairs_with<R: Rng + ?Sized>(cfg: &DataConfig, n_scenes: usize, split: Split, rng: &mut R) -> Result<TrainSet> {
    if n_scenes == 0 {
        return Err(Error::Invalid("training needs at least one scene".into()));
    }
    let what = WhatModel::canonical(0.0);
    let where_ = WhereModel::canonical();
    let mut acc = Accumulator::default();
    for _ in 0..n_scenes {
        let scene = synthesize_scene(&cfg.scenes, &what, &where_, rng);
        scene_examples(cfg, &scene, &where_, rng, &mut acc)?;
    }
    Ok(acc.finish(split, rng))
}

/// Like [`make_training_pairs_with`] over scenes that already exist, such as a
/// synthesized dataset read back from disk.
pub fn make_training_pairs_from_scenes<R: Rng + ?Sized>(cfg: &DataConfig, scenes: &[SyntheticScene], split: Split, rng: &mut R) -> Result<TrainSet> {
    if scenes.is_empty() {
        return Err(Error::Invalid("training needs at least one scene".into()));
    }
    let where_ = WhereModel::canonical();
    let mut acc = Accumulator::default();
    for scene in scenes {
        scene_examples(cfg, scene, &where_, rng, &mut acc)?;
    }
    Ok(acc.finish(split, rng))
}

#[derive(Default)]
struct Accumulator {
    unary: Vec<UnaryExample>,
    pairs: BTreeMap<RelationKind, (Vec<PairExample>, Vec<PairExample>)>,
}

fn scene_examples<R: Rng + ?Sized>(cfg: &DataConfig, scene: &SyntheticScene, where_: &WhereModel, rng: &mut R, acc: &mut Accumulator) -> Result<()> {
    let unary = &mut acc.unary;
    let pairs = &mut acc.pairs;
    let boxes = scene.boxes();
    let &(az, el) = cfg.views.choose(rng).expect("views");
    let grid = observe(&scene.objects, az, el, &cfg.grid)?;
    let props = propose_boxes(&grid).boxes;
    let view_box = |k: usize, rng: &mut R| -> Box3D {
        let matched = props
            .iter()
            .filter(|p| iou3d(p, &boxes[k]) >= 0.5)
            .max_by(|a, b| iou3d(a, &boxes[k]).total_cmp(&iou3d(b, &boxes[k])));
        match matched {
            Some(p) if rng.random_bool(0.5) => *p,
            _ => boxes[k],
        }
    };
    let half = cfg.phrases_per_crop / 2;
    let n_obj = scene.objects.len();
    for k in 0..n_obj {
        let a = scene.objects[k].attrs;
        let crop = Arc::new(object_crop(&grid, &view_box(k, rng))?);
        for i in 0..half {
            let phrase = match scene.graph.nodes.get(k) {
                Some(p) if i == 0 => *p,
                _ => phrase_for(&a, rng),
            };
            unary.push(UnaryExample::new(phrase, crop.clone(), true, Some(a)));
            let phrase = if n_obj >= 2 && rng.random_bool(0.25) {
                let mut o = rng.random_range(0..n_obj - 1);
                if o >= k {
                    o += 1;
                }
                phrase_against(&a, Some(&scene.objects[o].attrs), rng)
            } else {
                near_miss(&a, rng)
            };
            unary.push(UnaryExample::new(phrase, crop.clone(), false, Some(a)));
        }
    }
    if let Some(b) = empty_region(&boxes, rng) {
        let crop = Arc::new(object_crop(&grid, &b)?);
        for _ in 0..half {
            let p = phrase_for(&fill_attrs(&NounPhrase::new(*Shape::ALL.choose(rng).unwrap()), rng), rng);
            unary.push(UnaryExample::new(p, crop.clone(), false, None));
        }
    }
    scene_pairs(&boxes, pairs);
    for _ in 0..cfg.inside_pairs_per_scene {
        pairs.entry(RelationKind::Inside).or_default().0.push(inside_pair(where_, rng));
    }
    Ok(())
}

impl Accumulator {
    fn finish<R: Rng + ?Sized>(self, split: Split, rng: &mut R) -> TrainSet {
        let Accumulator { mut unary, pairs } = self;
        // equal class counts per relation
        let mut pairwise = Vec::new();
        for (_, (mut pos, mut neg)) in pairs {
            let n = pos.len().min(neg.len());
            pos.shuffle(rng);
            neg.shuffle(rng);
            pairwise.extend(pos.into_iter().take(n));
            pairwise.extend(neg.into_iter().take(n));
        }
        // unary positives and negatives may differ by failed empty-region draws
        let n_pos = unary.iter().filter(|e| e.label).count();
        let n_neg = unary.len() - n_pos;
        let mut excess = n_pos.abs_diff(n_neg);
        let drop_label = n_pos > n_neg;
        unary.retain(|e| {
            if excess > 0 && e.label == drop_label {
                excess -= 1;
                false
            } else {
                true
            }
        });
        TrainSet { unary, pairwise, split }
    }
}

fn bce(z: f64, y: bool) -> f64 {
    // log(1 + e^-z) for positives, log(1 + e^z) for negatives, stable for large |z|
    let s = if y { -z } else { z };
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Loss and gradient interface shared by both model families.
pub trait GradModel {
    type Example;

    fn params(&self) -> Vec<f64>;
    /// Mean cross-entropy plus L2 penalty over `batch`.
    fn loss(&self, batch: &[&Self::Example], l2: f64) -> f64;
    fn grad(&self, batch: &[&Self::Example], l2: f64) -> Vec<f64>;
    /// Loss with parameter `i` set to `value`, all else fixed.
    fn loss_at(&self, batch: &[&Self::Example], l2: f64, i: usize, value: f64) -> f64;

    /// Central differences `(L(w_i + h) - L(w_i - h)) / 2h` for every parameter.
    fn numeric_grad(&self, batch: &[&Self::Example], l2: f64, h: f64) -> Vec<f64> {
        self.params()
            .iter()
            .enumerate()
            .map(|(i, &w)| (self.loss_at(batch, l2, i, w + h) - self.loss_at(batch, l2, i, w - h)) / (2.0 * h))
            .collect()
    }
}

/// Largest relative discrepancy between the analytic gradient and central
/// differences with step 1e-4, over every parameter. Relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients<M: GradModel>(m: &M, batch: &[&M::Example], l2: f64) -> f64 {
    let g = m.grad(batch, l2);
    let n = m.numeric_grad(batch, l2, 1e-4);
    assert_eq!(g.len(), n.len());
    g.iter()
        .zip(&n)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

impl GradModel for PairwiseClassifier {
    type Example = PairExample;

    /// Per primitive relation in order: 7 weights then the bias.
    fn params(&self) -> Vec<f64> {
        RelationKind::PRIMITIVE
            .iter()
            .flat_map(|r| self.weights[r].iter().copied())
            .collect()
    }

    fn loss(&self, batch: &[&PairExample], l2: f64) -> f64 {
        let data = batch
            .iter()
            .map(|e| bce(self.primitive_logit(e.relation, &pair_features(&e.a, &e.b)), e.label))
            .sum::<f64>()
            / batch.len() as f64;
        let reg: f64 = self
            .weights
            .values()
            .map(|w| w[..PAIR_FEATURES].iter().map(|v| v * v).sum::<f64>())
            .sum();
        data + 0.5 * l2 * reg
    }

    fn grad(&self, batch: &[&PairExample], l2: f64) -> Vec<f64> {
        let stride = PAIR_FEATURES + 1;
        let mut g = vec![0.0; RelationKind::PRIMITIVE.len() * stride];
        let slot = |r: RelationKind| RelationKind::PRIMITIVE.iter().position(|p| *p == r).expect("primitive relation");
        for e in batch {
            let x = pair_features(&e.a, &e.b);
            let d = (sigmoid(self.primitive_logit(e.relation, &x)) - if e.label { 1.0 } else { 0.0 }) / batch.len() as f64;
            let o = slot(e.relation) * stride;
            for k in 0..PAIR_FEATURES {
                g[o + k] += d * x[k];
            }
            g[o + PAIR_FEATURES] += d;
        }
        for (s, r) in RelationKind::PRIMITIVE.iter().enumerate() {
            for k in 0..PAIR_FEATURES {
                g[s * stride + k] += l2 * self.weights[r][k];
            }
        }
        g
    }

    fn loss_at(&self, batch: &[&PairExample], l2: f64, i: usize, value: f64) -> f64 {
        let stride = PAIR_FEATURES + 1;
        let mut m = self.clone();
        m.weights.get_mut(&RelationKind::PRIMITIVE[i / stride]).unwrap()[i % stride] = value;
        m.loss(batch, l2)
    }
}

/// Unary parameters: the gated channels of every token template (tokens in
/// order, channels in gate order, 16^3 voxels each), then the bias. Template
/// entries outside a token's gate never reach a score and are not parameters.
/// The L2 penalty on templates is normalized by 16^3, like the scores.
struct UnaryLayout {
    blocks: Vec<(Token, usize)>,
}

impl UnaryLayout {
    fn new(m: &UnaryModel) -> Self {
        Self {
            blocks: m
                .templates
                .keys()
                .flat_map(|t| gate_channels(*t).into_iter().map(move |c| (*t, c)))
                .collect(),
        }
    }

    fn len(&self) -> usize {
        self.blocks.len() * TEMPLATE_LEN + 1
    }

    fn locate(&self, i: usize) -> Option<(Token, usize, usize)> {
        let b = i / TEMPLATE_LEN;
        self.blocks.get(b).map(|(t, c)| (*t, *c, i % TEMPLATE_LEN))
    }
}

fn template_sq(m: &UnaryModel) -> f64 {
    m.templates
        .iter()
        .flat_map(|(t, v)| gate_channels(*t).into_iter().map(move |c| &v[c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN]))
        .flatten()
        .map(|w| w * w)
        .sum()
}

/// `UnaryModel::logit` restricted to the crop's nonzero channels.
fn example_logit(m: &UnaryModel, e: &UnaryExample) -> f64 {
    let mut z = m.bias;
    for tok in e.phrase.tokens() {
        let tpl = &m.templates[&tok];
        for c in gate_channels(tok) {
            if !e.is_active(c) {
                continue;
            }
            let r = c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN;
            z += tpl[r.clone()].iter().zip(&e.crop.data[r]).map(|(a, b)| a * *b as f64).sum::<f64>() / TEMPLATE_LEN as f64;
        }
    }
    z
}

fn crop_value(e: &UnaryExample, c: usize, v: usize) -> f64 {
    if c < e.crop.channels {
        e.crop.data[c * TEMPLATE_LEN + v] as f64
    } else {
        0.0
    }
}

impl GradModel for UnaryModel {
    type Example = UnaryExample;

    fn params(&self) -> Vec<f64> {
        let layout = UnaryLayout::new(self);
        let mut p = Vec::with_capacity(layout.len());
        for (t, c) in &layout.blocks {
            p.extend_from_slice(&self.templates[t][c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN]);
        }
        p.push(self.bias);
        p
    }

    fn loss(&self, batch: &[&UnaryExample], l2: f64) -> f64 {
        let data = batch
            .iter()
            .map(|e| bce(example_logit(self, e), e.label))
            .sum::<f64>()
            / batch.len() as f64;
        data + 0.5 * l2 * template_sq(self) / TEMPLATE_LEN as f64
    }

    fn grad(&self, batch: &[&UnaryExample], l2: f64) -> Vec<f64> {
        let layout = UnaryLayout::new(self);
        let block_of: BTreeMap<(Token, usize), usize> = layout.blocks.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut g = vec![0.0; layout.len()];
        let nl = TEMPLATE_LEN as f64;
        for e in batch {
            let z = example_logit(self, e);
            let d = (sigmoid(z) - if e.label { 1.0 } else { 0.0 }) / batch.len() as f64;
            for tok in e.phrase.tokens() {
                for c in gate_channels(tok) {
                    if !e.is_active(c) {
                        continue;
                    }
                    let o = block_of[&(tok, c)] * TEMPLATE_LEN;
                    let x = &e.crop.data[c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN];
                    for (gv, xv) in g[o..o + TEMPLATE_LEN].iter_mut().zip(x) {
                        *gv += d * *xv as f64 / nl;
                    }
                }
            }
            *g.last_mut().unwrap() += d;
        }
        if l2 != 0.0 {
            for (b, (t, c)) in layout.blocks.iter().enumerate() {
                let w = &self.templates[t][c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN];
                for (gv, wv) in g[b * TEMPLATE_LEN..(b + 1) * TEMPLATE_LEN].iter_mut().zip(w) {
                    *gv += l2 * wv / nl;
                }
            }
        }
        g
    }

    /// Incremental: only logits of examples whose phrase uses the perturbed token change.
    fn loss_at(&self, batch: &[&UnaryExample], l2: f64, i: usize, value: f64) -> f64 {
        let layout = UnaryLayout::new(self);
        let nl = TEMPLATE_LEN as f64;
        let reg = template_sq(self);
        match layout.locate(i) {
            None => {
                let data = batch
                    .iter()
                    .map(|e| bce(example_logit(self, e) - self.bias + value, e.label))
                    .sum::<f64>()
                    / batch.len() as f64;
                data + 0.5 * l2 * reg / nl
            }
            Some((tok, c, v)) => {
                let old = self.templates[&tok][c * TEMPLATE_LEN + v];
                let delta = value - old;
                let data = batch
                    .iter()
                    .map(|e| {
                        let mut z = example_logit(self, e);
                        if e.phrase.tokens().contains(&tok) {
                            z += delta * crop_value(e, c, v) / nl;
                        }
                        bce(z, e.label)
                    })
                    .sum::<f64>()
                    / batch.len() as f64;
                data + 0.5 * l2 * (reg - old * old + value * value) / nl
            }
        }
    }

    /// Same differences as the default, accumulated term by term: moving one
    /// template entry shifts only the logits of examples whose phrase uses that
    /// token, and the penalty changes by a known amount. Summing the per-term
    /// changes avoids cancelling two large totals.
    fn numeric_grad(&self, batch: &[&UnaryExample], l2: f64, h: f64) -> Vec<f64> {
        let layout = UnaryLayout::new(self);
        let nl = TEMPLATE_LEN as f64;
        let nb = batch.len() as f64;
        let z: Vec<f64> = batch.iter().map(|e| example_logit(self, e)).collect();
        let diff = |shift: &dyn Fn(usize) -> f64| -> f64 {
            batch
                .iter()
                .enumerate()
                .map(|(k, e)| {
                    let dz = shift(k);
                    if dz == 0.0 {
                        0.0
                    } else {
                        bce(z[k] + dz, e.label) - bce(z[k] - dz, e.label)
                    }
                })
                .sum::<f64>()
                / nb
        };
        let mut out = Vec::with_capacity(layout.len());
        for (t, c) in &layout.blocks {
            let uses: Vec<bool> = batch.iter().map(|e| e.phrase.tokens().contains(t)).collect();
            for v in 0..TEMPLATE_LEN {
                let w = self.templates[t][c * TEMPLATE_LEN + v];
                let data = diff(&|k| if uses[k] { h * crop_value(batch[k], *c, v) / nl } else { 0.0 });
                let reg = 0.5 * l2 * ((w + h) * (w + h) - (w - h) * (w - h)) / nl;
                out.push((data + reg) / (2.0 * h));
            }
        }
        out.push(diff(&|_| h) / (2.0 * h));
        out
    }
}

/// Mini-batch SGD over shuffled examples; the loss on the full set is logged after each epoch.
fn sgd<M: GradModel + Clone>(
    mut m: M,
    examples: &[M::Example],
    cfg: &TrainConfig,
    apply: impl Fn(&mut M, &[f64], f64),
    heldout: impl Fn(&M) -> Option<f64>,
) -> Result<(M, TrainLog)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&M::Example> = chunk.iter().map(|i| &examples[*i]).collect();
            let g = m.grad(&batch, cfg.l2);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            apply(&mut m, &g, cfg.lr);
        }
        let all: Vec<&M::Example> = examples.iter().collect();
        let train_loss = m.loss(&all, cfg.l2);
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {train_loss:.6}");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            heldout_accuracy: heldout(&m),
        });
    }
    Ok((m, log))
}

/// Fits the pairwise classifier from zero weights.
pub fn train_pairwise(ts: &TrainSet, heldout: Option<&TrainSet>, cfg: &TrainConfig) -> Result<(PairwiseClassifier, TrainLog)> {
    train_pairwise_from(PairwiseClassifier::zeros(), ts, heldout, cfg)
}

pub fn train_pairwise_from(
    init: PairwiseClassifier,
    ts: &TrainSet,
    heldout: Option<&TrainSet>,
    cfg: &TrainConfig,
) -> Result<(PairwiseClassifier, TrainLog)> {
    let stride = PAIR_FEATURES + 1;
    sgd(
        init,
        &ts.pairwise,
        cfg,
        |m, g, lr| {
            for (s, r) in RelationKind::PRIMITIVE.iter().enumerate() {
                let w = m.weights.get_mut(r).unwrap();
                for k in 0..stride {
                    w[k] -= lr * g[s * stride + k];
                }
            }
        },
        |m| heldout.map(|h| pairwise_accuracy(m, &h.pairwise)),
    )
}

/// Fits the unary model from zero templates. Template entries take steps of
/// `lr * 16^3` times their gradient, undoing the `1/16^3` normalization of the
/// score; the bias takes steps of `lr`.
pub fn train_unary(ts: &TrainSet, heldout: Option<&TrainSet>, cfg: &TrainConfig) -> Result<(UnaryModel, TrainLog)> {
    train_unary_from(UnaryModel::zeros(), ts, heldout, cfg)
}

pub fn train_unary_from(init: UnaryModel, ts: &TrainSet, heldout: Option<&TrainSet>, cfg: &TrainConfig) -> Result<(UnaryModel, TrainLog)> {
    let layout = UnaryLayout::new(&init);
    sgd(
        init,
        &ts.unary,
        cfg,
        |m, g, lr| {
            let step = lr * TEMPLATE_LEN as f64;
            for (b, (t, c)) in layout.blocks.iter().enumerate() {
                let w = &mut m.templates.get_mut(t).unwrap()[c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN];
                for (wv, gv) in w.iter_mut().zip(&g[b * TEMPLATE_LEN..(b + 1) * TEMPLATE_LEN]) {
                    *wv -= step * gv;
                }
            }
            m.bias -= lr * g.last().unwrap();
        },
        |m| heldout.map(|h| unary_accuracy(m, &h.unary)),
    )
}

/// Fraction of pairs where `score > 0.5` agrees with the label.
pub fn pairwise_accuracy(c: &PairwiseClassifier, examples: &[PairExample]) -> f64 {
    if examples.is_empty() {
        return 1.0;
    }
    let ok = examples
        .iter()
        .filter(|e| (c.score(e.relation, &e.a, &e.b) > 0.5) == e.label)
        .count();
    ok as f64 / examples.len() as f64
}

/// Held-out agreement per primitive relation.
pub fn pairwise_accuracy_by_relation(c: &PairwiseClassifier, examples: &[PairExample]) -> BTreeMap<RelationKind, f64> {
    RelationKind::PRIMITIVE
        .iter()
        .map(|r| {
            let sub: Vec<PairExample> = examples.iter().filter(|e| e.relation == *r).copied().collect();
            (*r, pairwise_accuracy(c, &sub))
        })
        .collect()
}

/// Fraction of examples where `score > 0.4` agrees with the label.
pub fn unary_accuracy(m: &UnaryModel, examples: &[UnaryExample]) -> f64 {
    if examples.is_empty() {
        return 1.0;
    }
    let ok = examples
        .iter()
        .filter(|e| (sigmoid(example_logit(m, e)) > UNARY_THRESHOLD) == e.label)
        .count();
    ok as f64 / examples.len() as f64
}

/// Copy of a set with every color word dropped from the phrases.
pub fn without_color(ts: &TrainSet) -> TrainSet {
    let mut out = ts.clone();
    for e in &mut out.unary {
        e.phrase.color = None;
        e.label = e.object.is_some_and(|a| e.phrase.matches(&a));
    }
    out
}

/// Color-contrast probes: every positive crop of an object under its full
/// phrase (label 1) and under the same phrase with another color (label 0).
pub fn color_contrast_set<R: Rng + ?Sized>(ts: &TrainSet, rng: &mut R) -> Vec<UnaryExample> {
    let mut out = Vec::new();
    for e in ts.unary.iter().filter(|e| e.label) {
        let Some(a) = e.object else { continue };
        let mut pos = e.clone();
        pos.phrase = a.full_phrase();
                let mut neg = pos.clone();
        neg.phrase.color = Some(other_than(&Color::ALL, a.color, rng));
        neg.label = false;
        out.push(pos);
        out.push(neg);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Color, Material, Size};

    fn small_set(seed: u64, n: usize) -> TrainSet {
        make_training_pairs(n, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn one_scene_yields_both_classes() {
        let cfg = DataConfig {
            scenes: SceneConfig {
                utterances: crate::grammar::GenConfig {
                    n_objects_min: 2,
                    n_objects_max: 2,
                    ..Default::default()
                },
                max_distractors: 0,
            },
            ..Default::default()
        };
        let ts = make_training_pairs_with(&cfg, 1, Split::Train, &mut seeded(31)).unwrap();
        assert!(ts.unary.iter().filter(|e| e.label).count() >= 2);
        assert!(ts.unary.iter().filter(|e| !e.label).count() >= 2);
        assert!(ts.pairwise.iter().filter(|e| e.label).count() >= 1);
    }

    #[test]
    fn labels_agree_with_the_oracle() {
        let ts = small_set(32, 20);
        for e in &ts.pairwise {
            assert_eq!(relation_oracle(e.relation, &e.a, &e.b, DEFAULT_MARGIN), e.label);
            assert!(RelationKind::PRIMITIVE.contains(&e.relation));
        }
        for e in &ts.unary {
            assert_eq!(e.crop.channels, crate::detector::FEATURE_CHANNELS);
        }
    }

    #[test]
    fn zero_scenes_is_an_error() {
        assert!(make_training_pairs(0, &mut seeded(0)).is_err());
    }

    #[test]
    fn classes_are_balanced() {
        let ts = small_set(33, 40);
        let pos = ts.unary.iter().filter(|e| e.label).count();
        assert_eq!(pos * 2, ts.unary.len());
        for r in RelationKind::PRIMITIVE {
            let sub: Vec<_> = ts.pairwise.iter().filter(|e| e.relation == r).collect();
            assert!(!sub.is_empty());
            assert_eq!(sub.iter().filter(|e| e.label).count() * 2, sub.len(), "{r:?}");
        }
    }

    #[test]
    fn quadratic_gradient_check_is_exact() {
        struct Quad {
            w: Vec<f64>,
        }
        impl GradModel for Quad {
            type Example = f64;
            fn params(&self) -> Vec<f64> {
                self.w.clone()
            }
            fn loss(&self, batch: &[&f64], l2: f64) -> f64 {
                let s: f64 = batch.iter().map(|x| *x * *x).sum();
                self.w.iter().enumerate().map(|(i, w)| (i as f64 + 1.0) * (w - s).powi(2)).sum::<f64>() + 0.5 * l2 * self.w.iter().map(|w| w * w).sum::<f64>()
            }
            fn grad(&self, batch: &[&f64], l2: f64) -> Vec<f64> {
                let s: f64 = batch.iter().map(|x| *x * *x).sum();
                self.w.iter().enumerate().map(|(i, w)| 2.0 * (i as f64 + 1.0) * (w - s) + l2 * w).collect()
            }
            fn loss_at(&self, batch: &[&f64], l2: f64, i: usize, value: f64) -> f64 {
                let mut w = self.w.clone();
                w[i] = value;
                Quad { w }.loss(batch, l2)
            }
        }
        let q = Quad {
            w: vec![0.5, -1.25, 2.0, 0.0],
        };
        let xs = [0.5, 1.5];
        let batch: Vec<&f64> = xs.iter().collect();
        assert!(check_gradients(&q, &batch, 0.1) < 1e-8);
    }

    fn random_pairwise<R: Rng>(rng: &mut R) -> PairwiseClassifier {
        let mut c = PairwiseClassifier::zeros();
        for w in c.weights.values_mut() {
            for v in w.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
        }
        c
    }

    #[test]
    fn pairwise_gradients_match_differences() {
        let ts = small_set(34, 10);
        let mut rng = seeded(35);
        for _ in 0..5 {
            let c = random_pairwise(&mut rng);
            let batch: Vec<&PairExample> = ts.pairwise.choose_multiple(&mut rng, 16).collect();
            assert!(check_gradients(&c, &batch, 1e-2) < 1e-5);
        }
    }

    #[test]
    fn unary_gradients_match_differences() {
        let ts = small_set(36, 4);
        let mut rng = seeded(37);
        let mut m = UnaryModel::zeros();
        for (t, v) in m.templates.iter_mut() {
            for c in gate_channels(*t) {
                for w in &mut v[c * TEMPLATE_LEN..(c + 1) * TEMPLATE_LEN] {
                    *w = rng.random_range(-20.0..20.0);
                }
            }
        }
        m.bias = 0.3;
        let batch: Vec<&UnaryExample> = ts.unary.iter().take(6).collect();
        let err = check_gradients(&m, &batch, 1e-2);
        assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let ts = small_set(38, 6);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::pairwise_default()
        };
        let (c, log) = train_pairwise(&ts, None, &cfg).unwrap();
        assert_eq!(c, PairwiseClassifier::zeros());
        assert_eq!(log.epochs.len(), 2);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..TrainConfig::unary_default()
        };
        let (u, _) = train_unary(&ts, None, &cfg).unwrap();
        assert_eq!(u, UnaryModel::zeros());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let ts = small_set(39, 6);
        let mut ts2 = ts.clone();
        // an absurd box makes the features overflow once weights explode
        for e in &mut ts2.pairwise {
            e.a = Box3D::new(e.a.center * 1e150, e.a.half_extent);
        }
        let cfg = TrainConfig {
            lr: 1e200,
            epochs: 3,
            ..TrainConfig::pairwise_default()
        };
        assert!(matches!(train_pairwise(&ts2, None, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let ts = small_set(40, 8);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::pairwise_default()
        };
        let (a, la) = train_pairwise(&ts, None, &cfg).unwrap();
        let (b, lb) = train_pairwise(&ts, None, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn log_csv_has_one_row_per_epoch() {
        let log = TrainLog {
            epochs: (1..=3)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    heldout_accuracy: Some(0.5),
                })
                .collect(),
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,heldout_accuracy");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,0.333333333,"));
    }

    #[test]
    fn phrases_for_an_object_match_it() {
        let a = ObjectAttrs {
            size: Size::Large,
            color: Color::Cyan,
            material: Material::Rubber,
            shape: Shape::Bowl,
        };
        let mut rng = seeded(41);
        for _ in 0..100 {
            assert!(phrase_for(&a, &mut rng).matches(&a));
            assert!(!phrase_against(&a, Some(&a), &mut rng).matches(&a));
        }
    }
}
