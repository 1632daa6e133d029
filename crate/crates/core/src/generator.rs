//! Language-conditioned scene imagination: appearance ("what") and offset
//! ("where") sampling, canvas assembly with intersection rejection, and
//! affordability inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{iou3d, relation_oracle, shape_contains_local, Box3D, RelationKind, Vec3, DEFAULT_MARGIN};
use crate::grammar::{generate_utterance, GenConfig, SceneGraph};
use crate::params::{load_json, save_json, TensorParam};
use crate::vocab::{Color, Material, NounPhrase, ObjectAttrs, Shape, Size, Token};
use crate::voxel::{ch, draw_into, GridSpec, ObjectTensor, SceneFeatureGrid, SceneObject, GRID_CHANNELS, OBJ_RES};
use crate::{Error, Result};

/// Default sample budget before an utterance is declared infeasible.
pub const DEFAULT_BUDGET: u64 = 1000;

/// Largest pairwise 3D IoU tolerated between placed objects.
pub const IOU_MAX: f64 = 0.1;

/// Per-token appearance tensor, the channels it gates, and an optional size.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEntry {
    pub tensor: Vec<f32>,
    pub gate: Vec<bool>,
    pub size: Option<Vec3>,
}

/// Appearance generator: the gated elementwise product of token tensors plus noise.
#[derive(Debug, Clone, PartialEq)]
pub struct WhatModel {
    pub entries: BTreeMap<Token, TokenEntry>,
    pub sigma: f64,
}

fn voxel_count() -> usize {
    OBJ_RES * OBJ_RES * OBJ_RES
}

/// Mask of a shape inscribed in the unit tensor cube, sampled at voxel centers.
pub fn shape_mask(shape: Shape) -> Vec<f32> {
    let n = OBJ_RES;
    let mut m = vec![0.0; voxel_count()];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let q = Vec3::new(x as f64, y as f64, z as f64).map(|v| (v + 0.5) / n as f64 * 2.0 - 1.0);
                if shape_contains_local(shape, &q) {
                    m[(z * n + y) * n + x] = 1.0;
                }
            }
        }
    }
    m
}

fn group_gate(start: usize, len: usize) -> Vec<bool> {
    (0..GRID_CHANNELS).map(|c| (start..start + len).contains(&c)).collect()
}

/// Constant per-channel values broadcast over the 16^3 block.
fn channel_tensor(values: &[f32]) -> Vec<f32> {
    let n = voxel_count();
    let mut t = vec![0.0; n * GRID_CHANNELS];
    for (c, v) in values.iter().enumerate() {
        t[c * n..(c + 1) * n].fill(*v);
    }
    t
}

fn one_hot_group(start: usize, len: usize, hot: usize) -> Vec<f32> {
    let mut v = vec![1.0; GRID_CHANNELS];
    for k in 0..len {
        v[start + k] = if k == hot { 1.0 } else { 0.0 };
    }
    v
}

impl WhatModel {
    /// The declared model: nouns carry the solid mask on every feature channel (and
    /// their own shape channel), adjectives carry a one-hot over their group.
    pub fn canonical(sigma: f64) -> Self {
        assert!(sigma >= 0.0);
        let n = voxel_count();
        let mut entries = BTreeMap::new();
        for shape in Shape::ALL {
            let mask = shape_mask(shape);
            let mut t = vec![0.0; n * GRID_CHANNELS];
            for c in 0..ch::SURFACE {
                let on = !(ch::SHAPE..ch::SHAPE + ch::N_SHAPE).contains(&c) || c == ch::SHAPE + shape.index();
                if on {
                    t[c * n..(c + 1) * n].copy_from_slice(&mask);
                }
            }
            entries.insert(
                Token::Shape(shape),
                TokenEntry {
                    tensor: t,
                    gate: vec![true; GRID_CHANNELS],
                    size: None,
                },
            );
        }
        for color in Color::ALL {
            entries.insert(
                Token::Color(color),
                TokenEntry {
                    tensor: channel_tensor(&one_hot_group(ch::COLOR, ch::N_COLOR, color.index())),
                    gate: group_gate(ch::COLOR, ch::N_COLOR),
                    size: None,
                },
            );
        }
        for m in Material::ALL {
            entries.insert(
                Token::Material(m),
                TokenEntry {
                    tensor: channel_tensor(&one_hot_group(ch::MATERIAL, ch::N_MATERIAL, m.index())),
                    gate: group_gate(ch::MATERIAL, ch::N_MATERIAL),
                    size: None,
                },
            );
        }
        for s in Size::ALL {
            let k = match s {
                Size::Small => 0,
                Size::Large => 1,
            };
            entries.insert(
                Token::Size(s),
                TokenEntry {
                    tensor: channel_tensor(&one_hot_group(ch::SIZE, ch::N_SIZE, k)),
                    gate: group_gate(ch::SIZE, ch::N_SIZE),
                    size: Some(Vec3::repeat(2.0 * s.half_extent())),
                },
            );
        }
        Self { entries, sigma }
    }

    fn entry(&self, tok: Token) -> Result<&TokenEntry> {
        self.entries
            .get(&tok)
            .ok_or_else(|| Error::UnknownToken(tok.word().to_string()))
    }

    /// Noise-free appearance of a phrase.
    pub fn mean(&self, p: &NounPhrase) -> Result<ObjectTensor> {
        let n = voxel_count();
        let mut data = vec![1.0f32; n * GRID_CHANNELS];
        let mut size = Vec3::repeat(2.0 * crate::vocab::MEDIUM_HALF_EXTENT);
        for tok in p.tokens() {
            let e = self.entry(tok)?;
            for c in 0..GRID_CHANNELS {
                if e.gate[c] {
                    for (d, s) in data[c * n..(c + 1) * n].iter_mut().zip(&e.tensor[c * n..(c + 1) * n]) {
                        *d *= *s;
                    }
                }
            }
            if let Some(s) = e.size {
                size = s;
            }
        }
        Ok(ObjectTensor {
            res: OBJ_RES,
            channels: GRID_CHANNELS,
            data,
            size,
        })
    }

    /// Size vector `s^o` of a phrase (medium when no size word is given).
    pub fn size_of(&self, p: &NounPhrase) -> Result<Vec3> {
        let mut size = Vec3::repeat(2.0 * crate::vocab::MEDIUM_HALF_EXTENT);
        for tok in p.tokens() {
            if let Some(s) = self.entry(tok)?.size {
                size = s;
            }
        }
        Ok(size)
    }

    /// Samples an object tensor for a phrase.
    pub fn generate<R: Rng + ?Sized>(&self, p: &NounPhrase, rng: &mut R) -> Result<ObjectTensor> {
        let mut t = self.mean(p)?;
        if self.sigma > 0.0 {
            let s = self.sigma as f32;
            for v in t.data.iter_mut() {
                let z: f32 = StandardNormal.sample(rng);
                *v += s * z;
            }
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(&WhatJson::from(self), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json::<WhatJson>(path)?.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct TokenJson {
    tensor: TensorParam,
    gate: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    size: Option<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct WhatJson {
    sigma: f64,
    tokens: BTreeMap<String, TokenJson>,
}

impl From<&WhatModel> for WhatJson {
    fn from(m: &WhatModel) -> Self {
        let shape = [GRID_CHANNELS, OBJ_RES, OBJ_RES, OBJ_RES];
        WhatJson {
            sigma: m.sigma,
            tokens: m
                .entries
                .iter()
                .map(|(tok, e)| {
                    (
                        tok.word().to_string(),
                        TokenJson {
                            tensor: TensorParam::from_f32(&e.tensor, &shape),
                            gate: (0..GRID_CHANNELS).filter(|c| e.gate[*c]).collect(),
                            size: e.size.map(|s| [s.x, s.y, s.z]),
                        },
                    )
                })
                .collect(),
        }
    }
}

impl TryFrom<WhatJson> for WhatModel {
    type Error = Error;

    fn try_from(j: WhatJson) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (word, e) in j.tokens {
            let tensor = e.tensor.to_f32()?;
            if tensor.len() != voxel_count() * GRID_CHANNELS {
                return Err(Error::Invalid(format!("token `{word}` tensor has wrong size")));
            }
            let mut gate = vec![false; GRID_CHANNELS];
            for c in e.gate {
                *gate.get_mut(c).ok_or_else(|| Error::Invalid(format!("gate channel {c}")))? = true;
            }
            entries.insert(
                Token::from_word(&word)?,
                TokenEntry {
                    tensor,
                    gate,
                    size: e.size.map(|s| Vec3::new(s[0], s[1], s[2])),
                },
            );
        }
        for tok in Token::all() {
            if !entries.contains_key(&tok) {
                return Err(Error::Invalid(format!("what model lacks token `{}`", tok.word())));
            }
        }
        Ok(WhatModel {
            entries,
            sigma: j.sigma,
        })
    }
}

/// Nearest library entry by Euclidean feature distance; ties go to the lowest id.
pub fn retrieve_prototype(t: &ObjectTensor, library: &[(usize, ObjectTensor)]) -> usize {
    assert!(!library.is_empty(), "prototype library is empty");
    let mut best = (f64::INFINITY, usize::MAX);
    for (id, proto) in library {
        let d: f64 = t
            .data
            .iter()
            .zip(&proto.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        if d < best.0 || (d == best.0 && *id < best.1) {
            best = (d, *id);
        }
    }
    best.1
}

/// Noise-free prototypes for every color and shape pair, with ids in
/// `color * 4 + shape` order.
pub fn prototype_library(what: &WhatModel) -> Vec<(usize, NounPhrase, ObjectTensor)> {
    let mut out = Vec::new();
    for c in Color::ALL {
        for s in Shape::ALL {
            let p = NounPhrase::new(s).with_color(c);
            out.push((c.index() * 4 + s.index(), p, what.mean(&p).expect("canonical tokens")));
        }
    }
    out
}

/// Truncated Gaussian over the offset realizing one relation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetDistribution {
    pub mean: [f64; 3],
    pub stddev: [f64; 3],
    pub margin: f64,
}

/// Offset generator: relation -> subject position minus object position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhereModel {
    pub relations: BTreeMap<RelationKind, OffsetDistribution>,
    pub noise_dim: usize,
}

pub const OFFSET_MAGNITUDE: f64 = 1.2;
pub const OFFSET_STDDEV: f64 = 0.4;

impl WhereModel {
    pub fn canonical() -> Self {
        let mut relations = BTreeMap::new();
        for rel in RelationKind::AXIAL {
            let tests = rel.axis_tests();
            let per_axis = OFFSET_MAGNITUDE / (tests.len() as f64).sqrt();
            let mut mean = [0.0; 3];
            for t in tests {
                mean[t.axis] = t.sign as f64 * per_axis;
            }
            relations.insert(
                rel,
                OffsetDistribution {
                    mean,
                    stddev: [OFFSET_STDDEV; 3],
                    margin: DEFAULT_MARGIN,
                },
            );
        }
        Self {
            relations,
            noise_dim: 50,
        }
    }

    /// Gaussian noise of `noise_dim` dimensions, summed per axis group (index mod 3)
    /// and normalized. Each group sum is itself a unit normal, so it is drawn
    /// directly; an axis with an empty group gets no noise.
    fn axis_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        Vec3::from_fn(|k, _| {
            if k < self.noise_dim {
                StandardNormal.sample(rng)
            } else {
                0.0
            }
        })
    }

    /// One offset for an axial relation, rejection-truncated so that it satisfies
    /// the relation at the distribution's margin.
    pub fn sample_axial<R: Rng + ?Sized>(&self, rel: RelationKind, rng: &mut R) -> Vec3 {
        let d = self
            .relations
            .get(&rel)
            .unwrap_or_else(|| panic!("no offset distribution for {rel:?}"));
        let unit = Box3D::cube(Vec3::zeros(), 0.5);
        loop {
            let z = self.axis_noise(rng);
            let off = Vec3::from_fn(|k, _| d.mean[k] + d.stddev[k] * z[k]);
            if relation_oracle(rel, &unit.translated(&off), &unit, d.margin) {
                return off;
            }
        }
    }

    /// Offset of a containee of half extent `inner` placed uniformly inside a
    /// container of half extent `outer`; `None` if it does not fit.
    pub fn sample_inside<R: Rng + ?Sized>(&self, inner: &Vec3, outer: &Vec3, rng: &mut R) -> Option<Vec3> {
        let room = outer - inner;
        if room.iter().any(|r| *r < 0.0) {
            return None;
        }
        Some(Vec3::from_fn(|k, _| if room[k] > 0.0 { rng.random_range(-room[k]..=room[k]) } else { 0.0 }))
    }

    /// Offset (subject minus object) realizing `rel` between objects of the given half extents.
    pub fn sample<R: Rng + ?Sized>(&self, rel: RelationKind, subject_half: &Vec3, object_half: &Vec3, rng: &mut R) -> Option<Vec3> {
        if rel == RelationKind::Inside {
            self.sample_inside(subject_half, object_half, rng)
        } else {
            Some(self.sample_axial(rel, rng))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path)
    }
}

/// Decides whether a placed pair satisfies a relation.
pub trait EdgeChecker: Sync {
    fn holds(&self, rel: RelationKind, subject: &Box3D, object: &Box3D) -> bool;
}

/// The analytic relation predicate.
#[derive(Debug, Clone, Copy)]
pub struct OracleChecker {
    pub margin: f64,
}

impl Default for OracleChecker {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN }
    }
}

impl EdgeChecker for OracleChecker {
    fn holds(&self, rel: RelationKind, a: &Box3D, b: &Box3D) -> bool {
        relation_oracle(rel, a, b, self.margin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposeConfig {
    pub max_samples: u64,
    /// Rest every object on the table plane instead of centering node 0 at the origin.
    pub tabletop: bool,
    /// Reject placements whose box leaves this region.
    pub workspace: Option<Box3D>,
    /// Build the feature canvas of the witness (skipped when only a verdict is needed).
    pub render_canvas: bool,
    pub grid: GridSpec,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            max_samples: DEFAULT_BUDGET,
            tabletop: false,
            workspace: None,
            render_canvas: true,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub phrase: NounPhrase,
    pub bbox: Box3D,
    pub tensor: ObjectTensor,
}

/// A witness layout: one box and tensor per graph node, and the summed canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub nodes: Vec<PlacedObject>,
    pub canvas: Option<SceneFeatureGrid>,
    /// Placement samples drawn before success.
    pub samples: u64,
}

impl Placement {
    pub fn boxes(&self) -> Vec<Box3D> {
        self.nodes.iter().map(|n| n.bbox).collect()
    }
}

/// Pairs of nodes exempt from the intersection test because one contains the other.
fn contained_pairs(g: &SceneGraph) -> Vec<(usize, usize)> {
    g.edges
        .iter()
        .filter(|e| e.relation == RelationKind::Inside)
        .map(|e| (e.subject.min(e.object), e.subject.max(e.object)))
        .collect()
}

/// Checks a box for node `i` against every placed node.
fn consistent(
    g: &SceneGraph,
    i: usize,
    b: &Box3D,
    placed: &[Option<Box3D>],
    exempt: &[(usize, usize)],
    checker: &dyn EdgeChecker,
) -> bool {
    for (j, pj) in placed.iter().enumerate() {
        let Some(pj) = pj else { continue };
        if j == i {
            continue;
        }
        if !exempt.contains(&(i.min(j), i.max(j))) && iou3d(b, pj) > IOU_MAX {
            return false;
        }
    }
    g.edges.iter().all(|e| {
        let (s, o) = (e.subject, e.object);
        if s != i && o != i {
            return true;
        }
        let bs = if s == i { Some(b) } else { placed[s].as_ref() };
        let bo = if o == i { Some(b) } else { placed[o].as_ref() };
        match (bs, bo) {
            (Some(bs), Some(bo)) => checker.holds(e.relation, bs, bo),
            _ => true,
        }
    })
}

/// Samples a layout realizing every edge of `g` with no pair of objects
/// intersecting beyond IoU 0.1.
///
/// Nodes are placed in order. Node 0 sits at the canvas center; each later node
/// is offset from an already placed node along its first edge to one. A node
/// that violates a constraint is resampled up to `max_samples` times, after which
/// the whole scene restarts; after `max_samples` restarts the graph is declared
/// infeasible.
pub fn compose_scene<R: Rng + ?Sized>(
    g: &SceneGraph,
    what: &WhatModel,
    where_: &WhereModel,
    checker: &dyn EdgeChecker,
    cfg: &ComposeConfig,
    rng: &mut R,
) -> Result<Placement> {
    let (boxes, samples) = sample_layout(g, what, where_, checker, cfg, rng)?;
    let mut nodes = Vec::with_capacity(boxes.len());
    for (p, bbox) in g.nodes.iter().zip(boxes) {
        nodes.push(PlacedObject {
            phrase: *p,
            bbox,
            tensor: what.generate(p, rng)?,
        });
    }
    let canvas = cfg.render_canvas.then(|| {
        let mut c = SceneFeatureGrid::zeros(cfg.grid);
        for o in &nodes {
            draw_into(&mut c, &o.tensor, &o.bbox.center);
        }
        c
    });
    Ok(Placement { nodes, canvas, samples })
}

/// The box-sampling half of [`compose_scene`]: boxes per node and the number of samples drawn.
pub fn sample_layout<R: Rng + ?Sized>(
    g: &SceneGraph,
    what: &WhatModel,
    where_: &WhereModel,
    checker: &dyn EdgeChecker,
    cfg: &ComposeConfig,
    rng: &mut R,
) -> Result<(Vec<Box3D>, u64)> {
    assert!(cfg.max_samples >= 1, "max_samples must be at least 1");
    g.validate().map_err(Error::Invalid)?;
    let n = g.nodes.len();
    let halves: Vec<Vec3> = g
        .nodes
        .iter()
        .map(|p| what.size_of(p).map(|s| s / 2.0))
        .collect::<Result<_>>()?;
    let exempt = contained_pairs(g);
    // anchor edge of each node: first edge joining it to an earlier node
    let anchors: Vec<Option<(usize, RelationKind, bool)>> = (0..n)
        .map(|i| {
            g.edges.iter().find_map(|e| {
                if e.subject == i && e.object < i {
                    Some((e.object, e.relation, true))
                } else if e.object == i && e.subject < i {
                    Some((e.subject, e.relation, false))
                } else {
                    None
                }
            })
        })
        .collect();
    let rest_y = |i: usize| if cfg.tabletop { halves[i].y } else { 0.0 };
    let in_workspace = |b: &Box3D| cfg.workspace.as_ref().is_none_or(|w| w.contains_box(b));
    let mut samples = 0u64;
    for _restart in 0..cfg.max_samples {
        let mut placed: Vec<Option<Box3D>> = vec![None; n];
        let mut ok = true;
        for i in 0..n {
            let mut done = false;
            for _ in 0..cfg.max_samples {
                samples += 1;
                let center = if i == 0 {
                    Some(Vec3::new(0.0, rest_y(0), 0.0))
                } else {
                    match anchors[i] {
                        Some((j, rel, is_subject)) => {
                            let pj = placed[j].expect("anchors precede");
                            let off = if is_subject {
                                where_.sample(rel, &halves[i], &halves[j], rng)
                            } else {
                                where_.sample(rel, &halves[j], &halves[i], rng).map(|d| -d)
                            };
                            off.map(|d| {
                                let mut c = pj.center + d;
                                if cfg.tabletop {
                                    c.y = rest_y(i);
                                }
                                c
                            })
                        }
                        None => Some(Vec3::new(rng.random_range(-2.0..2.0), rest_y(i), rng.random_range(-2.0..2.0))),
                    }
                };
                let Some(center) = center else { continue };
                let b = Box3D::new(center, halves[i]);
                if in_workspace(&b) && consistent(g, i, &b, &placed, &exempt, checker) {
                    placed[i] = Some(b);
                    done = true;
                    break;
                }
            }
            if !done {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok((placed.into_iter().map(Option::unwrap).collect(), samples));
        }
    }
    Err(Error::Infeasible { samples })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Affordable(Box<Placement>),
    Unaffordable { samples: u64 },
}

impl Verdict {
    pub fn is_affordable(&self) -> bool {
        matches!(self, Verdict::Affordable(_))
    }
}

/// An utterance is affordable iff the sampler finds a witness layout within budget.
pub fn classify_affordable<R: Rng + ?Sized>(
    g: &SceneGraph,
    what: &WhatModel,
    where_: &WhereModel,
    checker: &dyn EdgeChecker,
    cfg: &ComposeConfig,
    rng: &mut R,
) -> Result<Verdict> {
    match compose_scene(g, what, where_, checker, cfg, rng) {
        Ok(p) => Ok(Verdict::Affordable(Box::new(p))),
        Err(Error::Infeasible { samples }) => Ok(Verdict::Unaffordable { samples }),
        Err(e) => Err(e),
    }
}

/// Region of the table that synthetic scenes must stay within.
pub fn table_workspace() -> Box3D {
    Box3D::from_min_max(Vec3::new(-2.8, 0.0, -2.8), Vec3::new(2.8, 2.8, 2.8))
}

/// A fully specified scene behind an utterance: the first `graph.nodes.len()`
/// objects realize the graph nodes in order, any further ones are distractors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub utterance: String,
    pub graph: SceneGraph,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn boxes(&self) -> Vec<Box3D> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Fills the unspecified attributes of a phrase at random.
pub fn fill_attrs<R: Rng + ?Sized>(p: &NounPhrase, rng: &mut R) -> ObjectAttrs {
    ObjectAttrs {
        size: p.size.unwrap_or_else(|| *Size::ALL.choose(rng).unwrap()),
        color: p.color.unwrap_or_else(|| *Color::ALL.choose(rng).unwrap()),
        material: p.material.unwrap_or_else(|| *Material::ALL.choose(rng).unwrap()),
        shape: p.shape,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub utterances: GenConfig,
    pub max_distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            utterances: GenConfig::default(),
            max_distractors: 1,
        }
    }
}

/// Samples an utterance, completes its phrases into objects and lays them out on
/// the table. Distractors never match any phrase of the utterance.
pub fn synthesize_scene<R: Rng + ?Sized>(cfg: &SceneConfig, what: &WhatModel, where_: &WhereModel, rng: &mut R) -> SyntheticScene {
    let compose = ComposeConfig {
        max_samples: 200,
        tabletop: true,
        workspace: Some(table_workspace()),
        render_canvas: false,
        ..Default::default()
    };
    loop {
        let (utterance, graph) = generate_utterance(&cfg.utterances, rng);
        let attrs: Vec<ObjectAttrs> = graph.nodes.iter().map(|p| fill_attrs(p, rng)).collect();
        let full = SceneGraph {
            nodes: attrs.iter().map(|a| a.full_phrase()).collect(),
            edges: graph.edges.clone(),
        };
        let Ok((boxes, _)) = sample_layout(&full, what, where_, &OracleChecker::default(), &compose, rng) else {
            continue;
        };
        let mut objects: Vec<SceneObject> = boxes
            .into_iter()
            .zip(attrs)
            .map(|(bbox, attrs)| SceneObject { bbox, attrs })
            .collect();
        let n_distractors = rng.random_range(0..=cfg.max_distractors);
        for _ in 0..n_distractors {
            for _try in 0..100 {
                let a = fill_attrs(&NounPhrase::new(*Shape::ALL.choose(rng).unwrap()), rng);
                if graph.nodes.iter().any(|p| p.matches(&a)) {
                    continue;
                }
                let h = Vec3::repeat(a.size.half_extent());
                let b = Box3D::new(Vec3::new(rng.random_range(-2.0..2.0), h.y, rng.random_range(-2.0..2.0)), h);
                if table_workspace().contains_box(&b) && objects.iter().all(|o| iou3d(&o.bbox, &b) <= IOU_MAX) {
                    objects.push(SceneObject { bbox: b, attrs: a });
                    break;
                }
            }
        }
        return SyntheticScene { utterance, graph, objects };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use crate::grammar::{grid_satisfiable, make_contradiction_set, parse_utterance};
    use crate::rng::seeded;
    use crate::vocab::surface_rgb;
    use crate::voxel::{project, OCC_THRESHOLD};

    fn np(text: &str) -> NounPhrase {
        parse_utterance(&format!("a {text}")).unwrap().nodes[0]
    }

    fn light() -> ComposeConfig {
        ComposeConfig {
            render_canvas: false,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let what = WhatModel::canonical(0.0);
        let mut rng = seeded(1);
        let a = what.generate(&np("red cube"), &mut rng).unwrap();
        let b = what.generate(&np("red cube"), &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn color_words_change_only_color_channels() {
        let what = WhatModel::canonical(0.0);
        let red = what.mean(&np("red cube")).unwrap();
        let blue = what.mean(&np("blue cube")).unwrap();
        let n = OBJ_RES.pow(3);
        let mut differing = std::collections::BTreeSet::new();
        for (i, (a, b)) in red.data.iter().zip(&blue.data).enumerate() {
            if a != b {
                differing.insert(i / n);
            }
        }
        let expected: std::collections::BTreeSet<usize> =
            [ch::COLOR + Color::Red.index(), ch::COLOR + Color::Blue.index()].into();
        assert_eq!(differing, expected);
    }

    #[test]
    fn tensor_channels_follow_the_layout() {
        let what = WhatModel::canonical(0.0);
        let t = what.mean(&np("small green metal sphere")).unwrap();
        let mask = shape_mask(Shape::Sphere);
        let n = OBJ_RES.pow(3);
        let channel = |c: usize| &t.data[c * n..(c + 1) * n];
        assert_eq!(channel(ch::OCC), &mask[..]);
        assert_eq!(channel(ch::COLOR + Color::Green.index()), &mask[..]);
        assert!(channel(ch::COLOR + Color::Red.index()).iter().all(|v| *v == 0.0));
        assert_eq!(channel(ch::MATERIAL + Material::Metal.index()), &mask[..]);
        assert!(channel(ch::MATERIAL + Material::Rubber.index()).iter().all(|v| *v == 0.0));
        assert_eq!(channel(ch::SHAPE + Shape::Sphere.index()), &mask[..]);
        assert!(channel(ch::SHAPE + Shape::Cube.index()).iter().all(|v| *v == 0.0));
        assert_eq!(channel(ch::SIZE), &mask[..]);
        assert!(channel(ch::SIZE + 1).iter().all(|v| *v == 0.0));
        for c in ch::SURFACE..GRID_CHANNELS {
            assert!(channel(c).iter().all(|v| *v == 0.0));
        }
        // sphere inscribed in the block fills pi/6 of it
        let frac = mask.iter().sum::<f32>() / n as f32;
        assert!((frac - std::f32::consts::PI / 6.0).abs() < 0.02);
    }

    #[test]
    fn size_words_scale_the_object() {
        let what = WhatModel::canonical(0.0);
        let large = what.size_of(&np("large sphere")).unwrap();
        let small = what.size_of(&np("small sphere")).unwrap();
        let medium = what.size_of(&np("sphere")).unwrap();
        for k in 0..3 {
            assert!(large[k] > medium[k] && medium[k] > small[k]);
        }
    }

    #[test]
    fn unknown_tokens_are_reported() {
        let mut what = WhatModel::canonical(0.0);
        what.entries.remove(&Token::Color(Color::Red));
        assert!(matches!(what.mean(&np("red cube")), Err(Error::UnknownToken(w)) if w == "red"));
    }

    #[test]
    fn what_model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let what = WhatModel::canonical(0.05);
        what.save(dir.path().join("what.json")).unwrap();
        assert_eq!(WhatModel::load(dir.path().join("what.json")).unwrap(), what);
        let where_ = WhereModel::canonical();
        where_.save(dir.path().join("where.json")).unwrap();
        assert_eq!(WhereModel::load(dir.path().join("where.json")).unwrap(), where_);
    }

    #[test]
    fn offsets_respect_truncation() {
        let m = WhereModel::canonical();
        let mut rng = seeded(2);
        for _ in 0..1000 {
            assert!(m.sample_axial(RelationKind::LeftOf, &mut rng).x < -DEFAULT_MARGIN);
            let d = m.sample_axial(RelationKind::LeftBehind, &mut rng);
            assert!(d.x < -DEFAULT_MARGIN && d.z < -DEFAULT_MARGIN);
        }
    }

    #[test]
    fn behind_and_front_are_mirrored() {
        let m = WhereModel::canonical();
        let mut rng = seeded(3);
        let n = 4000;
        let stats = |rel, rng: &mut crate::rng::Rng| {
            let zs: Vec<f64> = (0..n).map(|_| m.sample_axial(rel, rng).z).collect();
            let mean = zs.iter().sum::<f64>() / n as f64;
            let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        let (mb, sb) = stats(RelationKind::Behind, &mut rng);
        let (mf, sf) = stats(RelationKind::InFrontOf, &mut rng);
        assert!(mb < 0.0 && mf > 0.0);
        // means of |z| agree within three standard errors
        let se = (sb * sb / n as f64 + sf * sf / n as f64).sqrt();
        assert!((mb.abs() - mf.abs()).abs() < 3.0 * se, "{mb} {mf} {se}");
        // untruncated mean and spread
        assert!((mf - OFFSET_MAGNITUDE).abs() < 0.05);
        assert!((sf - OFFSET_STDDEV).abs() < 0.05);
    }

    #[test]
    fn inside_offsets_keep_the_containee_inside() {
        let m = WhereModel::canonical();
        let mut rng = seeded(4);
        let (inner, outer) = (Vec3::repeat(0.35), Vec3::repeat(0.7));
        for _ in 0..500 {
            let d = m.sample(RelationKind::Inside, &inner, &outer, &mut rng).unwrap();
            let a = Box3D::new(d, inner);
            assert!(relation_oracle(RelationKind::Inside, &a, &Box3D::new(Vec3::zeros(), outer), 0.0));
        }
        assert!(m.sample(RelationKind::Inside, &outer, &inner, &mut rng).is_none());
    }

    #[test]
    fn single_node_succeeds_in_one_sample() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let g = parse_utterance("a red cube").unwrap();
        let p = compose_scene(&g, &what, &where_, &OracleChecker::default(), &light(), &mut seeded(5)).unwrap();
        assert_eq!(p.samples, 1);
        assert_eq!(p.nodes[0].bbox.center, Vec3::zeros());
    }

    #[test]
    fn left_cycle_is_infeasible() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let g = parse_utterance(
            "a red cube is to the left of a blue sphere, the blue sphere is to the left of a green cylinder, the green cylinder is to the left of the red cube",
        )
        .unwrap();
        for budget in [1, 10, 50] {
            let cfg = ComposeConfig {
                max_samples: budget,
                ..light()
            };
            let r = compose_scene(&g, &what, &where_, &OracleChecker::default(), &cfg, &mut seeded(6));
            assert!(matches!(r, Err(Error::Infeasible { samples }) if samples >= budget * budget));
        }
    }

    #[test]
    fn five_node_left_chain_is_ordered() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let names = ["red cube", "blue sphere", "green cylinder", "yellow bowl", "cyan cube"];
        let clauses: Vec<String> = (0..4)
            .map(|i| {
                let det = if i == 0 { "a" } else { "the" };
                format!("{det} {} is to the left of a {}", names[i], names[i + 1])
            })
            .collect();
        let g = parse_utterance(&clauses.join(", ")).unwrap();
        assert_eq!(g.nodes.len(), 5);
        let p = compose_scene(&g, &what, &where_, &OracleChecker::default(), &light(), &mut seeded(7)).unwrap();
        for i in 0..4 {
            assert!(p.nodes[i].bbox.center.x < p.nodes[i + 1].bbox.center.x - DEFAULT_MARGIN);
        }
    }

    #[test]
    fn oversized_containee_is_unaffordable() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let cfg = ComposeConfig {
            max_samples: 30,
            ..light()
        };
        let g = parse_utterance("a large cube is inside a small bowl").unwrap();
        let v = classify_affordable(&g, &what, &where_, &OracleChecker::default(), &cfg, &mut seeded(8)).unwrap();
        assert!(!v.is_affordable());
        let g = parse_utterance("a small cube is inside a large bowl").unwrap();
        let v = classify_affordable(&g, &what, &where_, &OracleChecker::default(), &cfg, &mut seeded(8)).unwrap();
        assert!(v.is_affordable());
    }

    #[test]
    fn witnesses_reverify_on_generated_graphs() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let gen = GenConfig {
            n_objects_min: 1,
            n_objects_max: 4,
            n_constraints_max: 5,
            allow_repeat_mentions: true,
            seed: 9,
        };
        let mut rng = seeded(9);
        let mut exhausted = 0;
        for _ in 0..1000 {
            let (_, g) = generate_utterance(&gen, &mut rng);
            let p = match compose_scene(&g, &what, &where_, &OracleChecker::default(), &light(), &mut rng) {
                Ok(p) => p,
                Err(Error::Infeasible { .. }) => {
                    // long constraint chains can need tail offsets the budget misses
                    assert_ne!(grid_satisfiable(&g, DEFAULT_MARGIN), Some(false));
                    exhausted += 1;
                    continue;
                }
                Err(e) => panic!("{g:?}: {e}"),
            };
            let boxes = p.boxes();
            for e in &g.edges {
                assert!(relation_oracle(e.relation, &boxes[e.subject], &boxes[e.object], DEFAULT_MARGIN));
            }
            let exempt = contained_pairs(&g);
            for i in 0..boxes.len() {
                for j in 0..i {
                    if !exempt.contains(&(j, i)) {
                        assert!(iou3d(&boxes[i], &boxes[j]) <= IOU_MAX);
                    }
                }
            }
        }
        assert!(exhausted <= 3, "{exhausted} of 1000 satisfiable graphs exhausted the budget");
    }

    #[test]
    fn contradiction_set_verdicts_match_the_oracle() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let set = make_contradiction_set(20, &mut seeded(10));
        let cfg = ComposeConfig {
            max_samples: 100,
            ..light()
        };
        for (text, affordable) in set {
            let g = parse_utterance(&text).unwrap();
            let v = classify_affordable(&g, &what, &where_, &OracleChecker::default(), &cfg, &mut seeded(11)).unwrap();
            assert_eq!(v.is_affordable(), affordable, "{text}");
        }
    }

    #[test]
    fn seeds_determine_verdict_and_witness() {
        let (what, where_) = (WhatModel::canonical(0.05), WhereModel::canonical());
        let g = parse_utterance("a red cube is left behind a blue sphere and to the left of a green bowl").unwrap();
        let run = |s| compose_scene(&g, &what, &where_, &OracleChecker::default(), &ComposeConfig::default(), &mut seeded(s)).unwrap();
        assert_eq!(run(12), run(12));
        assert_ne!(run(12).boxes(), run(13).boxes());
    }

    #[test]
    fn retrieval_finds_the_matching_prototype() {
        let what = WhatModel::canonical(0.0);
        let lib = prototype_library(&what);
        assert_eq!(lib.len(), 32);
        let entries: Vec<(usize, ObjectTensor)> = lib.iter().map(|(id, _, t)| (*id, t.clone())).collect();
        for (id, p, t) in &lib {
            assert_eq!(retrieve_prototype(t, &entries), *id, "{p}");
        }
        let red_cube = what.mean(&np("red cube")).unwrap();
        assert_eq!(retrieve_prototype(&red_cube, &entries), Color::Red.index() * 4 + Shape::Cube.index());
        // duplicate entries resolve to the lowest id
        let dup = vec![(7, red_cube.clone()), (3, red_cube.clone())];
        assert_eq!(retrieve_prototype(&red_cube, &dup), 3);
    }

    #[test]
    fn retrieval_is_robust_to_small_noise() {
        let what = WhatModel::canonical(0.05);
        let lib = prototype_library(&what);
        let entries: Vec<(usize, ObjectTensor)> = lib.iter().map(|(id, _, t)| (*id, t.clone())).collect();
        let mut rng = seeded(14);
        let trials = 200;
        let mut hits = 0;
        for k in 0..trials {
            let (id, p, _) = &lib[k % lib.len()];
            if retrieve_prototype(&what.generate(p, &mut rng).unwrap(), &entries) == *id {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.99 * trials as f64);
    }

    #[test]
    fn generated_canvas_shows_object_colors() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let g = parse_utterance("a large red metal cube is to the left of a large blue metal cylinder").unwrap();
        let cfg = ComposeConfig {
            tabletop: true,
            ..Default::default()
        };
        let p = compose_scene(&g, &what, &where_, &OracleChecker::default(), &cfg, &mut seeded(15)).unwrap();
        let canvas = p.canvas.as_ref().unwrap();
        assert!(canvas.channel(ch::OCC).iter().any(|v| *v > OCC_THRESHOLD));
        let objects: Vec<crate::voxel::SceneObject> = p
            .nodes
            .iter()
            .zip([Color::Red, Color::Blue])
            .map(|(o, color)| crate::voxel::SceneObject {
                bbox: o.bbox,
                attrs: crate::vocab::ObjectAttrs {
                    size: Size::Large,
                    color,
                    material: Material::Metal,
                    shape: o.phrase.shape,
                },
            })
            .collect();
        for (az, el) in [(0.0, 20.0), (90.0, 40.0), (200.0, 60.0), (315.0, 12.0)] {
            let cam = Camera::new(az, el, 8.0);
            let img = project(canvas, &cam);
            let truth = crate::voxel::render_scene(&objects, &cam);
            let mut agree = 0;
            let mut total = 0;
            for i in 0..img.rgb.len() {
                if truth.depth[i] > 0.0 && img.depth[i] > 0.0 {
                    total += 1;
                    if img.rgb[i] == truth.rgb[i] {
                        agree += 1;
                    }
                }
            }
            assert!(total > 200);
            assert!(agree as f64 >= 0.97 * total as f64, "{agree}/{total} at az {az}");
            assert!(img.rgb.iter().any(|c| *c == surface_rgb(Color::Red, Material::Metal)));
        }
    }

    #[test]
    fn synthetic_scenes_realize_their_utterances() {
        let (what, where_) = (WhatModel::canonical(0.0), WhereModel::canonical());
        let cfg = SceneConfig {
            utterances: GenConfig {
                n_objects_max: 3,
                n_constraints_max: 3,
                ..Default::default()
            },
            max_distractors: 2,
        };
        let mut rng = seeded(16);
        for _ in 0..200 {
            let s = synthesize_scene(&cfg, &what, &where_, &mut rng);
            assert_eq!(parse_utterance(&s.utterance).unwrap(), s.graph);
            let boxes = s.boxes();
            for (i, p) in s.graph.nodes.iter().enumerate() {
                assert!(p.matches(&s.objects[i].attrs));
                assert!((boxes[i].min().y).abs() < 1e-12);
            }
            for o in &s.objects[s.graph.nodes.len()..] {
                assert!(!s.graph.nodes.iter().any(|p| p.matches(&o.attrs)));
            }
            for e in &s.graph.edges {
                assert!(relation_oracle(e.relation, &boxes[e.subject], &boxes[e.object], DEFAULT_MARGIN));
            }
            assert!(boxes.iter().all(|b| table_workspace().contains_box(b)));
        }
    }
}
