//! Surface grammar for spatial utterances and placement instructions.
//!
//! ```text
//! utterance   := clause { "," clause }
//! clause      := np [ "is" relation np { "and" relation np } ]
//! instruction := ("put" | "place") np relation np
//! np          := ("a" | "the") [size] [color] [material] shape
//! relation    := "to the left of" | "to the right of" | "in front of" | "behind"
//!              | "left behind" | "left front of" | "right behind" | "right front of"
//!              | "inside" | "in"
//! ```
//!
//! Input is case-insensitive and any run of whitespace separates words.
//! Identical noun phrases denote the same object regardless of determiner;
//! the printer introduces an object with "a" and refers back with "the".

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::geometry::RelationKind;
use crate::vocab::{Color, Material, NounPhrase, Shape, Size, Token};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    /// Byte offset of the offending token (input length at end of input).
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: Option<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "parse error at byte {}: expected one of [{}], found {}",
            self.offset,
            self.expected.join(", "),
            self.found.as_deref().map_or("end of input".to_string(), |s| format!("`{s}`"))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub subject: usize,
    pub relation: RelationKind,
    pub object: usize,
}

/// Dependency form of an utterance: object mentions and the relations between them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SceneGraph {
    pub nodes: Vec<NounPhrase>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn single(np: NounPhrase) -> Self {
        Self {
            nodes: vec![np],
            edges: vec![],
        }
    }

    /// Checks the structural invariants: nonempty, indices in range, no self edges,
    /// distinct phrases per node.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("graph has no nodes".into());
        }
        for e in &self.edges {
            if e.subject >= self.nodes.len() || e.object >= self.nodes.len() {
                return Err(format!("edge {e:?} out of range"));
            }
            if e.subject == e.object {
                return Err(format!("self edge on node {}", e.subject));
            }
        }
        for i in 0..self.nodes.len() {
            for j in 0..i {
                if self.nodes[i] == self.nodes[j] {
                    return Err(format!("nodes {j} and {i} share a phrase"));
                }
            }
        }
        Ok(())
    }

    /// Edges incident to `node`.
    pub fn incident(&self, node: usize) -> impl Iterator<Item = &Edge> {
        self.edges
            .iter()
            .filter(move |e| e.subject == node || e.object == node)
    }

    /// Renumbers nodes by first mention in the printed form and orders edges
    /// so that `parse_utterance(&print_graph(g)) == g`.
    pub fn canonicalize(&self) -> SceneGraph {
        let mut edges = self.edges.clone();
        // group edges by subject, keeping first-appearance order of subjects
        let mut order: Vec<usize> = Vec::new();
        for e in &edges {
            if !order.contains(&e.subject) {
                order.push(e.subject);
            }
        }
        edges.sort_by_key(|e| order.iter().position(|s| *s == e.subject).unwrap());
        let mut map: HashMap<usize, usize> = HashMap::new();
        let mut next = 0;
        let mut visit = |n: usize, map: &mut HashMap<usize, usize>| {
            map.entry(n).or_insert_with(|| {
                next += 1;
                next - 1
            });
        };
        for e in &edges {
            visit(e.subject, &mut map);
            visit(e.object, &mut map);
        }
        for n in 0..self.nodes.len() {
            visit(n, &mut map);
        }
        let mut nodes = self.nodes.clone();
        for (old, new) in &map {
            nodes[*new] = self.nodes[*old];
        }
        SceneGraph {
            nodes,
            edges: edges
                .into_iter()
                .map(|e| Edge {
                    subject: map[&e.subject],
                    relation: e.relation,
                    object: map[&e.object],
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    adjectives: Vec<String>,
    noun: String,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<(usize, RelationKind, usize)>,
}

impl Serialize for SceneGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphJson {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeJson {
                    adjectives: n.adjectives().iter().map(|t| t.word().to_string()).collect(),
                    noun: n.shape.word().to_string(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| (e.subject, e.relation, e.object))
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let g = GraphJson::deserialize(d)?;
        let nodes = g
            .nodes
            .iter()
            .map(|n| NounPhrase::from_words(&n.adjectives, &n.noun))
            .collect::<crate::Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        let graph = SceneGraph {
            nodes,
            edges: g
                .edges
                .into_iter()
                .map(|(subject, relation, object)| Edge {
                    subject,
                    relation,
                    object,
                })
                .collect(),
        };
        graph.validate().map_err(serde::de::Error::custom)?;
        Ok(graph)
    }
}

/// A parsed "put/place NP REL NP" command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub subject: NounPhrase,
    pub relation: RelationKind,
    pub anchor: NounPhrase,
}

impl Instruction {
    pub fn text(&self) -> String {
        format!("put the {} {} the {}", self.subject, self.relation, self.anchor)
    }
}

#[derive(Debug, Clone)]
struct Word {
    text: String,
    offset: usize,
}

fn tokenize(input: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in input.char_indices() {
        if ch.is_whitespace() || ch == ',' {
            if let Some(s) = start.take() {
                out.push(Word {
                    text: input[s..i].to_lowercase(),
                    offset: s,
                });
            }
            if ch == ',' {
                out.push(Word {
                    text: ",".into(),
                    offset: i,
                });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Word {
            text: input[s..].to_lowercase(),
            offset: s,
        });
    }
    out
}

struct Parser {
    words: Vec<Word>,
    pos: usize,
    end: usize,
}

const RELATION_STARTS: [&str; 7] = ["to", "in", "behind", "left", "right", "inside", "front"];

impl Parser {
    fn new(input: &str) -> Self {
        Self {
            words: tokenize(input),
            pos: 0,
            end: input.len(),
        }
    }

    fn peek(&self) -> Option<&str> {
        self.words.get(self.pos).map(|w| w.text.as_str())
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        let w = self.words.get(self.pos);
        ParseError {
            offset: w.map_or(self.end, |w| w.offset),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: w.map(|w| w.text.clone()),
        }
    }

    fn expect(&mut self, word: &str) -> Result<(), ParseError> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&[word]))
        }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.words.len()
    }

    fn noun_phrase(&mut self) -> Result<NounPhrase, ParseError> {
        match self.peek() {
            Some("a") | Some("the") => self.pos += 1,
            _ => return Err(self.error(&["a", "the"])),
        }
        let mut size = None;
        let mut color = None;
        let mut material = None;
        let mut stage = 0;
        loop {
            let tok = self.peek().and_then(|w| Token::from_word(w).ok());
            match tok {
                Some(Token::Size(s)) if stage < 1 => {
                    size = Some(s);
                    stage = 1;
                }
                Some(Token::Color(c)) if stage < 2 => {
                    color = Some(c);
                    stage = 2;
                }
                Some(Token::Material(m)) if stage < 3 => {
                    material = Some(m);
                    stage = 3;
                }
                Some(Token::Shape(shape)) => {
                    self.pos += 1;
                    return Ok(NounPhrase {
                        size,
                        color,
                        material,
                        shape,
                    });
                }
                _ => {
                    let mut exp: Vec<&str> = Vec::new();
                    if stage < 1 {
                        exp.extend(Size::ALL.map(Size::word));
                    }
                    if stage < 2 {
                        exp.extend(Color::ALL.map(Color::word));
                    }
                    if stage < 3 {
                        exp.extend(Material::ALL.map(Material::word));
                    }
                    exp.extend(Shape::ALL.map(Shape::word));
                    return Err(self.error(&exp));
                }
            }
            self.pos += 1;
        }
    }

    fn relation(&mut self) -> Result<RelationKind, ParseError> {
        let r = match self.peek() {
            Some("to") => {
                self.pos += 1;
                self.expect("the")?;
                let r = match self.peek() {
                    Some("left") => RelationKind::LeftOf,
                    Some("right") => RelationKind::RightOf,
                    _ => return Err(self.error(&["left", "right"])),
                };
                self.pos += 1;
                self.expect("of")?;
                r
            }
            Some("in") => {
                self.pos += 1;
                if self.peek() == Some("front") {
                    self.pos += 1;
                    self.expect("of")?;
                    RelationKind::InFrontOf
                } else {
                    RelationKind::Inside
                }
            }
            Some("behind") => {
                self.pos += 1;
                RelationKind::Behind
            }
            Some("inside") => {
                self.pos += 1;
                RelationKind::Inside
            }
            Some(side @ ("left" | "right")) => {
                let left = side == "left";
                self.pos += 1;
                match self.peek() {
                    Some("behind") => {
                        self.pos += 1;
                        if left {
                            RelationKind::LeftBehind
                        } else {
                            RelationKind::RightBehind
                        }
                    }
                    Some("front") => {
                        self.pos += 1;
                        self.expect("of")?;
                        if left {
                            RelationKind::LeftFront
                        } else {
                            RelationKind::RightFront
                        }
                    }
                    _ => return Err(self.error(&["behind", "front"])),
                }
            }
            _ => {
                let starts: Vec<&str> = RELATION_STARTS
                    .iter()
                    .copied()
                    .filter(|s| *s != "front")
                    .collect();
                return Err(self.error(&starts));
            }
        };
        Ok(r)
    }
}

struct GraphBuilder {
    nodes: Vec<NounPhrase>,
    index: HashMap<NounPhrase, usize>,
    edges: Vec<Edge>,
}

impl GraphBuilder {
    fn node(&mut self, np: NounPhrase) -> usize {
        *self.index.entry(np).or_insert_with(|| {
            self.nodes.push(np);
            self.nodes.len() - 1
        })
    }
}

/// Parses an utterance into its scene graph.
pub fn parse_utterance(text: &str) -> Result<SceneGraph, ParseError> {
    let mut p = Parser::new(text);
    let mut g = GraphBuilder {
        nodes: vec![],
        index: HashMap::new(),
        edges: vec![],
    };
    loop {
        let subj_pos = p.pos;
        let subject = g.node(p.noun_phrase()?);
        if p.peek() == Some("is") {
            p.pos += 1;
            loop {
                let relation = p.relation()?;
                let obj_pos = p.pos;
                let object = g.node(p.noun_phrase()?);
                if object == subject {
                    return Err(ParseError {
                        offset: p.words[obj_pos].offset,
                        expected: vec!["a noun phrase different from the subject".into()],
                        found: Some(p.words[subj_pos..p.pos].iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ")),
                    });
                }
                g.edges.push(Edge {
                    subject,
                    relation,
                    object,
                });
                if p.peek() == Some("and") {
                    p.pos += 1;
                } else {
                    break;
                }
            }
        }
        if p.at_end() {
            break;
        }
        if p.peek() == Some(",") {
            p.pos += 1;
            continue;
        }
        let mut expected = vec![","];
        if g.edges.last().is_some_and(|e| e.subject == subject) {
            expected.push("and");
        } else {
            expected.push("is");
        }
        return Err(p.error(&expected));
    }
    Ok(SceneGraph {
        nodes: g.nodes,
        edges: g.edges,
    })
}

/// Parses a placement command such as "put the red cube to the left of the green bowl".
pub fn parse_instruction(text: &str) -> Result<Instruction, ParseError> {
    let mut p = Parser::new(text);
    match p.peek() {
        Some("put") | Some("place") => p.pos += 1,
        _ => return Err(p.error(&["put", "place"])),
    }
    let subject = p.noun_phrase()?;
    let relation = p.relation()?;
    let anchor = p.noun_phrase()?;
    if !p.at_end() {
        return Err(p.error(&["end of input"]));
    }
    Ok(Instruction {
        subject,
        relation,
        anchor,
    })
}

/// Canonical text of a graph: one clause per run of edges sharing a subject.
pub fn print_graph(g: &SceneGraph) -> String {
    let mut mentioned = vec![false; g.nodes.len()];
    let mention = |i: usize, mentioned: &mut Vec<bool>| -> String {
        let det = if mentioned[i] { "the" } else { "a" };
        mentioned[i] = true;
        format!("{det} {}", g.nodes[i])
    };
    let mut clauses: Vec<String> = Vec::new();
    let mut i = 0;
    while i < g.edges.len() {
        let subject = g.edges[i].subject;
        let mut clause = format!("{} is", mention(subject, &mut mentioned));
        let mut first = true;
        while i < g.edges.len() && g.edges[i].subject == subject {
            let e = g.edges[i];
            if !first {
                clause.push_str(" and");
            }
            clause.push_str(&format!(" {} {}", e.relation, mention(e.object, &mut mentioned)));
            first = false;
            i += 1;
        }
        clauses.push(clause);
    }
    for n in 0..g.nodes.len() {
        if !mentioned[n] {
            clauses.push(mention(n, &mut mentioned));
        }
    }
    clauses.join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_objects_min: usize,
    pub n_objects_max: usize,
    pub n_constraints_max: usize,
    pub allow_repeat_mentions: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    /// The training regime: at most two objects.
    fn default() -> Self {
        Self {
            n_objects_min: 1,
            n_objects_max: 2,
            n_constraints_max: 1,
            allow_repeat_mentions: false,
            seed: 0,
        }
    }
}

/// Uniform random noun phrase; each adjective slot is filled with probability 1/2.
pub fn random_phrase<R: Rng + ?Sized>(rng: &mut R) -> NounPhrase {
    NounPhrase {
        size: rng.random_bool(0.5).then(|| *Size::ALL.choose(rng).unwrap()),
        color: rng.random_bool(0.5).then(|| *Color::ALL.choose(rng).unwrap()),
        material: rng.random_bool(0.5).then(|| *Material::ALL.choose(rng).unwrap()),
        shape: *Shape::ALL.choose(rng).unwrap(),
    }
}

fn containment_permitted(subject: &NounPhrase, container: &NounPhrase) -> bool {
    container.shape == Shape::Bowl
        && subject.size == Some(Size::Small)
        && container.size == Some(Size::Large)
}

/// Relations that hold between hidden planar positions with a comfortable margin.
fn consistent_relations(ps: (f64, f64), po: (f64, f64), sub: &NounPhrase, obj: &NounPhrase) -> Vec<RelationKind> {
    let (dx, dz) = (ps.0 - po.0, ps.1 - po.1);
    let m = 0.3;
    let mut v: Vec<RelationKind> = RelationKind::AXIAL
        .into_iter()
        .filter(|r| {
            r.axis_tests().iter().all(|t| {
                let d = if t.axis == 0 { dx } else { dz };
                t.sign as f64 * d > m
            })
        })
        .collect();
    if containment_permitted(sub, obj) {
        v.push(RelationKind::Inside);
    }
    v
}

/// Samples a random utterance and its graph. The graph is satisfiable by
/// construction: relations are read off a hidden random layout.
pub fn generate_utterance<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> (String, SceneGraph) {
    assert!(cfg.n_objects_min >= 1 && cfg.n_objects_min <= cfg.n_objects_max);
    let n = rng.random_range(cfg.n_objects_min..=cfg.n_objects_max);
    let mut nodes: Vec<NounPhrase> = Vec::with_capacity(n);
    while nodes.len() < n {
        let p = random_phrase(rng);
        if !nodes.contains(&p) {
            nodes.push(p);
        }
    }
    let layout: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
        .collect();
    let mut edges: Vec<Edge> = Vec::new();
    let pick_edge = |s: usize, o: usize, rng: &mut R| -> Option<Edge> {
        let (s, o) = if rng.random_bool(0.5) { (s, o) } else { (o, s) };
        let rels = consistent_relations(layout[s], layout[o], &nodes[s], &nodes[o]);
        rels.choose(rng).map(|&relation| Edge {
            subject: s,
            relation,
            object: o,
        })
    };
    let tree_edges = (n - 1).min(cfg.n_constraints_max);
    for i in 1..=tree_edges {
        let j = rng.random_range(0..i);
        // near-coincident hidden positions yield no relation; try the other orientation
        if let Some(e) = pick_edge(i, j, rng).or_else(|| pick_edge(i, j, rng)) {
            edges.push(e);
        } else {
            let (dx, dz) = (layout[i].0 - layout[j].0, layout[i].1 - layout[j].1);
            let relation = if dx.abs() >= dz.abs() {
                if dx < 0.0 { RelationKind::LeftOf } else { RelationKind::RightOf }
            } else if dz < 0.0 {
                RelationKind::Behind
            } else {
                RelationKind::InFrontOf
            };
            // fall back to the dominant axis; hidden layout still satisfies it without margin
            edges.push(Edge {
                subject: i,
                relation,
                object: j,
            });
        }
    }
    if cfg.allow_repeat_mentions && n >= 2 {
        let mut tries = 0;
        while edges.len() < cfg.n_constraints_max && tries < 100 {
            tries += 1;
            let s = rng.random_range(0..n);
            let o = rng.random_range(0..n);
            if s == o || edges.iter().any(|e| {
                (e.subject == s && e.object == o) || (e.subject == o && e.object == s)
            }) {
                continue;
            }
            if let Some(e) = pick_edge(s, o, rng) {
                edges.push(e);
            }
        }
    }
    let graph = SceneGraph { nodes, edges }.canonicalize();
    (print_graph(&graph), graph)
}

/// Candidate coordinates per axis for the brute-force satisfiability oracle.
pub const ORACLE_GRID: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

/// Brute-force check that some placement of object centers on the 9x9x9 candidate
/// grid satisfies every axial relation of the graph at the given margin.
///
/// Axial predicates on axis `k` only read coordinate `k`, so the `9^(3n)` product
/// factors into one `9^n` enumeration per axis. Returns `None` for graphs with
/// `Inside` edges, which depend on object sizes.
pub fn grid_satisfiable(g: &SceneGraph, margin: f64) -> Option<bool> {
    if g.edges.iter().any(|e| e.relation == RelationKind::Inside) {
        return None;
    }
    let n = g.nodes.len();
    for axis in 0..3 {
        let tests: Vec<(usize, usize, i8)> = g
            .edges
            .iter()
            .flat_map(|e| {
                e.relation
                    .axis_tests()
                    .into_iter()
                    .filter(|t| t.axis == axis)
                    .map(move |t| (e.subject, e.object, t.sign))
            })
            .collect();
        if tests.is_empty() {
            continue;
        }
        let mut idx = vec![0usize; n];
        let mut found = false;
        'outer: loop {
            if tests.iter().all(|&(s, o, sign)| {
                sign as f64 * (ORACLE_GRID[idx[s]] - ORACLE_GRID[idx[o]]) > margin
            }) {
                found = true;
                break;
            }
            for k in 0..n {
                idx[k] += 1;
                if idx[k] < ORACLE_GRID.len() {
                    continue 'outer;
                }
                idx[k] = 0;
            }
            break;
        }
        if !found {
            return Some(false);
        }
    }
    Some(true)
}

/// Strict-order closure per axis: `less[axis][(a, b)]` means a < b is implied.
fn implied_orders(edges: &[Edge], n: usize) -> [Vec<Vec<bool>>; 3] {
    let mut less: [Vec<Vec<bool>>; 3] = std::array::from_fn(|_| vec![vec![false; n]; n]);
    for e in edges {
        for t in e.relation.axis_tests() {
            // sign * (s - o) > 0
            if t.sign > 0 {
                less[t.axis][e.object][e.subject] = true;
            } else {
                less[t.axis][e.subject][e.object] = true;
            }
        }
    }
    for l in less.iter_mut() {
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if l[i][k] && l[k][j] {
                        l[i][j] = true;
                    }
                }
            }
        }
    }
    less
}

fn contradicts(rel: RelationKind, s: usize, o: usize, less: &[Vec<Vec<bool>>; 3]) -> bool {
    rel.axis_tests().iter().any(|t| {
        // requires s > o on axis when sign > 0, s < o otherwise
        if t.sign > 0 {
            less[t.axis][s][o]
        } else {
            less[t.axis][o][s]
        }
    })
}

/// Builds `n` utterances, half affordable and half not. Each mentions three
/// objects in a triangle of constraints so every object is mentioned twice;
/// unaffordable items end with a constraint contradicting the closure of the
/// first two.
pub fn make_contradiction_set<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<(String, bool)> {
    assert!(n.is_multiple_of(2), "contradiction set size must be even");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let affordable = i % 2 == 0;
        out.push(contradiction_item(affordable, rng));
    }
    out
}

fn distinct_full_phrases<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<NounPhrase> {
    let mut v: Vec<NounPhrase> = Vec::new();
    while v.len() < k {
        let p = NounPhrase::new(*Shape::ALL.choose(rng).unwrap())
            .with_color(*Color::ALL.choose(rng).unwrap());
        if !v.contains(&p) {
            v.push(p);
        }
    }
    v
}

fn contradiction_item<R: Rng + ?Sized>(affordable: bool, rng: &mut R) -> (String, bool) {
    loop {
        let nodes = distinct_full_phrases(3, rng);
        let layout: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        // triangle pairs in a random rotation
        let r = rng.random_range(0..3);
        let pairs: Vec<(usize, usize)> = (0..3).map(|k| ((k + r) % 3, (k + r + 1) % 3)).collect();
        let mut edges = Vec::new();
        let mut ok = true;
        for &(a, b) in &pairs[..2] {
            let (s, o) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
            let rels = consistent_relations(layout[s], layout[o], &nodes[s], &nodes[o]);
            let rels: Vec<_> = rels.into_iter().filter(|r| *r != RelationKind::Inside).collect();
            match rels.choose(rng) {
                Some(&relation) => edges.push(Edge {
                    subject: s,
                    relation,
                    object: o,
                }),
                None => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let (a, b) = pairs[2];
        let (s, o) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        let less = implied_orders(&edges, 3);
        let candidates: Vec<RelationKind> = if affordable {
            consistent_relations(layout[s], layout[o], &nodes[s], &nodes[o])
                .into_iter()
                .filter(|r| *r != RelationKind::Inside)
                .collect()
        } else {
            RelationKind::AXIAL
                .into_iter()
                .filter(|r| contradicts(*r, s, o, &less))
                .collect()
        };
        let Some(&relation) = candidates.choose(rng) else {
            continue;
        };
        edges.push(Edge {
            subject: s,
            relation,
            object: o,
        });
        let g = SceneGraph { nodes, edges }.canonicalize();
        return (print_graph(&g), affordable);
    }
}

/// Phrases of a graph keyed by node, for diagnostics.
pub fn describe(g: &SceneGraph) -> BTreeMap<usize, String> {
    g.nodes.iter().enumerate().map(|(i, n)| (i, n.to_string())).collect()
}
