//! Biased synthetic scenes, their feature grids, and templated ground truth.
//!
//! A scene is a 4x4 grid holding up to six colored objects. Object kinds are
//! drawn under a co-occurrence prior so that models trained on the captions
//! pick up spurious "plate implies fork" style associations.

use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SceneError;
use crate::lexicon::{Color, ObjectKind, TokenId, Vocabulary};
use crate::rng::{purpose, stream};

pub const GRID_ROWS: u8 = 4;
pub const GRID_COLS: u8 = 4;
pub const NUM_CELLS: usize = (GRID_ROWS as usize) * (GRID_COLS as usize);
pub const MAX_INSTANCES: usize = 6;
/// One-hot over (kind, color) plus an "empty cell" flag.
pub const FEATURE_DIM: usize = ObjectKind::COUNT * Color::COUNT + 1;
pub const EMPTY_FEATURE: usize = FEATURE_DIM - 1;

const K: usize = ObjectKind::COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub kind: ObjectKind,
    pub color: Color,
    pub row: u8,
    pub col: u8,
}

impl ObjectInstance {
    pub fn cell_index(&self) -> usize {
        self.row as usize * GRID_COLS as usize + self.col as usize
    }

    pub fn feature_index(&self) -> usize {
        self.kind.index() * Color::COUNT + self.color.index()
    }
}

/// Instances are kept in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub instances: Vec<ObjectInstance>,
    #[serde(skip)]
    pub seed: u64,
}

impl Scene {
    /// Validates cell bounds and uniqueness; at most [`MAX_INSTANCES`].
    /// Empty scenes are allowed here (they never come out of the sampler).
    pub fn new(mut instances: Vec<ObjectInstance>, seed: u64) -> Result<Self, SceneError> {
        if instances.len() > MAX_INSTANCES {
            return Err(SceneError::InvalidScene(format!(
                "{} instances, at most {MAX_INSTANCES} allowed",
                instances.len()
            )));
        }
        let mut used = [false; NUM_CELLS];
        for inst in &instances {
            if inst.row >= GRID_ROWS || inst.col >= GRID_COLS {
                return Err(SceneError::InvalidScene(format!(
                    "cell ({},{}) outside the grid",
                    inst.row, inst.col
                )));
            }
            if inst.kind.index() >= K || inst.color.index() >= Color::COUNT {
                return Err(SceneError::InvalidScene("unknown kind or color".into()));
            }
            let c = inst.cell_index();
            if used[c] {
                return Err(SceneError::InvalidScene(format!(
                    "two instances at ({},{})",
                    inst.row, inst.col
                )));
            }
            used[c] = true;
        }
        instances.sort_by_key(|i| i.cell_index());
        Ok(Self { instances, seed })
    }

    pub fn empty(seed: u64) -> Self {
        Self {
            instances: Vec::new(),
            seed,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn contains(&self, kind: ObjectKind) -> bool {
        self.instances.iter().any(|i| i.kind == kind)
    }

    pub fn count(&self, kind: ObjectKind) -> usize {
        self.instances.iter().filter(|i| i.kind == kind).count()
    }

    pub fn count_color(&self, color: Color) -> usize {
        self.instances.iter().filter(|i| i.color == color).count()
    }

    pub fn at(&self, row: u8, col: u8) -> Option<&ObjectInstance> {
        self.instances.iter().find(|i| i.row == row && i.col == col)
    }

    /// Distinct kinds in first-appearance order.
    pub fn kinds(&self) -> Vec<ObjectKind> {
        let mut out = Vec::new();
        for i in &self.instances {
            if !out.contains(&i.kind) {
                out.push(i.kind);
            }
        }
        out
    }

    pub fn kind_histogram(&self) -> [usize; K] {
        let mut h = [0; K];
        for i in &self.instances {
            h[i.kind.index()] += 1;
        }
        h
    }

    pub fn empty_cells(&self) -> Vec<(u8, u8)> {
        let mut cells = Vec::new();
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                if self.at(r, c).is_none() {
                    cells.push((r, c));
                }
            }
        }
        cells
    }
}

/// Inclusion probabilities per kind, plus additive boosts that kick in when
/// another kind is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooccurrencePrior {
    pub base: Vec<f64>,
    /// `boost[a][b]` is added to `base[b]` when `a` is present. The diagonal
    /// is ignored.
    pub boost: Vec<Vec<f64>>,
    /// Chance that an included kind gets a second instance.
    pub duplicate: f64,
}

impl CooccurrencePrior {
    pub fn new(base: Vec<f64>, boost: Vec<Vec<f64>>, duplicate: f64) -> Result<Self, SceneError> {
        let prior = Self {
            base,
            boost,
            duplicate,
        };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidPrior(m));
        if self.base.len() != K || self.boost.len() != K || self.boost.iter().any(|r| r.len() != K)
        {
            return bad(format!("expected {K} base entries and a {K}x{K} boost matrix"));
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !self.base.iter().copied().all(in_unit) {
            return bad("base probabilities must lie in [0, 1]".into());
        }
        if !self.boost.iter().flatten().copied().all(in_unit) {
            return bad("boosts must lie in [0, 1]".into());
        }
        if !in_unit(self.duplicate) {
            return bad("duplicate probability must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Kitchen, fruit and pet clusters with strong pairwise pulls.
    pub fn standard() -> Self {
        let mut base = vec![0.0; K];
        let mut boost = vec![vec![0.0; K]; K];
        let set = |b: &mut Vec<f64>, name: &str, p: f64| {
            b[ObjectKind::from_name(name).unwrap().index()] = p;
        };
        for (name, p) in [
            ("fork", 0.08),
            ("knife", 0.08),
            ("plate", 0.3),
            ("cup", 0.3),
            ("spoon", 0.08),
            ("bowl", 0.2),
            ("apple", 0.2),
            ("banana", 0.08),
            ("dog", 0.2),
            ("cat", 0.2),
            ("ball", 0.08),
            ("book", 0.15),
        ] {
            set(&mut base, name, p);
        }
        for (a, b, p) in [
            ("plate", "fork", 0.65),
            ("plate", "knife", 0.35),
            ("fork", "knife", 0.45),
            ("cup", "spoon", 0.6),
            ("bowl", "spoon", 0.5),
            ("apple", "banana", 0.6),
            ("dog", "ball", 0.6),
            ("cat", "ball", 0.3),
        ] {
            let (a, b) = (
                ObjectKind::from_name(a).unwrap().index(),
                ObjectKind::from_name(b).unwrap().index(),
            );
            boost[a][b] = p;
        }
        Self {
            base,
            boost,
            duplicate: 0.15,
        }
    }

    /// Independent kinds with a common inclusion rate.
    pub fn independent(p: f64) -> Self {
        Self {
            base: vec![p; K],
            boost: vec![vec![0.0; K]; K],
            duplicate: 0.15,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "standard" | "default" => Some(Self::standard()),
            "independent" => Some(Self::independent(0.25)),
            _ => None,
        }
    }

    pub fn boost(&self, from: ObjectKind, to: ObjectKind) -> f64 {
        if from == to {
            0.0
        } else {
            self.boost[from.index()][to.index()]
        }
    }

    /// Largest boost any present kind gives to `to`.
    pub fn max_boost_from(&self, present: &[ObjectKind], to: ObjectKind) -> f64 {
        present
            .iter()
            .map(|&a| self.boost(a, to))
            .fold(0.0, f64::max)
    }

    fn threshold(&self, present: &[bool; K], b: usize) -> f64 {
        let lift = (0..K)
            .filter(|&a| a != b && present[a])
            .map(|a| self.boost[a][b])
            .fold(0.0, f64::max);
        (self.base[b] + lift).min(1.0)
    }
}

/// Draws a scene. Deterministic in `(prior, seed)`.
///
/// Each kind gets one uniform draw `u`. A kind is present when `u` falls
/// under its base rate plus the strongest boost from the kinds already
/// present; thresholds only grow, so the set is closed to a fixpoint. An
/// empty draw seeds the kind with the smallest `u / base` and closes again.
/// More than six kinds are trimmed, forced kinds last.
pub fn sample_scene(prior: &CooccurrencePrior, seed: u64) -> Scene {
    let mut rng = stream(seed, purpose::SCENE);
    let u: Vec<f64> = (0..K).map(|_| rng.random::<f64>()).collect();

    let close = |present: &mut [bool; K]| loop {
        let mut changed = false;
        for b in 0..K {
            if !present[b] && u[b] < prior.threshold(present, b) {
                present[b] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    };
    let mut present = [false; K];
    close(&mut present);
    if !present.contains(&true) {
        let best = (0..K)
            .filter(|&b| prior.base[b] > 0.0)
            .min_by(|&a, &b| (u[a] / prior.base[a]).total_cmp(&(u[b] / prior.base[b])))
            .unwrap_or_else(|| (0..K).min_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap());
        present[best] = true;
        close(&mut present);
    }

    let mut kinds: Vec<usize> = (0..K).filter(|&b| present[b]).collect();
    if kinds.len() > MAX_INSTANCES {
        let thresholds: Vec<f64> = (0..K).map(|b| prior.threshold(&present, b)).collect();
        // drop unforced kinds with the largest draw first
        kinds.sort_by(|&a, &b| {
            let fa = thresholds[a] >= 1.0;
            let fb = thresholds[b] >= 1.0;
            fb.cmp(&fa).then(u[a].total_cmp(&u[b])).then(a.cmp(&b))
        });
        kinds.truncate(MAX_INSTANCES);
        kinds.sort_unstable();
    }

    let mut members: Vec<usize> = Vec::with_capacity(MAX_INSTANCES);
    for &k in &kinds {
        members.push(k);
    }
    for &k in &kinds {
        if members.len() < MAX_INSTANCES && rng.random::<f64>() < prior.duplicate {
            members.push(k);
        }
    }

    let mut cells: Vec<usize> = (0..NUM_CELLS).collect();
    cells.shuffle(&mut rng);
    let instances = members
        .iter()
        .zip(cells)
        .map(|(&k, cell)| ObjectInstance {
            kind: ObjectKind(k as u8),
            color: Color(rng.random_range(0..Color::COUNT as u8)),
            row: (cell / GRID_COLS as usize) as u8,
            col: (cell % GRID_COLS as usize) as u8,
        })
        .collect();
    Scene::new(instances, seed).expect("sampler respects scene invariants")
}

/// Row-major `NUM_CELLS x FEATURE_DIM` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    data: Vec<f32>,
}

impl ImageFeatures {
    pub const ROWS: usize = NUM_CELLS;
    pub const COLS: usize = FEATURE_DIM;

    pub fn from_vec(data: Vec<f32>) -> Option<Self> {
        (data.len() == Self::ROWS * Self::COLS).then_some(Self { data })
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; Self::ROWS * Self::COLS],
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, cell: usize) -> &[f32] {
        &self.data[cell * Self::COLS..(cell + 1) * Self::COLS]
    }

    /// Recovers the instances from a clean (one-hot) grid.
    pub fn decode(&self) -> Result<Vec<ObjectInstance>, SceneError> {
        let mut out = Vec::new();
        for cell in 0..Self::ROWS {
            let row = self.row(cell);
            let hot: Vec<usize> = (0..Self::COLS).filter(|&j| row[j] == 1.0).collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if hot.len() != 1 || zeros != Self::COLS - 1 {
                return Err(SceneError::InvalidScene(format!(
                    "cell {cell} is not one-hot"
                )));
            }
            let j = hot[0];
            if j == EMPTY_FEATURE {
                continue;
            }
            out.push(ObjectInstance {
                kind: ObjectKind((j / Color::COUNT) as u8),
                color: Color((j % Color::COUNT) as u8),
                row: (cell / GRID_COLS as usize) as u8,
                col: (cell % GRID_COLS as usize) as u8,
            });
        }
        Ok(out)
    }
}

pub fn render_features(scene: &Scene) -> ImageFeatures {
    let mut f = ImageFeatures::zeros();
    let mut filled = [false; NUM_CELLS];
    for inst in &scene.instances {
        let cell = inst.cell_index();
        filled[cell] = true;
        f.data[cell * FEATURE_DIM + inst.feature_index()] = 1.0;
    }
    for (cell, full) in filled.iter().enumerate() {
        if !full {
            f.data[cell * FEATURE_DIM + EMPTY_FEATURE] = 1.0;
        }
    }
    f
}

pub fn caption_text(scene: &Scene) -> String {
    match scene.instances.as_slice() {
        [] => "the image is empty".to_string(),
        [only] => format!("in the image there is a {} {}", only.color.name(), only.kind.name()),
        many => {
            let parts: Vec<String> = many
                .iter()
                .map(|i| {
                    format!(
                        "a {} {} at ({},{})",
                        i.color.name(),
                        i.kind.name(),
                        i.row,
                        i.col
                    )
                })
                .collect();
            format!("in the image there are {}", parts.join(" and "))
        }
    }
}

/// Templated caption mentioning every instance once, in raster order.
pub fn caption(scene: &Scene, vocab: &Vocabulary) -> Vec<TokenId> {
    vocab
        .tokenize(&caption_text(scene))
        .expect("caption template uses lexicon words")
}

pub const CAPTION_PROMPT: &str = "describe the image .";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaKind {
    Existence,
    Count,
    Relation,
    Reasoning,
}

impl QaKind {
    pub fn name(self) -> &'static str {
        match self {
            QaKind::Existence => "existence",
            QaKind::Count => "count",
            QaKind::Relation => "relation",
            QaKind::Reasoning => "reasoning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

impl QaPair {
    pub fn tokens(&self, vocab: &Vocabulary) -> (Vec<TokenId>, Vec<TokenId>) {
        (
            vocab.tokenize(&self.question).expect("question template"),
            vocab.tokenize(&self.answer).expect("answer template"),
        )
    }
}

pub fn existence_question(kind: ObjectKind) -> String {
    format!("is there a {} in the image ?", kind.name())
}

/// Spatial relation of `a` with respect to `b`: left/right when the columns
/// differ, otherwise above/below.
pub fn relation_between(a: &ObjectInstance, b: &ObjectInstance) -> &'static str {
    use std::cmp::Ordering::*;
    match a.col.cmp(&b.col) {
        Less => "left",
        Greater => "right",
        Equal => {
            if a.row < b.row {
                "above"
            } else {
                "below"
            }
        }
    }
}

/// Whether `rel` correctly describes `a` with respect to `b`.
pub fn relation_holds(a: &ObjectInstance, b: &ObjectInstance, rel: &str) -> bool {
    match rel {
        "left" => a.col < b.col,
        "right" => a.col > b.col,
        "above" => a.row < b.row,
        "below" => a.row > b.row,
        _ => false,
    }
}

fn mention_list<'a>(items: impl Iterator<Item = &'a ObjectInstance>, with_color: bool) -> String {
    let parts: Vec<String> = items
        .map(|i| {
            if with_color {
                format!("a {} {} at ({},{})", i.color.name(), i.kind.name(), i.row, i.col)
            } else {
                format!("a {} at ({},{})", i.kind.name(), i.row, i.col)
            }
        })
        .collect();
    parts.join(" and ")
}

pub fn make_qa(scene: &Scene, kind: QaKind, seed: u64) -> Result<QaPair, SceneError> {
    let mut rng = stream(seed, purpose::QA);
    if scene.is_empty() && kind != QaKind::Existence {
        return Err(SceneError::EmptyScene(kind.name()));
    }
    match kind {
        QaKind::Existence => {
            let present: Vec<ObjectKind> = ObjectKind::all().filter(|&k| scene.contains(k)).collect();
            let absent: Vec<ObjectKind> = ObjectKind::all().filter(|&k| !scene.contains(k)).collect();
            let ask_present = !present.is_empty() && (absent.is_empty() || rng.random::<bool>());
            let (k, ans) = if ask_present {
                (*present.choose(&mut rng).unwrap(), "yes")
            } else {
                (*absent.choose(&mut rng).unwrap(), "no")
            };
            Ok(QaPair {
                question: existence_question(k),
                answer: ans.to_string(),
            })
        }
        QaKind::Count => {
            let kinds = scene.kinds();
            let k = *kinds.choose(&mut rng).unwrap();
            let n = scene.count(k);
            Ok(QaPair {
                question: format!("how many {} objects are there ?", k.name()),
                answer: format!(
                    "reason: there is {}. result: {n}",
                    mention_list(scene.instances.iter().filter(|i| i.kind == k), false)
                ),
            })
        }
        QaKind::Relation => {
            let singles: Vec<&ObjectInstance> = scene
                .instances
                .iter()
                .filter(|i| scene.count(i.kind) == 1)
                .collect();
            if singles.len() < 2 {
                return Err(SceneError::InsufficientObjects);
            }
            let pick: Vec<&&ObjectInstance> = singles.choose_multiple(&mut rng, 2).collect();
            let (a, b) = (*pick[0], *pick[1]);
            Ok(QaPair {
                question: format!(
                    "where is the {} relative to the {} ?",
                    a.kind.name(),
                    b.kind.name()
                ),
                answer: format!(
                    "the {} is {} of the {}",
                    a.kind.name(),
                    relation_between(a, b),
                    b.kind.name()
                ),
            })
        }
        QaKind::Reasoning => {
            let mut colors: Vec<Color> = scene.instances.iter().map(|i| i.color).collect();
            colors.sort();
            colors.dedup();
            let c = *colors.choose(&mut rng).unwrap();
            Ok(QaPair {
                question: format!("how many {} objects are there ?", c.name()),
                answer: format!(
                    "reason: there is {}. result: {}",
                    mention_list(scene.instances.iter().filter(|i| i.color == c), true),
                    scene.count_color(c)
                ),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Caption,
    Existence,
    Count,
    Relation,
    Reasoning,
}

impl Task {
    pub fn qa_kind(self) -> Option<QaKind> {
        match self {
            Task::Caption => None,
            Task::Existence => Some(QaKind::Existence),
            Task::Count => Some(QaKind::Count),
            Task::Relation => Some(QaKind::Relation),
            Task::Reasoning => Some(QaKind::Reasoning),
        }
    }
}

/// Share of each task in a generated corpus.
pub const TASK_MIX: [(Task, f64); 5] = [
    (Task::Caption, 0.5),
    (Task::Existence, 0.2),
    (Task::Count, 0.1),
    (Task::Relation, 0.1),
    (Task::Reasoning, 0.1),
];

/// One line of the corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: u64,
    pub seed: u64,
    pub scene: Scene,
    pub task: Task,
    pub prompt: String,
    pub answer: String,
}

impl CorpusRecord {
    pub fn scene(&self) -> Scene {
        Scene {
            instances: self.scene.instances.clone(),
            seed: self.seed,
        }
    }
}

/// Builds record `index` of a corpus; its seed is `corpus_seed + index`.
pub fn make_record(prior: &CooccurrencePrior, corpus_seed: u64, index: u64) -> CorpusRecord {
    let seed = corpus_seed.wrapping_add(index);
    let scene = sample_scene(prior, seed);
    let mut rng = stream(seed, purpose::TASK);
    let draw: f64 = rng.random();
    let mut acc = 0.0;
    let mut task = Task::Caption;
    for (t, w) in TASK_MIX {
        acc += w;
        if draw < acc {
            task = t;
            break;
        }
    }
    let (prompt, answer) = match task.qa_kind() {
        None => (CAPTION_PROMPT.to_string(), caption_text(&scene)),
        Some(kind) => match make_qa(&scene, kind, seed) {
            Ok(qa) => (qa.question, qa.answer),
            Err(_) => {
                task = Task::Caption;
                (CAPTION_PROMPT.to_string(), caption_text(&scene))
            }
        },
    };
    CorpusRecord {
        id: index,
        seed,
        scene,
        task,
        prompt,
        answer,
    }
}

pub fn generate_corpus(prior: &CooccurrencePrior, n: usize, corpus_seed: u64) -> Vec<CorpusRecord> {
    (0..n as u64)
        .map(|i| make_record(prior, corpus_seed, i))
        .collect()
}

pub fn write_corpus<W: Write>(mut out: W, records: &[CorpusRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<CorpusRecord>, SceneError> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| SceneError::InvalidScene(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| SceneError::InvalidScene(format!("line {}: {e}", n + 1)))?;
        Scene::new(rec.scene.instances.clone(), rec.seed)?;
        out.push(rec);
    }
    Ok(out)
}
