//! Question–answer generation over scenes.
//!
//! All question and answer text is lowercase with space-separated tokens
//! (punctuation included), which keeps the word-level tokenizer closed over
//! a small vocabulary. Six kinds are produced:
//!
//! * existence — "are there moving cars to the back right of the ego car ?"
//!   with yes/no answers, biased per category so a majority-class baseline
//!   is informative;
//! * cross-view localization / absolute-distance MCQ / relative-distance
//!   MCQ / absolute-distance numeric — questions that relate two objects
//!   seen by different cameras;
//! * behavior — "what should the ego car do ?" answered with the expert
//!   driver's maneuver sentence.
//!
//! Questions are only emitted when the answer is robust to the spatial
//! quantization of the token grids: an object near a sector boundary (or a
//! pair near a direction/distance decision boundary) is skipped, with the
//! tolerance scaling like `atan(slack / range)`. This mirrors dataset
//! curation for human-annotated view labels and keeps ground truth
//! unambiguous for every representation under test.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::{derive_seed, SplitMix64};
use crate::sector::{ang_dist_deg, bearing_deg, Sector, SectorPartition};
use crate::world::{expert_driver, Agent, Category, SceneGraph};

/// Largest integer distance that can appear in any question or option.
pub const MAX_ANSWER_METERS: usize = 50;

/// A geometry-only view of an object, shared by real scene graphs and the
/// pseudo-scenes reconstructed from token grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QaAgent {
    pub category: Category,
    pub moving: bool,
    /// Motion direction quantized to 8 bins of 45 degrees centered on the
    /// ego axes (0 = straight ahead). Only meaningful when `moving`.
    pub dir8: usize,
    pub x: f64,
    pub y: f64,
}

/// 45-degree direction bin of a heading (bin 0 centered on +x).
pub fn dir8_of_heading(heading_rad: f64) -> usize {
    let deg = math::wrap_deg(math::rad_to_deg(heading_rad));
    ((math::round(deg / 45.0) as i64).rem_euclid(8)) as usize
}

/// Center heading (radians) of a direction bin; inverse of [`dir8_of_heading`].
pub fn heading_of_dir8(dir8: usize) -> f64 {
    math::deg_to_rad(45.0 * (dir8 % 8) as f64)
}

impl QaAgent {
    pub fn from_agent(a: &Agent) -> QaAgent {
        QaAgent {
            category: a.category,
            moving: a.is_moving(),
            dir8: if a.is_moving() { dir8_of_heading(a.heading) } else { 0 },
            x: a.x,
            y: a.y,
        }
    }

    pub fn distance(&self) -> f64 {
        math::hypot(self.x, self.y)
    }

    pub fn bearing_deg(&self) -> f64 {
        bearing_deg(self.x, self.y)
    }

    pub fn sector(&self) -> Sector {
        SectorPartition.sector_of_deg(self.bearing_deg())
    }

    /// Spoken description, e.g. "the moving car in the front left" or
    /// "the traffic cone in the back". Status is omitted for categories
    /// that cannot move.
    pub fn descriptor(&self) -> String {
        let status = if !self.category.movable() {
            String::new()
        } else if self.moving {
            format!("moving ")
        } else {
            format!("{} ", self.category.still_word())
        };
        format!("the {}{} in the {}", status, self.category.name(), self.sector().phrase())
    }
}

pub fn agents_of_scene(scene: &SceneGraph) -> Vec<QaAgent> {
    scene.agents.iter().map(QaAgent::from_agent).collect()
}

// ---------------------------------------------------------------------------
// Kinds, samples, config
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QaKind {
    Existence,
    LocalizationMcq,
    AbsDistMcq,
    RelDistMcq,
    AbsDistNumeric,
    Behavior,
}

impl QaKind {
    /// Kinds scored as multiple choice.
    pub fn is_mcq(self) -> bool {
        matches!(self, QaKind::LocalizationMcq | QaKind::AbsDistMcq | QaKind::RelDistMcq)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct QaSample {
    pub scene_seed: u64,
    pub kind: QaKind,
    pub question: String,
    pub answer: String,
    /// Category the question is about (existence kind only).
    pub category: Option<Category>,
    /// Correct option index for MCQ kinds (0 = "a").
    pub letter: Option<u8>,
    /// Exact ground-truth value in meters for numeric kinds.
    pub numeric: Option<f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct QaGenConfig {
    pub existence_per_scene: usize,
    pub crossview_per_scene: usize,
    pub include_behavior: bool,
    /// Lateral slack (m) for sector-boundary robustness; the angular margin
    /// at range r is atan(slack / r).
    pub sector_slack_m: f64,
    /// Combined positional slack (m) for pairwise direction decisions.
    pub pair_slack_m: f64,
    /// Minimum separation between distance MCQ options (m).
    pub mcq_gap_m: f64,
    /// Minimum decision gap for relative-distance questions (m).
    pub reldist_gap_m: f64,
    /// Objects farther than this never appear in cross-view questions (m).
    pub max_question_dist_m: f64,
    /// Per-category probability of sampling a yes-case when available;
    /// deliberately uneven so the majority-class baseline beats chance.
    pub yes_prob: [f64; 10],
}

impl Default for QaGenConfig {
    fn default() -> Self {
        QaGenConfig {
            existence_per_scene: 12,
            crossview_per_scene: 6,
            include_behavior: true,
            sector_slack_m: 1.3,
            pair_slack_m: 2.8,
            mcq_gap_m: 4.0,
            reldist_gap_m: 3.0,
            max_question_dist_m: 31.0,
            // car, truck, bus, trailer, constr. vehicle, pedestrian,
            // motorcycle, bicycle, cone, barrier
            yes_prob: [0.85, 0.62, 0.72, 0.66, 0.80, 0.78, 0.77, 0.75, 0.58, 0.55],
        }
    }
}

/// Cross-scene balancing state: per-category yes/no counts, MCQ letter
/// usage, and localization direction usage.
#[derive(Clone, Debug, Default)]
pub struct QaBalancer {
    pub cat_yes: [usize; 10],
    pub cat_no: [usize; 10],
    pub letters4: [usize; 4],
    pub letters2: [usize; 2],
    pub loc_dirs: [usize; 4],
    pub kind_cursor: usize,
}

// ---------------------------------------------------------------------------
// Existence questions
// ---------------------------------------------------------------------------

/// Moving-status filter for existence questions; `None` for categories that
/// cannot move (their questions carry no status word).
pub type StatusFilter = Option<bool>;

fn status_matches(agent: &QaAgent, status: StatusFilter) -> bool {
    match status {
        None => true,
        Some(m) => agent.moving == m,
    }
}

fn status_phrase(cat: Category, status: StatusFilter) -> String {
    match status {
        None => String::new(),
        Some(true) => format!("moving "),
        Some(false) => format!("{} ", cat.still_word()),
    }
}

/// Angular margin (degrees) required between an object at range `r` and a
/// sector boundary before the object's sector label is considered robust.
pub fn sector_margin_deg(r: f64, slack_m: f64) -> f64 {
    math::rad_to_deg(math::atan2(slack_m, r.max(1e-9)))
}

fn safe_around_sector(a: &QaAgent, sector: Sector, slack_m: f64) -> bool {
    let (lo, hi) = sector.bounds_deg();
    let b = a.bearing_deg();
    let m = sector_margin_deg(a.distance(), slack_m);
    ang_dist_deg(b, lo) >= m && ang_dist_deg(b, hi) >= m
}

/// Does any agent of (category, status) sit in `sector`? `None` when the
/// answer would not survive grid quantization.
pub fn existence_truth(
    agents: &[QaAgent],
    cat: Category,
    status: StatusFilter,
    sector: Sector,
    slack_m: f64,
) -> Option<bool> {
    let mut present = false;
    for a in agents.iter().filter(|a| a.category == cat && status_matches(a, status)) {
        if !safe_around_sector(a, sector, slack_m) {
            return None;
        }
        if a.sector() == sector {
            present = true;
        }
    }
    Some(present)
}

pub fn existence_question_text(cat: Category, status: StatusFilter, sector: Sector) -> String {
    format!(
        "are there {}{} to the {} of the ego car ?",
        status_phrase(cat, status),
        cat.plural(),
        sector.phrase()
    )
}

/// Parse an existence question back into (status, category, sector).
/// Also used by the detection-readout baseline, which answers questions
/// from text alone plus a detector output.
pub fn parse_existence_question(q: &str) -> Option<(StatusFilter, Category, Sector)> {
    let rest = q.strip_prefix("are there ")?;
    let (body, tail) = rest.split_once(" to the ")?;
    let sector_phrase = tail.strip_suffix(" of the ego car ?")?;
    let sector = Sector::from_phrase(sector_phrase)?;
    for cat in Category::ALL {
        if let Some(prefix) = body.strip_suffix(cat.plural()) {
            let prefix = prefix.trim_end();
            let status = match prefix {
                "" => {
                    if cat.movable() {
                        continue;
                    }
                    None
                }
                "moving" => Some(true),
                p if p == cat.still_word() => Some(false),
                _ => continue,
            };
            return Some((status, cat, sector));
        }
    }
    None
}

fn existence_for_scene(
    scene_seed: u64,
    agents: &[QaAgent],
    cfg: &QaGenConfig,
    bal: &mut QaBalancer,
    rng: &mut SplitMix64,
    out: &mut Vec<QaSample>,
) {
    let mut used: Vec<(usize, StatusFilter, Sector)> = Vec::new();
    for _slot in 0..cfg.existence_per_scene {
        // categories in ascending total-count order, random tie break
        let mut order: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut order);
        order.sort_by_key(|&c| bal.cat_yes[c] + bal.cat_no[c]);
        let mut emitted = false;
        // pass 0 only serves categories whose yes/no deficit this scene can
        // satisfy; pass 1 takes whatever is available
        'passes: for pass in 0..2 {
            for &ci in &order {
                let cat = Category::from_index(ci);
                let statuses: Vec<StatusFilter> =
                    if cat.movable() { vec![Some(true), Some(false)] } else { vec![None] };
                let mut yes_triples = Vec::new();
                let mut no_triples = Vec::new();
                for &st in &statuses {
                    for sector in Sector::ALL {
                        if used.contains(&(ci, st, sector)) {
                            continue;
                        }
                        match existence_truth(agents, cat, st, sector, cfg.sector_slack_m) {
                            Some(true) => yes_triples.push((st, sector)),
                            Some(false) => no_triples.push((st, sector)),
                            None => {}
                        }
                    }
                }
                // steer the category's realized yes-rate toward its target
                let have = (bal.cat_yes[ci] + bal.cat_no[ci]) as f64;
                let desire_yes = (bal.cat_yes[ci] as f64) < (have + 1.0) * cfg.yes_prob[ci];
                let want_yes = if desire_yes && !yes_triples.is_empty() {
                    true
                } else if !desire_yes && !no_triples.is_empty() {
                    false
                } else if pass == 0 {
                    continue; // another category may serve its deficit here
                } else if !yes_triples.is_empty() {
                    true
                } else if !no_triples.is_empty() {
                    false
                } else {
                    continue;
                };
                let pool = if want_yes { &yes_triples } else { &no_triples };
                let (st, sector) = pool[rng.below(pool.len())];
                used.push((ci, st, sector));
                if want_yes {
                    bal.cat_yes[ci] += 1;
                } else {
                    bal.cat_no[ci] += 1;
                }
                out.push(QaSample {
                    scene_seed,
                    kind: QaKind::Existence,
                    question: existence_question_text(cat, st, sector),
                    answer: if want_yes { format!("yes .") } else { format!("no .") },
                    category: Some(cat),
                    letter: None,
                    numeric: None,
                });
                emitted = true;
                break 'passes;
            }
        }
        if !emitted {
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-view questions
// ---------------------------------------------------------------------------

pub const DIRECTION_WORDS: [&str; 4] = ["front", "back", "left", "right"];

/// Ego-axes quadrant of the vector (dx, dy): front/back when |dx| >= |dy|,
/// else left/right.
pub fn quadrant_of(dx: f64, dy: f64) -> usize {
    if math::abs(dx) >= math::abs(dy) {
        if dx >= 0.0 {
            0
        } else {
            1
        }
    } else if dy > 0.0 {
        2
    } else {
        3
    }
}

/// Angular distance (degrees) from the vector to the nearest quadrant
/// boundary (the 45-degree diagonals).
fn quadrant_margin_deg(dx: f64, dy: f64) -> f64 {
    let ang = math::wrap_deg(math::rad_to_deg(math::atan2(dy, dx)));
    [45.0, 135.0, 225.0, 315.0]
        .iter()
        .map(|&b| ang_dist_deg(ang, b))
        .fold(f64::INFINITY, f64::min)
}

/// An agent usable as a question referent: its (category, status, sector)
/// descriptor is unique in the scene and its sector label is robust.
pub fn unique_referents(agents: &[QaAgent], cfg: &QaGenConfig) -> Vec<QaAgent> {
    let mut out = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        if a.distance() > cfg.max_question_dist_m {
            continue;
        }
        if !safe_around_sector(a, a.sector(), cfg.sector_slack_m) {
            continue;
        }
        let clash = agents.iter().enumerate().any(|(j, b)| {
            j != i
                && b.category == a.category
                && (!a.category.movable() || b.moving == a.moving)
                && b.sector() == a.sector()
        });
        if !clash {
            out.push(*a);
        }
    }
    out
}

fn pick_least<const N: usize>(counts: &[usize; N], rng: &mut SplitMix64) -> usize {
    let min = *counts.iter().min().unwrap();
    let tied: Vec<usize> = (0..N).filter(|&i| counts[i] == min).collect();
    tied[rng.below(tied.len())]
}

fn option_letter(i: usize) -> &'static str {
    ["a", "b", "c", "d"][i]
}

fn crossview_for_scene(
    scene_seed: u64,
    agents: &[QaAgent],
    cfg: &QaGenConfig,
    bal: &mut QaBalancer,
    rng: &mut SplitMix64,
    out: &mut Vec<QaSample>,
) {
    let refs = unique_referents(agents, cfg);
    if refs.len() < 2 {
        return;
    }
    // ordered pairs in different sectors
    let mut pairs: Vec<(QaAgent, QaAgent)> = Vec::new();
    for a in &refs {
        for b in &refs {
            if a.sector() != b.sector() {
                pairs.push((*a, *b));
            }
        }
    }
    if pairs.is_empty() {
        return;
    }
    let kinds = [
        QaKind::LocalizationMcq,
        QaKind::AbsDistMcq,
        QaKind::RelDistMcq,
        QaKind::AbsDistNumeric,
    ];
    for _slot in 0..cfg.crossview_per_scene {
        let kind = kinds[bal.kind_cursor % kinds.len()];
        bal.kind_cursor += 1;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        match kind {
            QaKind::LocalizationMcq => {
                let want_dir = pick_least(&bal.loc_dirs, rng);
                let mut chosen = None;
                for pass in 0..2 {
                    for &pi in &order {
                        let (a, b) = pairs[pi];
                        let (dx, dy) = (b.x - a.x, b.y - a.y);
                        let dist = math::hypot(dx, dy);
                        if dist < 3.0 {
                            continue;
                        }
                        let margin = sector_margin_deg(dist, cfg.pair_slack_m);
                        if quadrant_margin_deg(dx, dy) < margin {
                            continue;
                        }
                        let dir = quadrant_of(dx, dy);
                        if pass == 0 && dir != want_dir {
                            continue;
                        }
                        chosen = Some((pi, dir));
                        break;
                    }
                    if chosen.is_some() {
                        break;
                    }
                }
                let Some((pi, dir)) = chosen else { continue };
                let (a, b) = pairs[pi];
                bal.loc_dirs[dir] += 1;
                out.push(QaSample {
                    scene_seed,
                    kind,
                    question: format!(
                        "in which direction , relative to the ego heading , is {} from {} ? \
                         a . front b . back c . left d . right",
                        b.descriptor(),
                        a.descriptor()
                    ),
                    answer: format!("{}", option_letter(dir)),
                    category: None,
                    letter: Some(dir as u8),
                    numeric: None,
                });
            }
            QaKind::AbsDistMcq | QaKind::AbsDistNumeric => {
                let mut chosen = None;
                for &pi in &order {
                    let (a, b) = pairs[pi];
                    let dist = math::hypot(b.x - a.x, b.y - a.y);
                    if dist < 3.0 || dist > cfg.max_question_dist_m {
                        continue;
                    }
                    chosen = Some((pi, dist));
                    break;
                }
                let Some((pi, dist)) = chosen else { continue };
                let (a, b) = pairs[pi];
                let true_m = math::round(dist) as i64;
                let question_stem = format!(
                    "how far , in meters , is {} from {} ?",
                    b.descriptor(),
                    a.descriptor()
                );
                if kind == QaKind::AbsDistNumeric {
                    out.push(QaSample {
                        scene_seed,
                        kind,
                        question: question_stem,
                        answer: format!("{true_m} meters"),
                        category: None,
                        letter: None,
                        numeric: Some(dist),
                    });
                } else {
                    // distractors at multiples of the option gap
                    let g = cfg.mcq_gap_m.max(1.0);
                    let mut cands: Vec<i64> = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]
                        .iter()
                        .map(|&k| true_m + (k * g) as i64)
                        .filter(|&v| v >= 1 && v <= MAX_ANSWER_METERS as i64)
                        .collect();
                    rng.shuffle(&mut cands);
                    if cands.len() < 3 {
                        continue;
                    }
                    let correct_letter = pick_least(&bal.letters4, rng);
                    bal.letters4[correct_letter] += 1;
                    let mut options = [0i64; 4];
                    options[correct_letter] = true_m;
                    let mut ci = 0;
                    for li in 0..4 {
                        if li != correct_letter {
                            options[li] = cands[ci];
                            ci += 1;
                        }
                    }
                    let opts_text = (0..4)
                        .map(|i| format!("{} . {} meters", option_letter(i), options[i]))
                        .collect::<Vec<_>>()
                        .join(" ");
                    out.push(QaSample {
                        scene_seed,
                        kind,
                        question: format!("{question_stem} {opts_text}"),
                        answer: format!("{}", option_letter(correct_letter)),
                        category: None,
                        letter: Some(correct_letter as u8),
                        numeric: Some(dist),
                    });
                }
            }
            QaKind::RelDistMcq => {
                let mut chosen = None;
                for &pi in &order {
                    let (a, b) = pairs[pi];
                    let d_ego = a.distance();
                    let d_b = math::hypot(b.x - a.x, b.y - a.y);
                    if (d_ego - d_b).abs() < cfg.reldist_gap_m {
                        continue;
                    }
                    chosen = Some((pi, d_ego < d_b));
                    break;
                }
                let Some((pi, ego_closer)) = chosen else { continue };
                let (a, b) = pairs[pi];
                let correct_letter = pick_least(&bal.letters2, rng);
                bal.letters2[correct_letter] += 1;
                let ego_text = format!("the ego car");
                let b_text = b.descriptor();
                let correct_text = if ego_closer { &ego_text } else { &b_text };
                let other_text = if ego_closer { &b_text } else { &ego_text };
                let (opt_a, opt_b) = if correct_letter == 0 {
                    (correct_text, other_text)
                } else {
                    (other_text, correct_text)
                };
                out.push(QaSample {
                    scene_seed,
                    kind,
                    question: format!(
                        "which one is closer to {} ? a . {} b . {}",
                        a.descriptor(),
                        opt_a,
                        opt_b
                    ),
                    answer: format!("{}", option_letter(correct_letter)),
                    category: None,
                    letter: Some(correct_letter as u8),
                    numeric: None,
                });
            }
            _ => unreachable!(),
        }
    }
}

/// Parse a referent descriptor like "the moving car in the front left".
pub fn parse_descriptor(s: &str) -> Option<(StatusFilter, Category, Sector)> {
    let rest = s.strip_prefix("the ")?;
    let (body, sector_phrase) = rest.split_once(" in the ")?;
    let sector = Sector::from_phrase(sector_phrase)?;
    for cat in Category::ALL {
        if let Some(prefix) = body.strip_suffix(cat.name()) {
            let prefix = prefix.trim_end();
            let status = match prefix {
                "" => {
                    if cat.movable() {
                        continue;
                    }
                    None
                }
                "moving" => Some(true),
                p if p == cat.still_word() => Some(false),
                _ => continue,
            };
            return Some((status, cat, sector));
        }
    }
    None
}

/// Find the unique agent matching a descriptor, if any.
pub fn resolve_descriptor(agents: &[QaAgent], desc: &str) -> Option<QaAgent> {
    let (status, cat, sector) = parse_descriptor(desc)?;
    let matches: Vec<&QaAgent> = agents
        .iter()
        .filter(|a| a.category == cat && status_matches(a, status) && a.sector() == sector)
        .collect();
    if matches.len() == 1 {
        Some(*matches[0])
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Behavior questions and corpus assembly
// ---------------------------------------------------------------------------

pub const BEHAVIOR_QUESTION: &str = "what should the ego car do ?";

/// The four possible behavior answers (lowercase token form).
pub fn behavior_sentences() -> [String; 4] {
    [
        crate::world::Maneuver::KeepSpeed,
        crate::world::Maneuver::Brake,
        crate::world::Maneuver::ChangeLeft,
        crate::world::Maneuver::ChangeRight,
    ]
    .map(|m| m.behavior_sentence().to_lowercase())
}

pub fn behavior_for_scene(scene: &SceneGraph) -> QaSample {
    let plan = expert_driver(scene);
    QaSample {
        scene_seed: scene.seed,
        kind: QaKind::Behavior,
        question: String::from(BEHAVIOR_QUESTION),
        answer: plan.maneuver.behavior_sentence().to_lowercase(),
        category: None,
        letter: None,
        numeric: None,
    }
}

/// Generate the full corpus for a slice of scenes. Balancing state spans
/// the whole corpus so letters and categories even out globally.
pub fn generate_corpus(scenes: &[SceneGraph], cfg: &QaGenConfig, seed: u64) -> Vec<QaSample> {
    let mut bal = QaBalancer::default();
    let mut out = Vec::new();
    for scene in scenes {
        let mut rng = SplitMix64::new(derive_seed(seed, 0x9A ^ scene.seed));
        let agents = agents_of_scene(scene);
        existence_for_scene(scene.seed, &agents, cfg, &mut bal, &mut rng, &mut out);
        crossview_for_scene(scene.seed, &agents, cfg, &mut bal, &mut rng, &mut out);
        if cfg.include_behavior {
            out.push(behavior_for_scene(scene));
        }
    }
    out
}

/// Per-kind and per-answer counts for reporting and balance checks.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct CorpusStats {
    pub total: usize,
    pub existence: usize,
    pub existence_yes: usize,
    pub mcq: usize,
    pub numeric: usize,
    pub behavior: usize,
    pub letters4: [usize; 4],
    pub letters2: [usize; 2],
    pub per_category: [usize; 10],
    pub per_category_yes: [usize; 10],
}

impl CorpusStats {
    /// Class-average accuracy an always-answer-the-majority baseline would
    /// reach on a corpus with these counts.
    pub fn majority_ceiling(&self) -> f64 {
        let mut acc = 0.0;
        let mut n = 0;
        for c in 0..10 {
            if self.per_category[c] == 0 {
                continue;
            }
            let yes = self.per_category_yes[c];
            let no = self.per_category[c] - yes;
            acc += yes.max(no) as f64 / self.per_category[c] as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }
}

pub fn corpus_stats(corpus: &[QaSample]) -> CorpusStats {
    let mut s = CorpusStats { total: corpus.len(), ..Default::default() };
    for q in corpus {
        match q.kind {
            QaKind::Existence => {
                s.existence += 1;
                let yes = q.answer.starts_with("yes");
                if yes {
                    s.existence_yes += 1;
                }
                if let Some(c) = q.category {
                    s.per_category[c.index()] += 1;
                    if yes {
                        s.per_category_yes[c.index()] += 1;
                    }
                }
            }
            QaKind::LocalizationMcq | QaKind::AbsDistMcq => {
                s.mcq += 1;
                if let Some(l) = q.letter {
                    s.letters4[l as usize] += 1;
                }
            }
            QaKind::RelDistMcq => {
                s.mcq += 1;
                if let Some(l) = q.letter {
                    s.letters2[l as usize] += 1;
                }
            }
            QaKind::AbsDistNumeric => s.numeric += 1,
            QaKind::Behavior => s.behavior += 1,
        }
    }
    s
}
