//! Retrieval benchmarking.
//!
//! Protocol: draw populations of image-text pairs, project both sides,
//! score every query against every candidate by cosine similarity and
//! count how often the true partner lands in the top k. Accuracies are
//! averaged over trials, with the population standard deviation alongside.
//!
//! Ranks break ties toward the lower candidate index, so a query's rank is
//! the number of candidates scoring strictly higher plus the number of
//! lower-indexed candidates scoring equal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::DualProjector;
use crate::dataset::PairSet;
use crate::error::{Error, Result};
use crate::matrix::{dot_f64, norm_f64, Matrix, NORM_EPS};
use crate::rng;

pub const DEFAULT_POPULATIONS: [usize; 3] = [100, 1000, 10000];
pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 25];
pub const DEFAULT_GAP_POPULATION: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "i2t")]
    ImageToText,
}

impl Direction {
    pub fn short(self) -> &'static str {
        match self {
            Direction::TextToImage => "t2i",
            Direction::ImageToText => "i2t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionChoice {
    #[serde(rename = "t2i")]
    TextToImage,
    #[serde(rename = "i2t")]
    ImageToText,
    Both,
}

impl DirectionChoice {
    pub fn directions(self) -> Vec<Direction> {
        match self {
            DirectionChoice::TextToImage => vec![Direction::TextToImage],
            DirectionChoice::ImageToText => vec![Direction::ImageToText],
            DirectionChoice::Both => vec![Direction::TextToImage, Direction::ImageToText],
        }
    }
}

impl std::str::FromStr for DirectionChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2i" => Ok(DirectionChoice::TextToImage),
            "i2t" => Ok(DirectionChoice::ImageToText),
            "both" => Ok(DirectionChoice::Both),
            other => Err(Error::Argument(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub population_sizes: Vec<usize>,
    pub trials: usize,
    pub ks: Vec<usize>,
    pub direction: DirectionChoice,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            population_sizes: DEFAULT_POPULATIONS.to_vec(),
            trials: DEFAULT_TRIALS,
            ks: DEFAULT_KS.to_vec(),
            direction: DirectionChoice::Both,
            seed: 42,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Argument("trials must be at least 1".into()));
        }
        if self.population_sizes.is_empty() || self.ks.is_empty() {
            return Err(Error::Argument("need at least one population size and one k".into()));
        }
        let min_pop = *self.population_sizes.iter().min().unwrap();
        for &k in &self.ks {
            if k == 0 || k > min_pop {
                return Err(Error::Argument(format!("k = {k} must be in 1..={min_pop}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ranking kernels

fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|i| norm_f64(m.row(i)).max(NORM_EPS)).collect()
}

/// Cosine of one query against every candidate. Produces the same `f32`
/// values as [`crate::matrix::cosine_similarity_matrix`].
fn cosine_row(q: &[f32], q_norm: f64, cands: &Matrix, c_norms: &[f64], out: &mut [f32]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = (dot_f64(q, cands.row(j)) / (q_norm * c_norms[j])) as f32;
    }
}

#[inline]
fn diagonal_rank(row: &[f32], i: usize) -> usize {
    let d = row[i];
    row.iter()
        .enumerate()
        .filter(|&(j, &s)| s > d || (s == d && j < i))
        .count()
}

/// Zero-based rank of each query's true partner, where query `i` pairs with
/// candidate `i`.
fn paired_ranks(queries: &Matrix, candidates: &Matrix) -> Vec<usize> {
    let qn = row_norms(queries);
    let cn = row_norms(candidates);
    (0..queries.rows())
        .into_par_iter()
        .map_init(
            || vec![0.0f32; candidates.rows()],
            |buf, i| {
                cosine_row(queries.row(i), qn[i], candidates, &cn, buf);
                diagonal_rank(buf, i)
            },
        )
        .collect()
}

fn accuracies(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Fraction of rows whose diagonal entry ranks within the top `k`, per `k`.
pub fn recall_at_k(sim: &Matrix, ks: &[usize]) -> Result<Vec<f64>> {
    if sim.rows() != sim.cols() {
        return Err(Error::shape("recall_at_k", sim.shape(), (sim.rows(), sim.rows())));
    }
    let n = sim.rows();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Argument(format!("k = {k} must be in 1..={n}")));
    }
    let ranks: Vec<usize> = (0..n).map(|i| diagonal_rank(sim.row(i), i)).collect();
    Ok(accuracies(&ranks, ks))
}

// ---------------------------------------------------------------------------
// Population sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Trials use non-overlapping populations.
    Disjoint,
    /// Each trial is an independent seeded draw; populations may overlap.
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPlan {
    pub population: usize,
    pub mode: SamplingMode,
    /// Record positions for each trial.
    pub trials: Vec<Vec<usize>>,
}

/// Decides which records every trial uses.
///
/// When `n` covers every trial of every population at once, all
/// populations come from consecutive blocks of one seeded permutation and
/// nothing is reused anywhere. Otherwise each population size is handled on
/// its own: disjoint within the size if `trials * population <= n`,
/// independent draws if not.
pub fn plan_populations(n: usize, population_sizes: &[usize], trials: usize, seed: u64) -> Result<Vec<PopulationPlan>> {
    if let Some(&p) = population_sizes.iter().find(|&&p| p > n) {
        return Err(Error::size(format!("population of {p}"), p, n));
    }
    let mut rng = rng::seeded(seed, rng::STREAM_EVAL);
    let total: usize = population_sizes.iter().map(|p| p * trials).sum();
    if total <= n {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut blocks = perm.into_iter();
        return Ok(population_sizes
            .iter()
            .map(|&p| PopulationPlan {
                population: p,
                mode: SamplingMode::Disjoint,
                trials: (0..trials).map(|_| blocks.by_ref().take(p).collect()).collect(),
            })
            .collect());
    }
    let mut plans = Vec::with_capacity(population_sizes.len());
    for &p in population_sizes {
        let mut perm: Vec<usize> = (0..n).collect();
        if p * trials <= n {
            perm.shuffle(&mut rng);
            plans.push(PopulationPlan {
                population: p,
                mode: SamplingMode::Disjoint,
                trials: perm.chunks_exact(p.max(1)).take(trials).map(|c| c.to_vec()).collect(),
            });
        } else {
            log::warn!(
                "{n} pairs cannot hold {trials} disjoint populations of {p}; using independent draws"
            );
            let draws = (0..trials)
                .map(|_| {
                    let (chosen, _) = perm.partial_shuffle(&mut rng, p);
                    chosen.to_vec()
                })
                .collect();
            plans.push(PopulationPlan {
                population: p,
                mode: SamplingMode::Independent,
                trials: draws,
            });
        }
    }
    Ok(plans)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCell {
    pub direction: Direction,
    pub population: usize,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_trial: Vec<f64>,
}

impl RetrievalCell {
    /// Summarises per-trial accuracies with mean and population std.
    pub fn from_trials(direction: Direction, population: usize, k: usize, per_trial: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_trial);
        Self {
            direction,
            population,
            k,
            mean,
            std,
            trials: per_trial.len(),
            per_trial,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSampling {
    pub population: usize,
    pub mode: SamplingMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub cells: Vec<RetrievalCell>,
    #[serde(default)]
    pub sampling: Vec<PopulationSampling>,
}

impl RetrievalReport {
    pub fn from_cells(cells: Vec<RetrievalCell>) -> Self {
        Self {
            cells,
            sampling: Vec::new(),
        }
    }

    pub fn cell(&self, direction: Direction, population: usize, k: usize) -> Option<&RetrievalCell> {
        self.cells
            .iter()
            .find(|c| c.direction == direction && c.population == population && c.k == k)
    }

    fn axes(&self) -> (Vec<Direction>, Vec<usize>, Vec<usize>) {
        let dirs: BTreeSet<_> = self.cells.iter().map(|c| c.direction).collect();
        let pops: BTreeSet<_> = self.cells.iter().map(|c| c.population).collect();
        let ks: BTreeSet<_> = self.cells.iter().map(|c| c.k).collect();
        (dirs.into_iter().collect(), pops.into_iter().collect(), ks.into_iter().collect())
    }

    /// Aligned text table: one row per (direction, population), one column
    /// per k, each cell `mean% ± std%`.
    pub fn to_table(&self) -> String {
        let (dirs, pops, ks) = self.axes();
        let header: Vec<String> = ["direction".to_string(), "population".to_string()]
            .into_iter()
            .chain(ks.iter().map(|k| format!("@{k}")))
            .collect();
        let mut rows = vec![header];
        for &d in &dirs {
            for &p in &pops {
                let mut row = vec![d.short().to_string(), p.to_string()];
                for &k in &ks {
                    row.push(match self.cell(d, p, k) {
                        Some(c) => format!("{:.2}% ± {:.2}%", c.mean * 100.0, c.std * 100.0),
                        None => "-".into(),
                    });
                }
                rows.push(row);
            }
        }
        render_table(&rows)
    }
}

fn render_table(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s}{}", " ".repeat(widths[c] - s.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// Projected image and text vectors for every record of a set.
pub struct ProjectedSet {
    pub images: Matrix,
    pub texts: Matrix,
}

impl ProjectedSet {
    pub fn new(s: &PairSet, p: &DualProjector) -> Result<Self> {
        Ok(Self {
            images: p.project_images(&s.image_matrix())?,
            texts: p.project_texts(&s.text_matrix())?,
        })
    }

    fn trial_ranks(&self, indices: &[usize], direction: Direction) -> Vec<usize> {
        let imgs = self.images.gather_rows(indices);
        let txts = self.texts.gather_rows(indices);
        match direction {
            Direction::TextToImage => paired_ranks(&txts, &imgs),
            Direction::ImageToText => paired_ranks(&imgs, &txts),
        }
    }
}

/// Runs the recall@k protocol over every population size and direction.
pub fn run_trials(s: &PairSet, p: &DualProjector, cfg: &EvalConfig) -> Result<RetrievalReport> {
    cfg.validate()?;
    let plans = plan_populations(s.len(), &cfg.population_sizes, cfg.trials, cfg.seed)?;
    let projected = ProjectedSet::new(s, p)?;
    Ok(report_from_plans(&projected, &plans, cfg))
}

pub fn report_from_plans(projected: &ProjectedSet, plans: &[PopulationPlan], cfg: &EvalConfig) -> RetrievalReport {
    let mut cells = Vec::new();
    for direction in cfg.direction.directions() {
        for plan in plans {
            // per_k[k_index][trial]
            let mut per_k = vec![Vec::with_capacity(plan.trials.len()); cfg.ks.len()];
            for indices in &plan.trials {
                let ranks = projected.trial_ranks(indices, direction);
                for (slot, acc) in per_k.iter_mut().zip(accuracies(&ranks, &cfg.ks)) {
                    slot.push(acc);
                }
            }
            for (&k, per_trial) in cfg.ks.iter().zip(per_k) {
                cells.push(RetrievalCell::from_trials(direction, plan.population, k, per_trial));
            }
        }
    }
    RetrievalReport {
        cells,
        sampling: plans
            .iter()
            .map(|pl| PopulationSampling {
                population: pl.population,
                mode: pl.mode,
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Similarity gap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub population: usize,
    pub trials: usize,
    /// Mean gap per dataset tag.
    pub gaps: BTreeMap<String, f64>,
}

/// Mean over rows of `S[i][i] - mean_{j != i} S[i][j]`.
pub fn gap_from_similarity(sim: &Matrix) -> Result<f64> {
    if sim.rows() != sim.cols() {
        return Err(Error::shape("gap_from_similarity", sim.shape(), (sim.rows(), sim.rows())));
    }
    let n = sim.rows();
    if n < 2 {
        return Err(Error::Argument(format!("similarity gap needs at least 2 pairs, got {n}")));
    }
    let total: f64 = (0..n).map(|i| row_gap(sim.row(i), i)).sum();
    Ok(total / n as f64)
}

fn row_gap(row: &[f32], i: usize) -> f64 {
    let off: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &s)| s as f64).sum();
    row[i] as f64 - off / (row.len() - 1) as f64
}

/// Text-query similarity gap per dataset tag, averaged over trials.
pub fn similarity_gap(s: &PairSet, p: &DualProjector, population: usize, trials: usize, seed: u64) -> Result<GapReport> {
    if population < 2 {
        return Err(Error::Argument(format!("similarity gap needs a population of at least 2, got {population}")));
    }
    if trials == 0 {
        return Err(Error::Argument("trials must be at least 1".into()));
    }
    if population > s.len() {
        return Err(Error::size("similarity gap population", population, s.len()));
    }
    let projected = ProjectedSet::new(s, p)?;
    let mut gaps = BTreeMap::new();
    for tag in s.dataset_histogram().into_keys() {
        let members = s.indices_with_dataset(&tag);
        let plan = plan_populations(members.len(), &[population], trials, seed)
            .map_err(|_| Error::size(format!("similarity gap population for dataset {tag:?}"), population, members.len()))?;
        let mut total = 0.0;
        for local in &plan[0].trials {
            // Sorted so the summation order does not depend on the draw order.
            let mut indices: Vec<usize> = local.iter().map(|&l| members[l]).collect();
            indices.sort_unstable();
            let txts = projected.texts.gather_rows(&indices);
            let imgs = projected.images.gather_rows(&indices);
            let qn = row_norms(&txts);
            let cn = row_norms(&imgs);
            let trial_sum: f64 = (0..txts.rows())
                .into_par_iter()
                .map_init(
                    || vec![0.0f32; imgs.rows()],
                    |buf, i| {
                        cosine_row(txts.row(i), qn[i], &imgs, &cn, buf);
                        row_gap(buf, i)
                    },
                )
                .collect::<Vec<_>>()
                .into_iter()
                .sum();
            total += trial_sum / population as f64;
        }
        gaps.insert(tag, total / trials as f64);
    }
    Ok(GapReport {
        population,
        trials,
        gaps,
    })
}

impl GapReport {
    pub fn to_table(&self) -> String {
        let mut rows = vec![vec!["dataset".to_string(), format!("gap@{}", self.population)]];
        for (tag, g) in &self.gaps {
            rows.push(vec![tag.clone(), format!("{g:.4}")]);
        }
        render_table(&rows)
    }
}

// ---------------------------------------------------------------------------
// DCG deltas

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcgCell {
    pub direction: Direction,
    pub population: usize,
    pub k: usize,
    /// Percent.
    pub descriptive: f64,
    /// Percent.
    pub commentative: f64,
    /// `descriptive - commentative`, percentage points.
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcgReport {
    pub cells: Vec<DcgCell>,
}

/// Per-cell accuracy drop from a descriptive to a commentative report.
pub fn dcg_report(descriptive: &RetrievalReport, commentative: &RetrievalReport) -> Result<DcgReport> {
    let key = |c: &RetrievalCell| (c.direction, c.population, c.k);
    let dk: BTreeSet<_> = descriptive.cells.iter().map(key).collect();
    let ck: BTreeSet<_> = commentative.cells.iter().map(key).collect();
    if dk != ck || dk.len() != descriptive.cells.len() || ck.len() != commentative.cells.len() {
        return Err(Error::Argument(
            "descriptive and commentative reports do not share the same (direction, population, k) grid".into(),
        ));
    }
    let cells = descriptive
        .cells
        .iter()
        .map(|d| {
            let c = commentative.cell(d.direction, d.population, d.k).expect("grid checked");
            let desc = d.mean * 100.0;
            let comm = c.mean * 100.0;
            DcgCell {
                direction: d.direction,
                population: d.population,
                k: d.k,
                descriptive: desc,
                commentative: comm,
                delta_pp: desc - comm,
            }
        })
        .collect();
    Ok(DcgReport { cells })
}

impl DcgReport {
    pub fn cell(&self, direction: Direction, population: usize, k: usize) -> Option<&DcgCell> {
        self.cells
            .iter()
            .find(|c| c.direction == direction && c.population == population && c.k == k)
    }

    pub fn to_table(&self) -> String {
        let dirs: BTreeSet<_> = self.cells.iter().map(|c| c.direction).collect();
        let pops: BTreeSet<_> = self.cells.iter().map(|c| c.population).collect();
        let ks: BTreeSet<_> = self.cells.iter().map(|c| c.k).collect();
        let header = ["direction".to_string(), "population".to_string()]
            .into_iter()
            .chain(ks.iter().map(|k| format!("Δ@{k} (pp)")))
            .collect();
        let mut rows = vec![header];
        for &d in &dirs {
            for &p in &pops {
                let mut row = vec![d.short().to_string(), p.to_string()];
                for &k in &ks {
                    row.push(self.cell(d, p, k).map_or("-".into(), |c| format!("{:.2}", c.delta_pp)));
                }
                rows.push(row);
            }
        }
        render_table(&rows)
    }
}

// ---------------------------------------------------------------------------
// Top-k query

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    pub similarity: f64,
}

/// The `k` images most similar to a text embedding, best first.
pub fn query_topk(text_embedding: &[f32], image_set: &PairSet, p: &DualProjector, k: usize) -> Result<Vec<QueryHit>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > image_set.len() {
        return Err(Error::Argument(format!("k = {k} exceeds the {} available images", image_set.len())));
    }
    let query = Matrix::new(1, text_embedding.len(), text_embedding.to_vec())?;
    let q = p.project_texts(&query)?;
    let imgs = p.project_images(&image_set.image_matrix())?;
    let mut sims = vec![0.0f32; imgs.rows()];
    cosine_row(q.row(0), norm_f64(q.row(0)).max(NORM_EPS), &imgs, &row_norms(&imgs), &mut sims);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    // Same tie rule as the recall ranks: equal values (0.0 and -0.0 included)
    // keep index order.
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| QueryHit {
            id: image_set.records()[i].id.clone(),
            similarity: sims[i] as f64,
        })
        .collect())
}
