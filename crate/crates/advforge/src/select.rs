//! Random-walk selection of the adversarial strength set, plus an
//! exhaustive enumeration oracle used to verify it.
//!
//! Rows of the accuracy matrix are candidate training strengths, columns
//! are attack strengths, entries are validation accuracies of the
//! single-strength model under that attack.

use crate::attack::{craft_dataset, AttackConfig};
use crate::data::{split_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::train::{evaluate_accuracy, train_single_strength, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Validation accuracy of single-strength models indexed by
/// (training strength, attack strength).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub row_strengths: Vec<f64>,
    pub col_attacks: Vec<f64>,
    /// Row-major, `row_strengths.len() * col_attacks.len()` entries.
    pub entries: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new(row_strengths: Vec<f64>, col_attacks: Vec<f64>, entries: Vec<f64>) -> Result<Self> {
        let m = AccuracyMatrix {
            row_strengths,
            col_attacks,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.row_strengths.len(), self.col_attacks.len());
        if m == 0 || n == 0 {
            return Err(Error::InvalidArg("accuracy matrix must be non-empty".into()));
        }
        if self.entries.len() != m * n {
            return Err(Error::ShapeMismatch {
                expected: format!("{m}x{n} entries"),
                actual: format!("{}", self.entries.len()),
            });
        }
        if let Some(&v) = self.entries.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArg(format!(
                "accuracy entry {v} outside [0,1]"
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.row_strengths.len()
    }

    pub fn cols(&self) -> usize {
        self.col_attacks.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols()..(i + 1) * self.cols()]
    }

    pub fn row_mean(&self, i: usize) -> f64 {
        self.row(i).iter().sum::<f64>() / self.cols() as f64
    }

    /// CSV cache form: header row carries the attack strengths, the
    /// first column carries the candidate strengths.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_eps");
        for a in &self.col_attacks {
            out.push_str(&format!(",{a}"));
        }
        out.push('\n');
        for i in 0..self.rows() {
            out.push_str(&format!("{}", self.row_strengths[i]));
            for v in self.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty accuracy-matrix CSV".into()))?;
        let mut cols = header.split(',');
        cols.next(); // corner cell
        let col_attacks = cols
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad attack strength: {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut row_strengths = Vec::new();
        let mut entries = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            let eps = cells
                .next()
                .and_then(|c| c.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("bad matrix row: {line}")))?;
            row_strengths.push(eps);
            for c in cells {
                entries.push(
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad matrix entry: {c}")))?,
                );
            }
        }
        AccuracyMatrix::new(row_strengths, col_attacks, entries)
    }
}

/// How the multi-strength estimate combines selected rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Column-wise max over the selected rows (upper-boundary voting).
    Parallel,
    /// Column-wise mean over the selected rows (one blended model).
    Mixed,
}

impl std::fmt::Display for SelectMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectMode::Parallel => write!(f, "parallel"),
            SelectMode::Mixed => write!(f, "mixed"),
        }
    }
}

/// Walk parameters: steps per walk, walk count, penalty per selected
/// strength.
#[derive(Debug, Clone)]
pub struct RandomWalkConfig {
    pub steps: usize,
    pub walks: usize,
    pub penalty: f64,
    pub seed: u64,
    pub mode: SelectMode,
}

impl RandomWalkConfig {
    /// Defaults scale with the candidate count `m`.
    pub fn for_candidates(m: usize, mode: SelectMode) -> Self {
        RandomWalkConfig {
            steps: 2 * m.max(1),
            walks: 100 * m.max(1),
            penalty: 0.01,
            seed: 0,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.walks == 0 {
            return Err(Error::InvalidArg("steps and walks must be >= 1".into()));
        }
        if self.penalty < 0.0 {
            return Err(Error::InvalidArg("penalty must be non-negative".into()));
        }
        Ok(())
    }
}

/// A chosen strength subset with its penalized score `G = H - a*|V|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub chosen: Vec<f64>,
    pub score: f64,
    pub estimate: f64,
    pub walks_evaluated: usize,
    pub mode: SelectMode,
}

/// Train one single-strength model per candidate and record validation
/// accuracy under every attack strength (white-box crafting). The clean
/// set is split 90/10 into train/validation by `cfg.seed`.
pub fn build_accuracy_matrix(
    cfg: &TrainConfig,
    clean: &LabeledDataset,
    candidates: &[f64],
    attack_grid: &[f64],
) -> Result<AccuracyMatrix> {
    if candidates.is_empty() || attack_grid.is_empty() {
        return Err(Error::InvalidArg(
            "candidates and attack grid must be non-empty".into(),
        ));
    }
    let (train, val, _) = split_dataset(clean, (0.8, 0.1, 0.1), cfg.seed)?;
    let mut entries = Vec::with_capacity(candidates.len() * attack_grid.len());
    for &train_eps in candidates {
        let model = train_single_strength(cfg, &train, train_eps)?;
        for &attack_eps in attack_grid {
            let attacked = if attack_eps == 0.0 {
                val.clone()
            } else {
                craft_dataset(&model, &val, &AttackConfig::new(attack_eps))?
            };
            entries.push(evaluate_accuracy(&model, &attacked)?);
        }
    }
    AccuracyMatrix::new(candidates.to_vec(), attack_grid.to_vec(), entries)
}

/// Row-normalize: `A_M(i,j) = A(i,j) / sum(A(i))`.
pub fn normalize_matrix(a: &AccuracyMatrix) -> Result<AccuracyMatrix> {
    a.validate()?;
    let mut entries = Vec::with_capacity(a.entries.len());
    for i in 0..a.rows() {
        let sum: f64 = a.row(i).iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "row {i} of the accuracy matrix sums to zero"
            )));
        }
        entries.extend(a.row(i).iter().map(|v| v / sum));
    }
    Ok(AccuracyMatrix {
        row_strengths: a.row_strengths.clone(),
        col_attacks: a.col_attacks.clone(),
        entries,
    })
}

/// State-transition matrix over candidate strengths: zero self
/// transitions, off-diagonal mass proportional to destination row means.
pub fn transition_matrix(a: &AccuracyMatrix) -> Result<Vec<Vec<f64>>> {
    a.validate()?;
    let m = a.rows();
    if m < 2 {
        return Err(Error::InvalidArg(
            "transition matrix needs at least 2 candidates".into(),
        ));
    }
    let means: Vec<f64> = (0..m).map(|i| a.row_mean(i)).collect();
    let total: f64 = means.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArg("all mean accuracies are zero".into()));
    }
    let mut p = vec![vec![0.0; m]; m];
    for i in 0..m {
        let denom = total - means[i];
        if denom <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "row {i} has no positive transition mass"
            )));
        }
        for j in 0..m {
            if i != j {
                p[i][j] = means[j] / denom;
            }
        }
    }
    Ok(p)
}

fn subset_estimate(a: &AccuracyMatrix, subset: u32, mode: SelectMode) -> f64 {
    let n = a.cols();
    let mut total = 0.0;
    for j in 0..n {
        let mut acc = match mode {
            SelectMode::Parallel => f64::NEG_INFINITY,
            SelectMode::Mixed => 0.0,
        };
        let mut count = 0;
        for i in 0..a.rows() {
            if subset & (1 << i) != 0 {
                let v = a.row(i)[j];
                match mode {
                    SelectMode::Parallel => acc = acc.max(v),
                    SelectMode::Mixed => acc += v,
                }
                count += 1;
            }
        }
        total += match mode {
            SelectMode::Parallel => acc,
            SelectMode::Mixed => acc / count as f64,
        };
    }
    total / n as f64
}

fn subset_strengths(a: &AccuracyMatrix, subset: u32) -> Vec<f64> {
    (0..a.rows())
        .filter(|i| subset & (1 << i) != 0)
        .map(|i| a.row_strengths[i])
        .collect()
}

/// Ties break toward smaller subsets, then lexicographically smaller
/// strength sets.
fn better(
    a: &AccuracyMatrix,
    cand: (u32, f64),
    best: Option<(u32, f64)>,
) -> bool {
    let Some((best_set, best_score)) = best else {
        return true;
    };
    let (cand_set, cand_score) = cand;
    if cand_score != best_score {
        return cand_score > best_score;
    }
    let (cs, bs) = (cand_set.count_ones(), best_set.count_ones());
    if cs != bs {
        return cs < bs;
    }
    subset_strengths(a, cand_set) < subset_strengths(a, best_set)
}

fn result_of(a: &AccuracyMatrix, subset: u32, penalty: f64, mode: SelectMode, walks: usize) -> SelectionResult {
    let estimate = subset_estimate(a, subset, mode);
    SelectionResult {
        chosen: subset_strengths(a, subset),
        score: estimate - penalty * subset.count_ones() as f64,
        estimate,
        walks_evaluated: walks,
        mode,
    }
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Run `t` independent `l`-step walks over the candidate states and keep
/// the best-scoring visited set.
pub fn random_walk_select(a: &AccuracyMatrix, cfg: &RandomWalkConfig) -> Result<SelectionResult> {
    a.validate()?;
    cfg.validate()?;
    let m = a.rows();
    if m > 32 {
        return Err(Error::InvalidArg(format!(
            "{m} candidates exceed the subset-mask limit of 32"
        )));
    }
    if m == 1 {
        return Ok(result_of(a, 1, cfg.penalty, cfg.mode, 0));
    }
    let p = transition_matrix(a)?;
    let means: Vec<f64> = (0..m).map(|i| a.row_mean(i)).collect();
    let mut best: Option<(u32, f64)> = None;
    for walk in 0..cfg.walks {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(walk as u64));
        let mut state = sample_weighted(&mut rng, &means);
        let mut visited: u32 = 1 << state;
        // score every prefix of the visit sequence, so small sets stay
        // reachable even when the walk is long
        let consider = |visited: u32, best: &mut Option<(u32, f64)>| {
            let score =
                subset_estimate(a, visited, cfg.mode) - cfg.penalty * visited.count_ones() as f64;
            if better(a, (visited, score), *best) {
                *best = Some((visited, score));
            }
        };
        consider(visited, &mut best);
        for _ in 0..cfg.steps {
            state = sample_weighted(&mut rng, &p[state]);
            let next = visited | 1 << state;
            if next != visited {
                visited = next;
                consider(visited, &mut best);
            }
        }
    }
    let (subset, _) = best.unwrap();
    Ok(result_of(a, subset, cfg.penalty, cfg.mode, cfg.walks))
}

/// Exact argmax over all non-empty subsets; same scoring and
/// tie-breaking as the walk.
pub fn brute_force_select(
    a: &AccuracyMatrix,
    penalty: f64,
    mode: SelectMode,
) -> Result<SelectionResult> {
    a.validate()?;
    let m = a.rows();
    if m > 20 {
        return Err(Error::InvalidArg(format!(
            "{m} candidates exceed the 2^20 enumeration limit"
        )));
    }
    let mut best: Option<(u32, f64)> = None;
    for subset in 1u32..(1 << m) {
        let score = subset_estimate(a, subset, mode) - penalty * subset.count_ones() as f64;
        if better(a, (subset, score), best) {
            best = Some((subset, score));
        }
    }
    let (subset, _) = best.unwrap();
    Ok(result_of(a, subset, penalty, mode, 1 << m))
}
