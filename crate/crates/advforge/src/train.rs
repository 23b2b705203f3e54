//! Training structures: plain training, single-strength adversarial
//! training, mixed multi-strength training, and parallel multi-strength
//! training with an upper-boundary decision unit (UDU) that combines
//! copy outputs through learned simplex voting weights.
//!
//! Adversarial training examples are re-crafted against the current
//! model as training proceeds (batch by batch) unless `static_crafting`
//! is set, in which case they are crafted once against the initial
//! model and reused.

use crate::attack::{craft_dataset, AttackConfig};
use crate::data::{build_mixed_dataset, concat, DatasetTag, LabeledDataset, MixedBuildConfig, SizeMode};
use crate::error::{Error, Result};
use crate::nn::{
    argmax, backward, forward, init_network, predict, sgd_step, softmax_cross_entropy, Network,
    NetworkSpec, OptimizerState,
};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EVAL_BATCH: usize = 512;
const UDU_FIT_ITERS: usize = 300;
const UDU_FIT_LR: f64 = 1.0;

/// Hyperparameters shared by every training structure.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub victim: NetworkSpec,
    /// Craft adversarial examples once against the initial model instead
    /// of re-crafting them against the current weights every batch.
    pub static_crafting: bool,
}

impl TrainConfig {
    pub fn new(victim: NetworkSpec) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            victim,
            static_crafting: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArg("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArg("lr must be positive".into()));
        }
        self.victim.validate()
    }
}

/// `S` trained network copies plus simplex voting weights.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub copies: Vec<Network>,
    pub votes: Vec<f64>,
    pub strengths: Vec<f64>,
}

impl Ensemble {
    pub fn validate(&self) -> Result<()> {
        let s = self.copies.len();
        if s == 0 || self.votes.len() != s || self.strengths.len() != s {
            return Err(Error::InvalidArg(format!(
                "ensemble needs matching copies/votes/strengths, got {}/{}/{}",
                s,
                self.votes.len(),
                self.strengths.len()
            )));
        }
        if self.votes.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidArg("votes must be non-negative".into()));
        }
        let sum: f64 = self.votes.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg(format!("votes sum to {sum}, not 1")));
        }
        Ok(())
    }
}

fn batch_of(ds: &LabeledDataset, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let w = ds.examples.row_len();
    let mut data = Vec::with_capacity(indices.len() * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(ds.examples.row(i));
        labels.push(ds.labels[i]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(ds.example_shape());
    Ok((Tensor::new(shape, data)?, labels))
}

/// One SGD pass over a (pre-composed) dataset in seeded shuffled order.
fn run_epoch(
    net: &mut Network,
    state: &mut OptimizerState,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng);
    let mut total_loss = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let (batch, labels) = batch_of(ds, chunk)?;
        let acts = forward(net, &batch)?;
        let (loss, dlogits) = softmax_cross_entropy(acts.logits(), &labels)?;
        let grads = backward(net, &acts, &dlogits)?;
        sgd_step(net, &grads, cfg.lr, cfg.momentum, state)?;
        total_loss += loss;
        batches += 1;
    }
    Ok(total_loss / batches as f64)
}

/// One epoch entry: a clean example index and the strength to craft it
/// at before the SGD step (0 means use the example as-is).
type PlanEntry = (usize, f64);

/// Entries for clean plus one crafted pass per strength. Full mode
/// covers every example in every part; reduced mode subsamples each
/// part to `fraction` of the clean size (clean part seeded with `seed`,
/// strength `k` with `seed + 1 + k`, mirroring the dataset builder).
fn adversarial_plan(
    clean_len: usize,
    strengths: &[f64],
    size_mode: SizeMode,
    seed: u64,
) -> Result<Vec<PlanEntry>> {
    let part_indices = |take: usize, part_seed: u64| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(part_seed);
        let mut idx: Vec<usize> = (0..clean_len).collect();
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx
    };
    let mut plan = Vec::new();
    match size_mode {
        SizeMode::Full => {
            plan.extend((0..clean_len).map(|i| (i, 0.0)));
            for &eps in strengths {
                plan.extend((0..clean_len).map(|i| (i, eps)));
            }
        }
        SizeMode::Reduced { fraction } => {
            if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
                return Err(Error::InvalidArg(format!(
                    "reduced fraction must be in (0, 1], got {fraction}"
                )));
            }
            let take = ((clean_len as f64) * fraction).floor() as usize;
            if take == 0 {
                return Err(Error::InvalidArg(
                    "reduced fraction leaves zero examples per part".into(),
                ));
            }
            plan.extend(part_indices(take, seed).into_iter().map(|i| (i, 0.0)));
            for (k, &eps) in strengths.iter().enumerate() {
                plan.extend(
                    part_indices(take, seed + 1 + k as u64)
                        .into_iter()
                        .map(|i| (i, eps)),
                );
            }
        }
    }
    Ok(plan)
}

/// One SGD pass over a plan: per batch, the adversarial entries are
/// crafted fresh against the current weights, so the perturbations
/// never go stale within the epoch.
fn run_plan_epoch(
    net: &mut Network,
    state: &mut OptimizerState,
    clean: &LabeledDataset,
    plan: &[PlanEntry],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<PlanEntry> = plan.to_vec();
    order.shuffle(&mut rng);
    let mut total_loss = 0.0;
    let mut batches = 0;
    let width = clean.examples.row_len();
    for chunk in order.chunks(cfg.batch_size) {
        // group the chunk by strength, keeping first-appearance order
        let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for &(i, eps) in chunk {
            match groups.iter_mut().find(|(e, _)| *e == eps) {
                Some((_, idx)) => idx.push(i),
                None => groups.push((eps, vec![i])),
            }
        }
        let mut data = Vec::with_capacity(chunk.len() * width);
        let mut labels = Vec::with_capacity(chunk.len());
        for (eps, idx) in &groups {
            let (x, y) = batch_of(clean, idx)?;
            let x = if *eps > 0.0 {
                crate::attack::fgsm(net, &x, &y, &AttackConfig::new(*eps))?
            } else {
                x
            };
            data.extend_from_slice(x.data());
            labels.extend_from_slice(&y);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(clean.example_shape());
        let batch = Tensor::new(shape, data)?;
        let acts = forward(net, &batch)?;
        let (loss, dlogits) = softmax_cross_entropy(acts.logits(), &labels)?;
        let grads = backward(net, &acts, &dlogits)?;
        sgd_step(net, &grads, cfg.lr, cfg.momentum, state)?;
        total_loss += loss;
        batches += 1;
    }
    Ok(total_loss / batches as f64)
}

/// Train on the clean dataset only.
pub fn train_plain(cfg: &TrainConfig, clean: &LabeledDataset) -> Result<Network> {
    cfg.validate()?;
    let mut net = init_network(&cfg.victim, cfg.seed)?;
    let mut state = OptimizerState::new(&net);
    for epoch in 0..cfg.epochs {
        run_epoch(&mut net, &mut state, clean, cfg, epoch)?;
    }
    Ok(net)
}

fn crafted_at(net: &Network, clean: &LabeledDataset, eps: f64) -> Result<LabeledDataset> {
    craft_dataset(net, clean, &AttackConfig::new(eps))
}

/// Half clean, half `eps`-crafted training at one fixed strength.
pub fn train_single_strength(
    cfg: &TrainConfig,
    clean: &LabeledDataset,
    eps: f64,
) -> Result<Network> {
    cfg.validate()?;
    if eps < 0.0 {
        return Err(Error::InvalidArg(format!(
            "adversarial strength must be non-negative, got {eps}"
        )));
    }
    let mut net = init_network(&cfg.victim, cfg.seed)?;
    let mut state = OptimizerState::new(&net);
    if cfg.static_crafting {
        let adv = crafted_at(&net, clean, eps)?;
        let ds = concat(&[clean, &adv], "single-strength", DatasetTag::Clean)?;
        for epoch in 0..cfg.epochs {
            run_epoch(&mut net, &mut state, &ds, cfg, epoch)?;
        }
    } else {
        let plan = adversarial_plan(clean.len(), &[eps], SizeMode::Full, cfg.seed)?;
        for epoch in 0..cfg.epochs {
            run_plan_epoch(&mut net, &mut state, clean, &plan, cfg, epoch)?;
        }
    }
    Ok(net)
}

/// Mixed MAT: one model trained on clean data plus `S` adversarial sets
/// at distinct strengths, realized as SGD over the concatenated (or
/// reduced) mixed dataset.
pub fn train_mixed_mat(
    cfg: &TrainConfig,
    clean: &LabeledDataset,
    strengths: &[f64],
    size_mode: SizeMode,
) -> Result<Network> {
    cfg.validate()?;
    if strengths.is_empty() {
        return Err(Error::InvalidArg("mixed MAT requires S >= 1 strengths".into()));
    }
    let mut net = init_network(&cfg.victim, cfg.seed)?;
    let mut state = OptimizerState::new(&net);
    if cfg.static_crafting {
        let adv_sets = strengths
            .iter()
            .map(|&e| crafted_at(&net, clean, e))
            .collect::<Result<Vec<_>>>()?;
        let build = MixedBuildConfig {
            strengths: strengths.to_vec(),
            size_mode,
            seed: cfg.seed,
        };
        let ds = build_mixed_dataset(clean, &adv_sets, &build)?;
        for epoch in 0..cfg.epochs {
            run_epoch(&mut net, &mut state, &ds, cfg, epoch)?;
        }
    } else {
        let plan = adversarial_plan(clean.len(), strengths, size_mode, cfg.seed)?;
        for epoch in 0..cfg.epochs {
            run_plan_epoch(&mut net, &mut state, clean, &plan, cfg, epoch)?;
        }
    }
    Ok(net)
}

/// Parallel MAT: `S` independent copies, copy `k` trained on clean plus
/// the `eps_k`-crafted set with seed `cfg.seed + k` (`k` counted from 1).
/// Votes start uniform; fit them with [`fit_udu_weights`].
pub fn train_parallel_mat(
    cfg: &TrainConfig,
    clean: &LabeledDataset,
    strengths: &[f64],
    copy_spec: &NetworkSpec,
) -> Result<Ensemble> {
    cfg.validate()?;
    if strengths.is_empty() {
        return Err(Error::InvalidArg(
            "parallel MAT requires S >= 1 strengths".into(),
        ));
    }
    let s = strengths.len();
    let copies = strengths
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let mut copy_cfg = cfg.clone();
            copy_cfg.victim = copy_spec.clone();
            copy_cfg.seed = cfg.seed + (k as u64 + 1);
            train_single_strength(&copy_cfg, clean, eps)
        })
        .collect::<Result<Vec<_>>>()?;
    let ens = Ensemble {
        copies,
        votes: vec![1.0 / s as f64; s],
        strengths: strengths.to_vec(),
    };
    ens.validate()?;
    Ok(ens)
}

/// Vote-weighted probability average over the copies; rows sum to 1,
/// ties break toward the lowest class index.
pub fn udu_predict(ens: &Ensemble, batch: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    ens.validate()?;
    let mut combined: Option<Tensor> = None;
    for (copy, &a) in ens.copies.iter().zip(&ens.votes) {
        let (probs, _) = predict(copy, batch)?;
        match &mut combined {
            None => {
                let mut p = probs;
                for v in p.data_mut() {
                    *v *= a;
                }
                combined = Some(p);
            }
            Some(acc) => {
                if acc.shape() != probs.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?}", acc.shape()),
                        actual: format!("{:?}", probs.shape()),
                    });
                }
                for (slot, v) in acc.data_mut().iter_mut().zip(probs.data()) {
                    *slot += a * v;
                }
            }
        }
    }
    let combined = combined.unwrap();
    let labels = (0..combined.rows())
        .map(|i| argmax(combined.row(i)))
        .collect();
    Ok((combined, labels))
}

fn mixture_for(ens: &Ensemble, val: &LabeledDataset) -> Result<LabeledDataset> {
    let mut parts = vec![val.clone()];
    for (copy, &eps) in ens.copies.iter().zip(&ens.strengths) {
        parts.push(craft_dataset(copy, val, &AttackConfig::new(eps))?);
    }
    let refs: Vec<&LabeledDataset> = parts.iter().collect();
    concat(&refs, "udu-mixture", DatasetTag::Clean)
}

fn mixture_accuracy(probs_per_copy: &[Tensor], votes: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    let classes = probs_per_copy[0].row_len();
    let mut hits = 0usize;
    let mut row = vec![0.0; classes];
    for i in 0..n {
        row.fill(0.0);
        for (p, &a) in probs_per_copy.iter().zip(votes) {
            for (slot, v) in row.iter_mut().zip(p.row(i)) {
                *slot += a * v;
            }
        }
        if argmax(&row) == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Fit the voting weights on a validation mixture (clean plus one
/// crafted set per ensemble strength). The weights are parameterized as
/// `a = softmax(z)` and fitted by gradient descent on the cross-entropy
/// of the vote-weighted probability average; if the fitted weights score
/// worse than uniform on the mixture, uniform is kept.
pub fn fit_udu_weights(ens: &Ensemble, val: &LabeledDataset) -> Result<Ensemble> {
    ens.validate()?;
    if val.is_empty() {
        return Err(Error::Dataset("empty validation set".into()));
    }
    let s = ens.copies.len();
    if s == 1 {
        let mut out = ens.clone();
        out.votes = vec![1.0];
        return Ok(out);
    }
    let mixture = mixture_for(ens, val)?;
    let probs_per_copy: Vec<Tensor> = ens
        .copies
        .iter()
        .map(|copy| predict_in_batches(copy, &mixture))
        .collect::<Result<Vec<_>>>()?;
    let n = mixture.len();
    let labels = &mixture.labels;

    let mut z = vec![0.0f64; s];
    for _ in 0..UDU_FIT_ITERS {
        let a = softmax_vec(&z);
        // dL/da_k = -(1/n) sum_i P_k[i][y_i] / q_i[y_i]
        let mut grad_a = vec![0.0; s];
        for i in 0..n {
            let y = labels[i];
            let mut q = 0.0;
            for (p, &ak) in probs_per_copy.iter().zip(&a) {
                q += ak * p.row(i)[y];
            }
            let q = q.max(1e-12);
            for (g, p) in grad_a.iter_mut().zip(&probs_per_copy) {
                *g -= p.row(i)[y] / q;
            }
        }
        for g in &mut grad_a {
            *g /= n as f64;
        }
        // chain through softmax: dL/dz_k = a_k (g_k - sum_j a_j g_j)
        let dot: f64 = a.iter().zip(&grad_a).map(|(av, gv)| av * gv).sum();
        for ((zv, &av), &gv) in z.iter_mut().zip(&a).zip(&grad_a) {
            *zv -= UDU_FIT_LR * av * (gv - dot);
        }
    }
    let fitted = softmax_vec(&z);
    let uniform = vec![1.0 / s as f64; s];
    let votes = if mixture_accuracy(&probs_per_copy, &fitted, labels)
        >= mixture_accuracy(&probs_per_copy, &uniform, labels)
    {
        fitted
    } else {
        uniform
    };
    let out = Ensemble {
        copies: ens.copies.clone(),
        votes,
        strengths: ens.strengths.clone(),
    };
    out.validate()?;
    Ok(out)
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Per-example class probabilities over a whole dataset, batched to keep
/// activation memory bounded.
pub fn predict_in_batches(net: &Network, ds: &LabeledDataset) -> Result<Tensor> {
    let mut out = Vec::with_capacity(ds.len() * ds.class_count);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (batch, _) = batch_of(ds, chunk)?;
        let (probs, _) = predict(net, &batch)?;
        out.extend_from_slice(probs.data());
    }
    Tensor::new(vec![ds.len(), ds.class_count], out)
}

/// Batched argmax accuracy of a single network on a dataset.
pub fn evaluate_accuracy(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    let probs = predict_in_batches(net, ds)?;
    let hits = (0..ds.len())
        .filter(|&i| argmax(probs.row(i)) == ds.labels[i])
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Batched argmax accuracy of an ensemble on a dataset.
pub fn evaluate_ensemble_accuracy(ens: &Ensemble, ds: &LabeledDataset) -> Result<f64> {
    let per_copy: Vec<Tensor> = ens
        .copies
        .iter()
        .map(|c| predict_in_batches(c, ds))
        .collect::<Result<Vec<_>>>()?;
    Ok(mixture_accuracy(&per_copy, &ens.votes, &ds.labels))
}
