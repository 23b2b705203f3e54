//! FGSM crafting, adversarial dataset generation, MSSIM similarity, and
//! MSSIM-based strength-budget calibration.

use crate::data::{DatasetTag, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{backward, forward, softmax_cross_entropy, Network};
use crate::tensor::Tensor;

const CRAFT_BATCH: usize = 256;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2, L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

/// Which model crafts the perturbations.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Crafting {
    /// White-box against the model under attack.
    #[default]
    SelfModel,
    /// A substitute model loaded from a checkpoint.
    Substitute(String),
}

/// FGSM settings: strength, pixel box, crafting source.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub crafting: Crafting,
    /// Crafting an already-adversarial dataset is rejected unless set.
    pub allow_reperturb: bool,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            crafting: Crafting::SelfModel,
            allow_reperturb: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArg(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.clamp_lo >= self.clamp_hi {
            return Err(Error::InvalidArg(format!(
                "clamp_lo {} must be below clamp_hi {}",
                self.clamp_lo, self.clamp_hi
            )));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-step FGSM: `x + eps * sign(dJ/dx)`, clamped to the pixel box.
pub fn fgsm(model: &Network, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if let Some(&v) = x
        .data()
        .iter()
        .find(|v| **v < cfg.clamp_lo || **v > cfg.clamp_hi)
    {
        return Err(Error::InvalidArg(format!(
            "input value {v} outside clamp box [{}, {}]",
            cfg.clamp_lo, cfg.clamp_hi
        )));
    }
    let acts = forward(model, x)?;
    let (_, dlogits) = softmax_cross_entropy(acts.logits(), y)?;
    let grads = backward(model, &acts, &dlogits)?;
    let mut adv = x.clone();
    for (v, g) in adv.data_mut().iter_mut().zip(grads.input_grad.data()) {
        *v = (*v + cfg.epsilon * sign(*g)).clamp(cfg.clamp_lo, cfg.clamp_hi);
    }
    Ok(adv)
}

/// Craft an entire dataset, preserving labels and order. The result is
/// tagged with the strength and the crafting model's identity.
pub fn craft_dataset(
    model: &Network,
    ds: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<LabeledDataset> {
    cfg.validate()?;
    if matches!(ds.tag, DatasetTag::Adversarial { .. }) && !cfg.allow_reperturb {
        return Err(Error::InvalidArg(format!(
            "dataset '{}' is already adversarial; set allow_reperturb to perturb again",
            ds.name
        )));
    }
    let n = ds.len();
    let w = ds.examples.row_len();
    let mut out = Vec::with_capacity(n * w);
    let mut start = 0;
    while start < n {
        let end = (start + CRAFT_BATCH).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(ds.example_shape());
        let batch = Tensor::new(
            shape,
            ds.examples.data()[start * w..end * w].to_vec(),
        )?;
        let adv = fgsm(model, &batch, &ds.labels[start..end], cfg)?;
        out.extend_from_slice(adv.data());
        start = end;
    }
    let mut shape = vec![n];
    shape.extend_from_slice(ds.example_shape());
    LabeledDataset::new(
        format!("{}@eps{}", ds.name, cfg.epsilon),
        Tensor::new(shape, out)?,
        ds.labels.clone(),
        ds.class_count,
        DatasetTag::Adversarial {
            epsilon: cfg.epsilon,
            crafter: model.identity(),
        },
    )
}

/// Mean SSIM over all 8x8 sliding windows (stride 1) of two
/// single-channel images in `[0,1]`.
pub fn mssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            actual: format!("{:?}", b.shape()),
        });
    }
    let [h, w] = *a.shape() else {
        return Err(Error::InvalidArg(format!(
            "mssim expects 2-D images, got shape {:?}",
            a.shape()
        )));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let inv = 1.0 / (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let row = (y0 + dy) * w + x0;
                for dx in 0..SSIM_WINDOW {
                    let va = ad[row + dx];
                    let vb = bd[row + dx];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let mu_a = sa * inv;
            let mu_b = sb * inv;
            let var_a = saa * inv - mu_a * mu_a;
            let var_b = sbb * inv - mu_b * mu_b;
            let cov = sab * inv - mu_a * mu_b;
            total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Dataset-average MSSIM between a crafted set and its clean source.
/// Examples must be square single-channel images when flat.
pub fn dataset_mssim(clean: &LabeledDataset, crafted: &LabeledDataset) -> Result<f64> {
    if clean.len() != crafted.len() || clean.example_shape() != crafted.example_shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} x {:?}", clean.len(), clean.example_shape()),
            actual: format!("{} x {:?}", crafted.len(), crafted.example_shape()),
        });
    }
    if clean.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let side = image_side(clean.example_shape())?;
    let mut total = 0.0;
    for i in 0..clean.len() {
        let a = Tensor::new(vec![side, side], clean.examples.row(i).to_vec())?;
        let b = Tensor::new(vec![side, side], crafted.examples.row(i).to_vec())?;
        total += mssim(&a, &b)?;
    }
    Ok(total / clean.len() as f64)
}

fn image_side(shape: &[usize]) -> Result<usize> {
    let n: usize = shape.iter().product();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::InvalidArg(format!(
            "example shape {shape:?} is not a square image"
        )));
    }
    Ok(side)
}

/// Result of the MSSIM strength-budget search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub epsilon: f64,
    /// False when no grid strength attains the floor and the smallest
    /// grid value was returned as a fallback.
    pub floor_met: bool,
}

/// Largest grid strength whose dataset-average MSSIM against the clean
/// set still reaches `mssim_floor`.
pub fn calibrate_max_strength(
    model: &Network,
    ds: &LabeledDataset,
    mssim_floor: f64,
    eps_grid: &[f64],
) -> Result<CalibrationResult> {
    if ds.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if eps_grid.is_empty() {
        return Err(Error::InvalidArg("empty epsilon grid".into()));
    }
    for w in eps_grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArg("epsilon grid must be ascending".into()));
        }
    }
    let mut best: Option<f64> = None;
    for &eps in eps_grid {
        let mut cfg = AttackConfig::new(eps);
        cfg.allow_reperturb = matches!(ds.tag, DatasetTag::Adversarial { .. });
        let crafted = craft_dataset(model, ds, &cfg)?;
        let score = dataset_mssim(ds, &crafted)?;
        if score >= mssim_floor {
            best = Some(eps);
        }
    }
    Ok(match best {
        Some(epsilon) => CalibrationResult {
            epsilon,
            floor_met: true,
        },
        None => CalibrationResult {
            epsilon: eps_grid[0],
            floor_met: false,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::{init_network, NetworkSpec};

    fn square_ds(n: usize, side: usize, seed: u64) -> LabeledDataset {
        let mut ds = synth_blobs(2, n / 2, side * side, 3.0, seed).unwrap();
        ds.tag = DatasetTag::Clean;
        ds
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let spec = NetworkSpec::mlp(&[4, 3]).unwrap();
        let net = init_network(&spec, 1).unwrap();
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.4, 0.6, 0.7]).unwrap();
        let adv = fgsm(&net, &x, &[0, 1], &AttackConfig::new(0.0)).unwrap();
        assert_eq!(adv, x);
    }

    #[test]
    fn fgsm_respects_clamp_boundary() {
        // construct a net whose gradient at a saturated pixel is positive
        let spec = NetworkSpec::mlp(&[2, 2]).unwrap();
        let mut net = init_network(&spec, 0).unwrap();
        {
            let p = net.params_mut()[0].as_mut().unwrap();
            // logit_1 grows with x_0; loss for target 0 has positive dJ/dx_0
            p.weights.data_mut().copy_from_slice(&[0.0, 5.0, 0.0, 0.0]);
        }
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let adv = fgsm(&net, &x, &[0], &AttackConfig::new(0.1)).unwrap();
        assert_eq!(adv.data()[0], 1.0); // pinned at the box
    }

    #[test]
    fn fgsm_matches_analytic_linear_softmax_gradient() {
        // Linear softmax on 2 features: logits = W^T x, target class 0.
        // dJ/dx = W (p - onehot). With W = [[1, -1], [2, 0]] and x = (0.5, 0.5):
        // logits = (1*0.5 + 2*0.5, -1*0.5 + 0*0.5) = (1.5, -0.5)
        let spec = NetworkSpec::mlp(&[2, 2]).unwrap();
        let mut net = init_network(&spec, 0).unwrap();
        net.params_mut()[0]
            .as_mut()
            .unwrap()
            .weights
            .data_mut()
            .copy_from_slice(&[1.0, -1.0, 2.0, 0.0]);
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let p1 = (-0.5f64 - 1.5).exp() / (1.0 + (-0.5f64 - 1.5).exp());
        let p0 = 1.0 - p1;
        // dJ/dx_k = sum_j W[k][j] * (p_j - [j==0])
        let g0 = 1.0 * (p0 - 1.0) + (-1.0) * p1;
        let g1 = 2.0 * (p0 - 1.0) + 0.0 * p1;
        assert!(g0 < 0.0 && g1 < 0.0);
        let eps = 0.2;
        let adv = fgsm(&net, &x, &[0], &AttackConfig::new(eps)).unwrap();
        assert!((adv.data()[0] - (0.5 - eps)).abs() < 1e-12);
        assert!((adv.data()[1] - (0.5 - eps)).abs() < 1e-12);
    }

    #[test]
    fn craft_preserves_structure_and_infinity_bound() {
        let ds = square_ds(20, 8, 7);
        let spec = NetworkSpec::mlp(&[64, 8, 2]).unwrap();
        let net = init_network(&spec, 3).unwrap();
        let eps = 0.07;
        let crafted = craft_dataset(&net, &ds, &AttackConfig::new(eps)).unwrap();
        assert_eq!(crafted.len(), ds.len());
        assert_eq!(crafted.labels, ds.labels);
        let diff = crafted.examples.max_abs_diff(&ds.examples).unwrap();
        assert!(diff <= eps + 1e-12);
        assert!(matches!(
            crafted.tag,
            DatasetTag::Adversarial { epsilon, .. } if epsilon == eps
        ));
    }

    #[test]
    fn craft_zero_epsilon_bit_identical() {
        let ds = square_ds(10, 8, 2);
        let spec = NetworkSpec::mlp(&[64, 2]).unwrap();
        let net = init_network(&spec, 0).unwrap();
        let crafted = craft_dataset(&net, &ds, &AttackConfig::new(0.0)).unwrap();
        assert_eq!(crafted.examples.data(), ds.examples.data());
    }

    #[test]
    fn craft_rejects_reperturbation_by_default() {
        let ds = square_ds(10, 8, 2);
        let spec = NetworkSpec::mlp(&[64, 2]).unwrap();
        let net = init_network(&spec, 0).unwrap();
        let crafted = craft_dataset(&net, &ds, &AttackConfig::new(0.05)).unwrap();
        let err = craft_dataset(&net, &crafted, &AttackConfig::new(0.05)).unwrap_err();
        assert!(err.to_string().contains("allow_reperturb"), "{err}");
        let mut cfg = AttackConfig::new(0.05);
        cfg.allow_reperturb = true;
        assert!(craft_dataset(&net, &crafted, &cfg).is_ok());
    }

    #[test]
    fn mssim_identity_is_one() {
        let img = Tensor::new(vec![10, 10], (0..100).map(|v| v as f64 / 100.0).collect()).unwrap();
        assert_eq!(mssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn mssim_constant_images_closed_form() {
        let a = Tensor::new(vec![8, 8], vec![0.2; 64]).unwrap();
        let b = Tensor::new(vec![8, 8], vec![0.8; 64]).unwrap();
        let expected = (2.0 * 0.16 + SSIM_C1) / (0.04 + 0.64 + SSIM_C1);
        let got = mssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn mssim_symmetry() {
        let a = Tensor::new(vec![9, 9], (0..81).map(|v| v as f64 / 81.0).collect()).unwrap();
        let b = Tensor::new(vec![9, 9], (0..81).map(|v| (v * 7 % 81) as f64 / 81.0).collect())
            .unwrap();
        let ab = mssim(&a, &b).unwrap();
        let ba = mssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn mssim_rejects_small_or_mismatched() {
        let a = Tensor::new(vec![4, 4], vec![0.0; 16]).unwrap();
        assert!(mssim(&a, &a).is_err());
        let b = Tensor::new(vec![8, 8], vec![0.0; 64]).unwrap();
        let c = Tensor::new(vec![8, 9], vec![0.0; 72]).unwrap();
        assert!(mssim(&b, &c).is_err());
    }

    #[test]
    fn calibrate_vacuous_floor_returns_last() {
        let ds = square_ds(10, 8, 4);
        let spec = NetworkSpec::mlp(&[64, 2]).unwrap();
        let net = init_network(&spec, 1).unwrap();
        let grid = [0.0, 0.05, 0.1];
        let r = calibrate_max_strength(&net, &ds, 0.0, &grid).unwrap();
        assert_eq!(r.epsilon, 0.1);
        assert!(r.floor_met);
    }

    #[test]
    fn calibrate_unattainable_floor_warns() {
        let ds = square_ds(10, 8, 4);
        let spec = NetworkSpec::mlp(&[64, 2]).unwrap();
        let net = init_network(&spec, 1).unwrap();
        let grid = [0.05, 0.1];
        let r = calibrate_max_strength(&net, &ds, 1.0 + 1e-9, &grid).unwrap();
        assert_eq!(r.epsilon, 0.05);
        assert!(!r.floor_met);
    }

    #[test]
    fn calibrate_rejects_empty_dataset() {
        let ds = square_ds(10, 8, 4);
        let empty = ds.take(&[], "empty");
        // take(&[]) builds a zero-row tensor, which Tensor::new rejects;
        // calibrate on a valid-but-empty path is covered by the grid check
        assert!(empty.is_err() || calibrate_max_strength(
            &init_network(&NetworkSpec::mlp(&[64, 2]).unwrap(), 0).unwrap(),
            &empty.unwrap(),
            0.5,
            &[0.1],
        )
        .is_err());
    }
}
