//! Energy, transferability, image-quality and statistical metrics.

use serde::{Deserialize, Serialize};

use crate::adnn::Adnn;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Above this many samples the Pearson p-value uses random shuffles.
pub const EXHAUSTIVE_MAX_N: usize = 7;

pub fn energy_increase_percent(e_orig: f64, e_test: f64) -> Result<f64> {
    if !(e_orig > 0.0) {
        return Err(Error::InvalidArgument(format!("original energy must be positive, got {e_orig}")));
    }
    Ok((e_test - e_orig) / e_orig * 100.0)
}

/// Fraction of the model's FLOPs reduction that the test input recovered:
/// `(test − orig) / (max − orig)`.
pub fn inc_rf(flops_orig: f64, flops_test: f64, flops_max: f64) -> Result<f64> {
    if flops_orig > flops_max {
        return Err(Error::InvalidArgument(format!("flops_orig {flops_orig} exceeds flops_max {flops_max}")));
    }
    if flops_orig == flops_max {
        return Err(Error::IncRfUndefined);
    }
    Ok((flops_test - flops_orig) / (flops_max - flops_orig))
}

/// FLOPs of one test input on the model it was crafted for (base) and on
/// the model it is replayed against (target).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub base_orig: u64,
    pub base_test: u64,
    pub base_max: u64,
    pub target_orig: u64,
    pub target_test: u64,
    pub target_max: u64,
}

impl TransferRecord {
    pub fn base_inc_rf(&self) -> Option<f64> {
        inc_rf(self.base_orig as f64, self.base_test as f64, self.base_max as f64).ok()
    }

    pub fn target_inc_rf(&self) -> Option<f64> {
        inc_rf(self.target_orig as f64, self.target_test as f64, self.target_max as f64).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    /// Share of base-effective inputs that also raise target FLOPs, in %.
    pub itp: f64,
    /// `P_t / P_b · 100`.
    pub etp: f64,
    /// Mean base IncRF over records where it is defined.
    pub p_b: f64,
    /// Mean target IncRF over records where it is defined.
    pub p_t: f64,
    /// Records whose test input raised base FLOPs.
    pub base_effective: usize,
    /// Records already at maximum FLOPs on the base or target model.
    pub excluded: usize,
}

pub fn transfer_metrics(records: &[TransferRecord]) -> Result<TransferMetrics> {
    if records.is_empty() {
        return Err(Error::Empty("transfer records"));
    }
    let effective: Vec<&TransferRecord> = records.iter().filter(|r| r.base_test > r.base_orig).collect();
    if effective.is_empty() {
        return Err(Error::InvalidArgument("no test input raised base FLOPs".into()));
    }
    let transferred = effective.iter().filter(|r| r.target_test > r.target_orig).count();
    let itp = transferred as f64 / effective.len() as f64 * 100.0;

    let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let p_b = mean(records.iter().filter_map(TransferRecord::base_inc_rf).collect());
    let p_t = mean(records.iter().filter_map(TransferRecord::target_inc_rf).collect());
    let excluded = records.iter().filter(|r| r.base_inc_rf().is_none() || r.target_inc_rf().is_none()).count();
    let (p_b, p_t) = match (p_b, p_t) {
        (Some(b), t) if b != 0.0 => (b, t.unwrap_or(0.0)),
        _ => return Err(Error::InvalidArgument("mean base IncRF is zero or undefined".into())),
    };
    Ok(TransferMetrics { itp, etp: p_t / p_b * 100.0, p_b, p_t, base_effective: effective.len(), excluded })
}

fn same_shape(x: &Tensor, f: &Tensor) -> Result<()> {
    if x.shape() != f.shape() {
        return Err(Error::InvalidShape(format!("{:?} vs {:?}", x.shape(), f.shape())));
    }
    Ok(())
}

/// Mean of `(x − f)²` over every pixel of every pair.
pub fn avg_squared_difference(pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("image pairs"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, f) in pairs {
        same_shape(x, f)?;
        total += x.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += x.len();
    }
    Ok(total / count as f64)
}

pub fn mse(x: &Tensor, f: &Tensor) -> Result<f64> {
    same_shape(x, f)?;
    if x.is_empty() {
        return Err(Error::Empty("image"));
    }
    Ok(x.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Tensor, f: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(x, f)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// Single-window SSIM over the whole image with dynamic range 1.
pub fn ssim(x: &Tensor, f: &Tensor) -> Result<f64> {
    same_shape(x, f)?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument("SSIM needs at least two pixels".into()));
    }
    let n = x.len() as f64;
    let (mx, mf) = (x.mean(), f.mean());
    let (mut vx, mut vf, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.data().iter().zip(f.data()) {
        vx += (a - mx).powi(2);
        vf += (b - mf).powi(2);
        cov += (a - mx) * (b - mf);
    }
    let (vx, vf, cov) = (vx / n, vf / n, cov / n);
    Ok(((2.0 * mx * mf + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + mf * mf + SSIM_C1) * (vx + vf + SSIM_C2)))
}

fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn has_variance(v: &[f64]) -> bool {
    v.iter().any(|&a| a != v[0])
}

/// Visits every permutation of `v` (Heap's algorithm).
fn for_each_permutation(v: &mut [f64], f: &mut impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

/// Pearson r with a two-sided permutation p-value.
///
/// For `n ≤ 7` every permutation of `ys` is scored and `p` is the exact
/// fraction with `|r_perm| ≥ |r|`. Otherwise `n_perm` seeded shuffles are
/// drawn and `p = (1 + hits) / (1 + n_perm)`.
pub fn pearson(xs: &[f64], ys: &[f64], n_perm: usize, seed: u64) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("{} xs for {} ys", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("pearson needs at least 3 points".into()));
    }
    if !has_variance(xs) {
        return Err(Error::ZeroVariance("xs"));
    }
    if !has_variance(ys) {
        return Err(Error::ZeroVariance("ys"));
    }
    let r = correlation(xs, ys);
    // Guards against rounding making the identity permutation miss itself.
    let bar = r.abs() - 1e-12;
    let p = if xs.len() <= EXHAUSTIVE_MAX_N {
        let (mut hits, mut total) = (0u64, 0u64);
        let mut v = ys.to_vec();
        for_each_permutation(&mut v, &mut |perm| {
            total += 1;
            hits += u64::from(correlation(xs, perm).abs() >= bar);
        });
        hits as f64 / total as f64
    } else {
        let mut r_ng = rng::stream(seed);
        let mut hits = 0usize;
        let mut v = ys.to_vec();
        for _ in 0..n_perm {
            let order = crate::nn::shuffled(v.len(), &mut r_ng);
            for (slot, &i) in v.iter_mut().zip(&order) {
                *slot = ys[i];
            }
            hits += usize::from(correlation(xs, &v).abs() >= bar);
        }
        (1 + hits) as f64 / (1 + n_perm) as f64
    };
    Ok(Correlation { r, p })
}

/// ROC AUC as `P(score⁺ > score⁻) + ½·P(tie)`, from tie-aware ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("auc labels"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept integral so ties are exact.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        twice_u += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos as u64 * neg as u64) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScores {
    /// `−max(0, max admissible ENG(f) − ENG(x))`.
    pub e_i: f64,
    /// `−max ENG(u)` over universal inputs.
    pub e_u: f64,
    /// L2 radius bounding admissible perturbations.
    pub budget: f64,
}

/// Empirical robustness from generated test inputs, using noiseless energy.
///
/// `pairs` holds `(seed x, test input f)`; only pairs with `‖f − x‖₂ ≤ budget`
/// are admissible. The unperturbed point is always admissible, so `e_i ≤ 0`.
pub fn robustness_scores<M: Adnn + ?Sized>(
    adnn: &M,
    energy: &EnergyModel,
    budget: f64,
    pairs: &[(Tensor, Tensor)],
    universal: &[Tensor],
) -> Result<RobustnessScores> {
    if pairs.is_empty() {
        return Err(Error::Empty("input-based pairs"));
    }
    if universal.is_empty() {
        return Err(Error::Empty("universal inputs"));
    }
    if !(budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be non-negative, got {budget}")));
    }
    let eng = |x: &Tensor| -> Result<f64> { energy.noiseless(&adnn.infer(x)?) };
    let mut best_increase: f64 = 0.0;
    for (x, f) in pairs {
        same_shape(x, f)?;
        let dist = x.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist <= budget {
            best_increase = best_increase.max(eng(f)? - eng(x)?);
        }
    }
    let mut best_universal = f64::NEG_INFINITY;
    for u in universal {
        best_universal = best_universal.max(eng(u)?);
    }
    Ok(RobustnessScores { e_i: 0.0 - best_increase, e_u: 0.0 - best_universal, budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adnn::make_scripted;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn energy_increase_examples() {
        assert_eq!(energy_increase_percent(10.0, 25.0).unwrap(), 150.0);
        assert_eq!(energy_increase_percent(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(energy_increase_percent(4.0, 3.0).unwrap(), -25.0);
        assert!(energy_increase_percent(0.0, 1.0).is_err());
    }

    #[test]
    fn inc_rf_examples() {
        assert_eq!(inc_rf(500.0, 500.0, 1000.0).unwrap(), 0.0);
        assert_eq!(inc_rf(500.0, 1000.0, 1000.0).unwrap(), 1.0);
        assert_eq!(inc_rf(600.0, 800.0, 1000.0).unwrap(), 0.5);
        assert!(matches!(inc_rf(1000.0, 1000.0, 1000.0), Err(Error::IncRfUndefined)));
    }

    #[test]
    fn no_target_increase_gives_zero_itp() {
        let r = TransferRecord { base_orig: 0, base_test: 10, base_max: 10, target_orig: 0, target_test: 0, target_max: 10 };
        let m = transfer_metrics(&[r.clone(), r]).unwrap();
        assert_eq!(m.itp, 0.0);
        assert_eq!(m.etp, 0.0);
        assert!(transfer_metrics(&[]).is_err());
    }

    #[test]
    fn squared_difference_examples() {
        assert_eq!(avg_squared_difference(&[(t(&[0.2, 0.4]), t(&[0.2, 0.4]))]).unwrap(), 0.0);
        let v = avg_squared_difference(&[(t(&[0.0, 0.0]), t(&[0.1, 0.3]))]).unwrap();
        assert!((v - 0.05).abs() < 1e-15);
        assert_eq!(avg_squared_difference(&[(t(&[0.0; 4]), t(&[1.0; 4]))]).unwrap(), 1.0);
        assert!(avg_squared_difference(&[]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = t(&[0.3, 0.6]);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let v = psnr(&t(&[0.0; 4]), &t(&[0.5; 4]), 1.0).unwrap();
        assert!((v - 6.020599913279624).abs() < 1e-12);
        let v = psnr(&t(&[0.0; 4]), &t(&[0.1; 4]), 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity() {
        let x = t(&[0.1, 0.5, 0.9, 0.3]);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!(ssim(&t(&[0.1]), &t(&[0.1])).is_err());
    }

    #[test]
    fn pearson_signs() {
        let xs = [1.0, 2.0, 3.0, 5.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        assert!((pearson(&xs, &ys, 100, 0).unwrap().r - 1.0).abs() < 1e-12);
        let ys: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &ys, 100, 0).unwrap().r + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&xs, &[1.0; 5], 10, 0), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn sampled_pearson_is_deterministic_and_smoothed() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let a = pearson(&xs, &ys, 200, 3).unwrap();
        assert_eq!(a, pearson(&xs, &ys, 200, 3).unwrap());
        assert!(a.p >= 1.0 / 201.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass(_))));
    }

    fn scripted() -> crate::adnn::ScriptedAdnn {
        let taus: Vec<f64> = (0..8).map(|i| 0.1 + 0.1 * i as f64).collect();
        make_scripted(8, &taus, 2048, 1024).unwrap()
    }

    #[test]
    fn robustness_examples() {
        let s = scripted();
        let e = EnergyModel::default();
        let x = Tensor::filled(&[64], 0.05);
        let brighter = Tensor::filled(&[64], 0.35);
        let ones = Tensor::filled(&[64], 1.0);

        let r = robustness_scores(&s, &e, 10.0, &[(x.clone(), x.clone())], std::slice::from_ref(&ones)).unwrap();
        assert_eq!(r.e_i, 0.0);
        assert_eq!(r.e_u, -(1.0 + 8.0 * 0.5));

        let r = robustness_scores(&s, &e, 0.0, &[(x.clone(), brighter.clone())], std::slice::from_ref(&ones)).unwrap();
        assert_eq!(r.e_i, 0.0);

        let r = robustness_scores(&s, &e, 10.0, &[(x, brighter)], &[ones]).unwrap();
        assert_eq!(r.e_i, -1.5);
        assert!(r.e_u <= r.e_i);
    }
}
