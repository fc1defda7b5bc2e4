use ael_core::adnn::make_scripted;
use ael_core::energy::{filter_outliers, measure_energy, EnergyModel, MeasurementProtocol};
use ael_core::metrics::{self, TransferRecord, SSIM_C1, SSIM_C2};
use ael_core::rng;
use ael_core::Tensor;
use rand::Rng as _;

fn reference_filter(samples: &[f64], factor: f64) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let med = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let mut out = Vec::new();
    for &s in samples {
        if s <= factor * med {
            out.push(s);
        }
    }
    out
}

#[test]
fn outlier_filter_matches_reference() {
    let mut r = rng::stream(11);
    let p = MeasurementProtocol::default();
    for _ in 0..1000 {
        let n = r.random_range(1..40);
        let v: Vec<f64> =
            (0..n).map(|_| if r.random::<f64>() < 0.2 { r.random_range(0.0..10.0) } else { r.random_range(1.0..2.0) }).collect();
        assert_eq!(filter_outliers(&v, &p).unwrap(), reference_filter(&v, 1.5));
    }
}

#[test]
fn one_spike_is_dropped() {
    let p = MeasurementProtocol::default();
    let kept = filter_outliers(&[10.0, 10.0, 10.0, 16.0], &p).unwrap();
    assert_eq!(kept.iter().sum::<f64>() / kept.len() as f64, 10.0);
}

#[test]
fn measured_energy_follows_steps() {
    let tau: Vec<f64> = (1..=8).map(|i| i as f64 / 10.0 + 0.05).collect();
    let s = make_scripted(8, &tau, 2176, 1024).unwrap();
    let e = EnergyModel::default();
    let bound = 3.0 * e.noise_sigma / 20f64.sqrt();
    let mut last = f64::NEG_INFINITY;
    for k in 0..=8 {
        let x = Tensor::filled(&[64], k as f64 / 10.0 + 0.1);
        let m = measure_energy(&s, &e, &x, &MeasurementProtocol::default()).unwrap();
        assert!((m.mean - e.step_value(k)).abs() <= bound, "k={k}: {}", m.mean);
        assert!(m.mean > last);
        last = m.mean;
    }
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 2;
                num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    num as f64 / den as f64
}

#[test]
fn auc_matches_all_pairs() {
    let mut r = rng::stream(12);
    let mut checked = 0;
    while checked < 500 {
        let n = r.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 2.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        assert_eq!(metrics::auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        checked += 1;
    }
}

fn pearson_r(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn permutation_p_matches_all_orderings() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys = [1.0, 3.0, 2.0, 4.0];
    let c = metrics::pearson(&xs, &ys, 0, 0).unwrap();
    assert!((c.r - 0.8).abs() < 1e-12);

    let r0 = pearson_r(&xs, &ys).abs();
    let mut hits = 0;
    let mut total = 0;
    for a in 0..4 {
        for b in 0..4 {
            for c2 in 0..4 {
                for d in 0..4 {
                    let idx = [a, b, c2, d];
                    let mut seen = [false; 4];
                    idx.iter().for_each(|&i| seen[i] = true);
                    if !seen.iter().all(|&s| s) {
                        continue;
                    }
                    total += 1;
                    let perm: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
                    if pearson_r(&xs, &perm).abs() >= r0 - 1e-12 {
                        hits += 1;
                    }
                }
            }
        }
    }
    assert_eq!(total, 24);
    assert_eq!(c.p, hits as f64 / 24.0);
}

#[test]
fn pearson_on_exact_lines() {
    let xs: Vec<f64> = (0..20).map(f64::from).collect();
    let up: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
    let down: Vec<f64> = xs.iter().map(|x| -0.5 * x + 2.0).collect();
    assert!((metrics::pearson(&xs, &up, 200, 1).unwrap().r - 1.0).abs() < 1e-12);
    assert!((metrics::pearson(&xs, &down, 200, 1).unwrap().r + 1.0).abs() < 1e-12);
    assert_eq!(metrics::pearson(&xs, &up, 200, 1).unwrap().p, 1.0 / 201.0);
}

#[test]
fn ssim_of_opposite_constants() {
    let s = metrics::ssim(&Tensor::zeros(&[64]), &Tensor::filled(&[64], 1.0)).unwrap();
    assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
}

fn brute_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|a| (a - my).powi(2)).sum::<f64>() / n;
    let cxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

#[test]
fn ssim_half_contrast() {
    let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 63.0).collect();
    let y: Vec<f64> = x.iter().map(|v| 0.5 + 0.5 * (v - 0.5)).collect();
    let s = metrics::ssim(&Tensor::vector(x.clone()), &Tensor::vector(y.clone())).unwrap();
    assert!((s - brute_ssim(&x, &y)).abs() < 1e-12);
    assert!(s < 1.0);
    assert_eq!(metrics::ssim(&Tensor::vector(x.clone()), &Tensor::vector(x)).unwrap(), 1.0);
}

#[test]
fn psnr_is_capped_for_identical_images() {
    let x = Tensor::filled(&[64], 0.3);
    assert_eq!(metrics::psnr(&x, &x, 1.0).unwrap(), metrics::PSNR_CAP_DB);
}

fn record(base_test: u64, target_test: u64) -> TransferRecord {
    TransferRecord { base_orig: 0, base_test, base_max: 100, target_orig: 0, target_test, target_max: 100 }
}

#[test]
fn worked_transfer_example() {
    let target = [25, 50, 50, 50, 50, 50, 25, 0, 0, 0];
    let records: Vec<TransferRecord> = target.iter().map(|&t| record(50, t)).collect();
    let m = metrics::transfer_metrics(&records).unwrap();
    assert_eq!(m.p_b, 0.5);
    assert_eq!(m.p_t, 0.3);
    assert_eq!(m.itp, 70.0);
    assert_eq!(m.etp, 60.0);
}

#[test]
fn self_transfer_is_complete() {
    let records: Vec<TransferRecord> = [10, 40, 70, 100].iter().map(|&t| record(t, t)).collect();
    let m = metrics::transfer_metrics(&records).unwrap();
    assert_eq!((m.itp, m.etp), (100.0, 100.0));
}

#[test]
fn no_target_gain_gives_zero_itp() {
    let records: Vec<TransferRecord> = (0..5).map(|_| record(60, 0)).collect();
    assert_eq!(metrics::transfer_metrics(&records).unwrap().itp, 0.0);
}
