//! Reference implementations used as independent oracles. None of these
//! call into the crate's linear algebra.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Row-major square matrix as nested vectors.
pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `C × B` standard normal matrix, rows are channels.
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Well-conditioned correlated batch: `A·Z + shift` with `A = I + 0.3·G/√C`.
pub fn correlated_batch(rng: &mut ChaCha8Rng, channels: usize, samples: usize, scale: f64) -> Mat {
    let z = gaussian(rng, channels, samples);
    let g = gaussian(rng, channels, channels);
    let shift: Vec<f64> = (0..channels).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mix = |i: usize, k: usize| (if i == k { 1.0 } else { 0.0 }) + 0.3 * g[i][k] / (channels as f64).sqrt();
    (0..channels)
        .map(|i| {
            (0..samples)
                .map(|j| scale * (0..channels).map(|k| mix(i, k) * z[k][j]).sum::<f64>() + shift[i])
                .collect()
        })
        .collect()
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Two-pass mean and covariance with divisor `B`.
pub fn two_pass_covariance(x: &Mat, epsilon: f64) -> (Vec<f64>, Mat) {
    let b = x[0].len() as f64;
    let mean: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / b).collect();
    let c = x.len();
    let mut cov = vec![vec![0.0; c]; c];
    for i in 0..c {
        for k in 0..c {
            let s: f64 = x[i]
                .iter()
                .zip(&x[k])
                .map(|(a, bb)| (a - mean[i]) * (bb - mean[k]))
                .sum();
            cov[i][k] = s / b + if i == k { epsilon } else { 0.0 };
        }
    }
    (mean, cov)
}

/// Cyclic Jacobi eigenvalue algorithm for symmetric matrices. Returns
/// eigenvalues and eigenvectors (as columns of the second result).
pub fn jacobi_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Mat = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// `Σ^{-1/2}` by the Jacobi oracle.
pub fn inverse_sqrt(sigma: &Mat) -> Mat {
    let (vals, vecs) = jacobi_eigen(sigma);
    let n = sigma.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| vecs[i][k] * vecs[j][k] / vals[k].sqrt()).sum())
                .collect()
        })
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..p).map(|j| (0..m).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

/// Reference ZCA: `Σ^{-1/2}(X − u·1ᵀ)` via the Jacobi oracle.
pub fn reference_zca(x: &Mat, epsilon: f64) -> Mat {
    let (mean, cov) = two_pass_covariance(x, epsilon);
    let w = inverse_sqrt(&cov);
    let centered: Mat = x
        .iter()
        .zip(&mean)
        .map(|(r, m)| r.iter().map(|v| v - m).collect())
        .collect();
    matmul(&w, &centered)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// GRBS plan evaluated straight from the piecewise definitions, indexed by
/// original class id.
#[derive(Debug, Clone)]
pub struct OraclePlan {
    pub scale: f64,
    pub r_min: f64,
    pub group_of: Vec<usize>,
    pub ratio: Vec<f64>,
    pub prob: Vec<f64>,
    pub boosted: Vec<bool>,
}

pub fn grbs_oracle(counts: &[usize], groups: usize, r0: f64, alpha: f64, batch: usize) -> OraclePlan {
    let n = counts.len();
    // Rank by count descending; equal counts keep ascending id.
    let mut order: Vec<usize> = (0..n).collect();
    for i in 1..n {
        let mut j = i;
        while j > 0 && counts[order[j - 1]] < counts[order[j]] {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let f = n / groups;
    let mut group_of = vec![0; n];
    for (rank, &class) in order.iter().enumerate() {
        group_of[class] = if rank >= groups * f { groups - 1 } else { rank % groups };
    }
    let q_n = counts[order[n - 1]] as f64;
    let scale = (q_n / alpha) / (batch as f64 / f as f64);
    let r_min = if scale < 1.0 {
        r0
    } else if scale < 10.0 {
        (scale * r0).min(1.0 / f as f64)
    } else {
        1.0 / f as f64
    };

    let mut ratio = vec![0.0; n];
    let mut prob = vec![0.0; n];
    let mut boosted = vec![false; n];
    for g in 0..groups {
        let members: Vec<usize> = (0..n).filter(|&c| group_of[c] == g).collect();
        let total: f64 = members.iter().map(|&c| counts[c] as f64).sum();
        for &c in &members {
            ratio[c] = counts[c] as f64 / total;
            boosted[c] = ratio[c] <= r_min;
        }
        let fg = members.len() as f64;
        if r_min >= 1.0 / fg - 1e-12 {
            for &c in &members {
                prob[c] = 1.0 / fg;
            }
            continue;
        }
        let f_prime = members.iter().filter(|&&c| boosted[c]).count() as f64;
        let rest: f64 = members.iter().filter(|&&c| !boosted[c]).map(|&c| ratio[c]).sum();
        for &c in &members {
            prob[c] = if boosted[c] {
                r_min
            } else {
                (1.0 - f_prime * r_min) * ratio[c] / rest
            };
        }
    }
    OraclePlan {
        scale,
        r_min,
        group_of,
        ratio,
        prob,
        boosted,
    }
}

/// Per-class probability, group index and boosted flag from a plan, indexed
/// by original class id.
pub fn flatten_plan(plan: &whitenet::sampler::GroupPlan, n: usize) -> (Vec<f64>, Vec<usize>, Vec<bool>) {
    let mut prob = vec![f64::NAN; n];
    let mut group_of = vec![usize::MAX; n];
    let mut boosted = vec![false; n];
    for (gi, g) in plan.groups.iter().enumerate() {
        for (k, &c) in g.classes.iter().enumerate() {
            prob[c] = g.probs[k];
            group_of[c] = gi;
        }
        for &c in &g.boosted_classes {
            boosted[c] = true;
        }
    }
    (prob, group_of, boosted)
}

/// Worst relative error between the model's analytic parameter gradient of
/// the batch cross-entropy and central differences, on a small random
/// whitened tanh network.
pub fn composite_gradient_error(seed: u64, whitening: bool) -> f64 {
    use nalgebra::DMatrix;
    use whitenet::nn::{cross_entropy, Model, ModelConfig, WhiteningSettings};

    let mut r = rng(seed);
    let (d, b, classes) = (4, 16, 3);
    let config = ModelConfig {
        hidden: vec![6],
        feature_dim: 4,
        activation: whitenet::nn::Activation::Tanh,
        whitening: WhiteningSettings {
            enabled: whitening,
            ..Default::default()
        },
    };
    let model = Model::new(d, classes, &config, seed).unwrap();
    let x = DMatrix::from_fn(d, b, |_, _| r.sample::<f64, _>(StandardNormal));
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..classes)).collect();

    let flat: Vec<f64> = model.params().iter().flat_map(|p| p.iter().copied()).collect();
    let load = |theta: &[f64]| {
        let mut m = model.clone();
        let mut offset = 0;
        for p in m.params_mut() {
            let n = p.len();
            p.copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        m
    };
    let loss = |theta: &[f64]| {
        let mut m = load(theta);
        let trace = m.forward_train(&x).unwrap();
        cross_entropy(&trace.logits, &labels).0
    };

    let mut m = model.clone();
    let trace = m.forward_train(&x).unwrap();
    let (_, grad_logits) = cross_entropy(&trace.logits, &labels);
    let (grads, _) = m.backward(&trace, &grad_logits).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let numeric = central_diff(loss, &flat, 1e-4);
    max_rel_error(&analytic, &numeric, 1e-2)
}

/// The synthetic long-tailed benchmark: 10 Gaussian classes in 32
/// dimensions, 5000 head samples, 20 epochs, tanh backbone, GRBS with one
/// group and BET every 10 random steps.
pub fn benchmark_config(
    seed: u64,
    gamma: f64,
    variant: whitenet::experiment::Variant,
) -> whitenet::config::ExperimentConfig {
    use whitenet::config::{ExperimentConfig, SyntheticConfig};
    let mut cfg = ExperimentConfig::synthetic(SyntheticConfig {
        num_classes: 10,
        n_max: 5000,
        gamma,
        feature_dim: 32,
        class_distance: 3.0,
        test_per_class: 500,
        seed: None,
    });
    cfg.seed = seed;
    cfg.train.epochs = 20;
    cfg.grbs.groups = 1;
    cfg.grbs.r0 = 0.1;
    cfg.grbs.alpha = 2.0;
    cfg.bet.interval = 10;
    variant.apply(&mut cfg);
    cfg
}

/// Worst relative error of `zca_backward` against central differences of
/// `⟨G, φ(X)⟩` for a random direction `G`, with batch statistics refitted at
/// every probe point.
pub fn zca_gradient_error(channels: usize, samples: usize, seed: u64) -> f64 {
    use whitenet::whitening::{zca_backward, zca_forward, WhiteningConfig, WhiteningState};
    use whitenet::FeatureBatch;

    let fitted = |b: &FeatureBatch| {
        let mut state = WhiteningState::new(channels, &WhiteningConfig::default()).unwrap();
        state.fit(b).unwrap();
        state
    };
    let mut r = rng(seed);
    let x = flatten(&correlated_batch(&mut r, channels, samples, 1.0));
    let direction = flatten(&gaussian(&mut r, channels, samples));
    let loss = |flat: &[f64]| {
        let b = FeatureBatch::from_row_slice(channels, samples, flat).unwrap();
        let y = zca_forward(&b, &fitted(&b)).unwrap().to_row_major();
        y.iter().zip(&direction).map(|(a, d)| a * d).sum::<f64>()
    };
    let numeric = central_diff(loss, &x, 1e-4);
    let batch = FeatureBatch::from_row_slice(channels, samples, &x).unwrap();
    let g = FeatureBatch::from_row_slice(channels, samples, &direction).unwrap();
    let analytic = zca_backward(&g, &batch, &fitted(&batch)).unwrap();
    assert_eq!(analytic.degenerate_pairs, 0);
    max_rel_error(&analytic.grad_input.to_row_major(), &numeric, 1e-2)
}
