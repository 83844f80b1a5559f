//! Central finite-difference verification of analytic gradients.
//!
//! Coordinates whose ±h perturbation flips a ReLU gate or a pooling choice
//! sit on a kink of the loss; they are counted as skipped and, for sampled
//! parameters, replaced by another coordinate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::network::{InputBatch, Network, NetworkConfig, ParamId, ParamSet};
use super::ops::{self, ConvGeometry, Mode};
use crate::preprocess::DurationStats;
use crate::seed::derive_seed;
use crate::Result;

/// Tolerance for layers that are linear in every input.
pub const LINEAR_LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for batchnorm and softmax cross-entropy.
pub const NONLINEAR_LAYER_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Parameters larger than this are checked on a seeded subsample.
    pub max_coords: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 200,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl LayerCheck {
    fn new(layer: impl Into<String>, tolerance: f64) -> Self {
        Self {
            layer: layer.into(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub layers: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.layers.is_empty() && self.layers.iter().all(LayerCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerCheck> {
        self.layers.iter().filter(|l| !l.passed())
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks backward() of `net` against finite differences of the mean
/// cross-entropy on a fixed batch, with dropout disabled and batchnorm in
/// train mode.
pub fn check_network(
    net: &Network,
    batch: &InputBatch,
    labels: &[usize],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut net = net.clone();
    net.set_keep_prob(1.0)?;
    let base = net.forward_pass(batch, Mode::Train, 0, true)?;
    let cache = base.cache.expect("train pass caches");
    let analytic = net.gradients(&cache, labels)?;
    compare_network(&net, batch, labels, &analytic, opts)
}

/// Compares a supplied gradient set against finite differences.
pub fn compare_network(
    net: &Network,
    batch: &InputBatch,
    labels: &[usize],
    analytic: &ParamSet,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut work = net.clone();
    work.set_keep_prob(1.0)?;
    let base = work
        .forward_pass(batch, Mode::Train, 0, true)?
        .cache
        .expect("train pass caches");
    let classes = work.config().classes;
    let h = opts.step;
    let mut layers = Vec::new();
    for (k, pid) in ParamId::ALL.into_iter().enumerate() {
        let mut check = LayerCheck::new(format!("network/{}", pid.name()), opts.tolerance);
        let len = work.params()[pid].len();
        let mut order: Vec<usize> = (0..len).collect();
        let sampled = len > opts.max_coords;
        if sampled {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[k as u64])));
        }
        for i in order {
            if sampled && check.checked >= opts.max_coords {
                break;
            }
            let original = work.params()[pid].data()[i];
            let mut probe = |delta: f64| -> Result<Option<f64>> {
                work.params_mut()[pid].data_mut()[i] = original + delta;
                let out = work.forward_pass(batch, Mode::Train, 0, true)?;
                let cache = out.cache.expect("train pass caches");
                Ok(cache
                    .same_activation_pattern(&base)
                    .then(|| ops::cross_entropy(cache.probs(), classes, labels)))
            };
            let plus = probe(h)?;
            let minus = probe(-h)?;
            work.params_mut()[pid].data_mut()[i] = original;
            match (plus, minus) {
                (Some(lp), Some(lm)) => check.record(analytic[pid].data()[i], (lp - lm) / (2.0 * h)),
                _ => check.skipped += 1,
            }
        }
        layers.push(check);
    }
    Ok(GradcheckReport { layers })
}

/// A seeded batch of standard-normal inputs with alternating labels.
pub fn random_batch(config: &NetworkConfig, n: usize, seed: u64) -> Result<(InputBatch, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = config.input_rows * config.input_cols;
    let values = (0..n * plane).map(|_| rng.sample(StandardNormal)).collect();
    let durations = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let batch = InputBatch::from_raw(config.input_rows, config.input_cols, values, durations)?;
    Ok((batch, (0..n).map(|i| i % 2).collect()))
}

/// Full-network check on a fresh network plus every isolated layer check.
pub fn check_all(config: &NetworkConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let stats = DurationStats {
        mean: 30.0,
        std: 10.0,
        computed_over: 2,
    };
    let net = Network::new(config.clone(), opts.seed, stats)?;
    let (batch, labels) = random_batch(config, 4, derive_seed(opts.seed, &[100]))?;
    let mut report = check_network(&net, &batch, &labels, opts)?;
    report.layers.extend(check_layers(opts)?);
    Ok(report)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Compensated dot product; keeps summation roundoff out of the differences.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let term = x * y;
        let t = sum + term;
        comp += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Finite-difference check of `loss` over every coordinate of every
/// variable. `loss` returns `None` when the point is on a kink.
fn fd_check(
    layer: &str,
    names: &[&str],
    tolerance: f64,
    h: f64,
    vars: &[Vec<f64>],
    analytic: &[Vec<f64>],
    loss: impl Fn(&[Vec<f64>]) -> Option<f64>,
) -> Vec<LayerCheck> {
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mut check = LayerCheck::new(format!("isolated/{layer}.{name}"), tolerance);
        for i in 0..vars[k].len() {
            let mut p = vars.to_vec();
            p[k][i] += h;
            let mut m = vars.to_vec();
            m[k][i] -= h;
            match (loss(&p), loss(&m)) {
                (Some(lp), Some(lm)) => check.record(analytic[k][i], (lp - lm) / (2.0 * h)),
                _ => check.skipped += 1,
            }
        }
        out.push(check);
    }
    out
}

/// Each layer type in isolation under the loss `Σ r ⊙ y` for a fixed random `r`.
pub fn check_layers(opts: &GradcheckOptions) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[200]));
    let h = opts.step;
    let mut out = Vec::new();

    // dense, linear activation
    {
        let (n, d, m) = (3, 5, 4);
        let vars = vec![normals(&mut rng, n * d), normals(&mut rng, d * m), normals(&mut rng, m)];
        let r = normals(&mut rng, n * m);
        let f = |v: &[Vec<f64>]| {
            let mut y = vec![0.0; n * m];
            ops::dense_forward_raw(&v[0], n, d, &v[1], m, Some(&v[2]), &mut y);
            Some(dot(&y, &r))
        };
        let (mut dx, mut dw, mut db) = (vec![0.0; n * d], vec![0.0; d * m], vec![0.0; m]);
        ops::dense_backward_raw(&vars[0], n, d, &vars[1], m, &r, &mut dw, Some(&mut db), Some(&mut dx));
        out.extend(fd_check(
            "dense",
            &["input", "weights", "bias"],
            LINEAR_LAYER_TOLERANCE,
            h,
            &vars,
            &[dx, dw, db],
            f,
        ));
    }

    // conv2d
    {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            height: 6,
            width: 7,
            filters: 3,
        };
        let vars = vec![
            normals(&mut rng, g.batch * g.in_channels * g.height * g.width),
            normals(&mut rng, g.filters * g.in_channels * 9),
            normals(&mut rng, g.filters),
        ];
        let r = normals(&mut rng, g.output_len());
        let f = |v: &[Vec<f64>]| {
            let mut y = vec![0.0; g.output_len()];
            ops::conv2d_forward_raw(g, &v[0], &v[1], Some(&v[2]), &mut y);
            Some(dot(&y, &r))
        };
        let (mut dx, mut dk, mut db) = (
            vec![0.0; vars[0].len()],
            vec![0.0; vars[1].len()],
            vec![0.0; g.filters],
        );
        ops::conv2d_backward_raw(g, &vars[0], &vars[1], &r, &mut dk, Some(&mut db), Some(&mut dx));
        out.extend(fd_check(
            "conv2d",
            &["input", "kernels", "bias"],
            LINEAR_LAYER_TOLERANCE,
            h,
            &vars,
            &[dx, dk, db],
            f,
        ));
    }

    // maxpool 2×2 on odd and even sizes
    {
        let (planes, ph, pw) = (6, 6, 5);
        let vars = vec![normals(&mut rng, planes * ph * pw)];
        let outlen = planes * (ph / 2) * (pw / 2);
        let r = normals(&mut rng, outlen);
        let run = |x: &[f64]| {
            let mut y = vec![0.0; outlen];
            let mut arg = vec![0u32; outlen];
            ops::maxpool_raw(x, planes, ph, pw, &mut y, &mut arg);
            (y, arg)
        };
        let (_, base_arg) = run(&vars[0]);
        let f = |v: &[Vec<f64>]| {
            let (y, arg) = run(&v[0]);
            (arg == base_arg).then(|| dot(&y, &r))
        };
        let mut dx = vec![0.0; vars[0].len()];
        ops::maxpool_backward_raw(&r, &base_arg, &mut dx);
        out.extend(fd_check("maxpool", &["input"], LINEAR_LAYER_TOLERANCE, h, &vars, &[dx], f));
    }

    // ReLU with inverted dropout under a fixed mask
    {
        let keep = 0.6;
        let seed = derive_seed(opts.seed, &[201]);
        let vars = vec![normals(&mut rng, 40)];
        let r = normals(&mut rng, 40);
        let mut base = vars[0].clone();
        let base_mask = ops::relu_dropout_raw(&mut base, keep, seed);
        let f = |v: &[Vec<f64>]| {
            let mut y = v[0].clone();
            let mask = ops::relu_dropout_raw(&mut y, keep, seed);
            (mask == base_mask).then(|| dot(&y, &r))
        };
        let mut dx = r.clone();
        ops::relu_dropout_backward_raw(&mut dx, &base_mask, keep);
        out.extend(fd_check(
            "relu_dropout",
            &["input"],
            LINEAR_LAYER_TOLERANCE,
            h,
            &vars,
            &[dx],
            f,
        ));
    }

    // batchnorm, train mode, per-channel statistics
    {
        let (n, c, s) = (4, 3, 5);
        let eps = 1e-5;
        let vars = vec![
            normals(&mut rng, n * c * s),
            normals(&mut rng, c).into_iter().map(|g| 1.0 + 0.3 * g).collect(),
            normals(&mut rng, c),
        ];
        let r = normals(&mut rng, n * c * s);
        let f = |v: &[Vec<f64>]| {
            let mut y = v[0].clone();
            ops::batchnorm_train_raw(&mut y, n, c, s, &v[1], &v[2], eps);
            Some(dot(&y, &r))
        };
        let mut y = vars[0].clone();
        let cache = ops::batchnorm_train_raw(&mut y, n, c, s, &vars[1], &vars[2], eps);
        let (mut dx, mut dg, mut db) = (r.clone(), vec![0.0; c], vec![0.0; c]);
        ops::batchnorm_backward_raw(&mut dx, n, c, s, &vars[1], &cache, &mut dg, &mut db);
        out.extend(fd_check(
            "batchnorm",
            &["input", "gamma", "beta"],
            NONLINEAR_LAYER_TOLERANCE,
            h,
            &vars,
            &[dx, dg, db],
            f,
        ));
    }

    // softmax + mean cross-entropy
    {
        let (n, k) = (4, 2);
        let labels = [0, 1, 1, 0];
        let vars = vec![normals(&mut rng, n * k).into_iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
        let f = |v: &[Vec<f64>]| {
            let mut p = vec![0.0; n * k];
            ops::softmax_raw(&v[0], k, &mut p);
            Some(ops::cross_entropy(&p, k, &labels))
        };
        let mut dl = vec![0.0; n * k];
        ops::softmax_raw(&vars[0], k, &mut dl);
        for (row, &y) in dl.chunks_exact_mut(k).zip(&labels) {
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        out.extend(fd_check(
            "softmax_cross_entropy",
            &["logits"],
            NONLINEAR_LAYER_TOLERANCE,
            h,
            &vars,
            &[dl],
            f,
        ));
    }
    Ok(out)
}
