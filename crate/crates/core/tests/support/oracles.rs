//! Brute-force reference implementations and randomized equivalence runs.
//!
//! Each oracle is written from the operation's definition without sharing
//! code with the library.

#![allow(dead_code)]

use chrono::{TimeZone, Utc};
use noisenet_core::event::{NoiseEvent, SpectralFrame, BAND_COUNT, CHANNELS};
use noisenet_core::ingest::{detect_events, LevelStream};
use noisenet_core::nn::ops::conv2d_forward;
use noisenet_core::nn::Tensor;
use noisenet_core::preprocess::interpolate_event;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `out[k][i][j] = Σ_c Σ_u Σ_v x[c][i+u][j+v] · w[k][c][u][v]`.
pub fn conv_oracle(x: &[f64], c: usize, h: usize, w: usize, kernels: &[f64], k: usize) -> Vec<f64> {
    let (oh, ow) = (h - 2, w - 2);
    let mut out = vec![0.0; k * oh * ow];
    for f in 0..k {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for u in 0..3 {
                        for v in 0..3 {
                            acc += x[(ch * h + i + u) * w + j + v] * kernels[((f * c + ch) * 3 + u) * 3 + v];
                        }
                    }
                }
                out[(f * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

/// Piecewise-linear curve through `(t, row[t])`, evaluated at `width`
/// points spread evenly over `[0, T-1]`.
pub fn interpolation_oracle(row: &[f64], width: usize) -> Vec<f64> {
    let last = (row.len() - 1) as f64;
    (0..width)
        .map(|j| {
            let x = last * j as f64 / (width - 1) as f64;
            let seg = (0..row.len() - 1)
                .rev()
                .find(|&i| i as f64 <= x)
                .unwrap_or(0);
            let (x0, x1) = (seg as f64, seg as f64 + 1.0);
            row[seg] * (x1 - x) + row[seg + 1] * (x - x0)
        })
        .collect()
}

/// Every window `[s, e]` that the detection rule accepts: `s` is the first
/// sample above 65 dBA within its maximal run of samples at or above
/// 63 dBA, `e` closes that run, and the window spans at least 8 samples.
pub fn detect_oracle(levels: &[f64]) -> Vec<(usize, usize)> {
    let n = levels.len();
    let mut found = Vec::new();
    for s in 0..n {
        let mut run_start = s;
        while run_start > 0 && levels[run_start - 1] >= 63.0 {
            run_start -= 1;
        }
        let first_onset = (run_start..=s).find(|&i| levels[i] > 65.0) == Some(s);
        for e in s..n {
            if !levels[s..=e].iter().all(|&l| l >= 63.0) {
                break;
            }
            let closes = e + 1 == n || levels[e + 1] < 63.0;
            if closes && first_onset && e - s + 1 >= 8 {
                found.push((s, e));
            }
        }
    }
    found
}

/// Worst deviation from [`conv_oracle`] over `instances` random shapes
/// with `C, K ≤ 4` and `H, W ≤ 12`.
pub fn conv_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let h = rng.gen_range(3..=12);
        let w = rng.gen_range(3..=12);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..k * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let input = Tensor::new(vec![c, h, w], x.clone()).unwrap();
        let kernels = Tensor::new(vec![k, c, 3, 3], kern.clone()).unwrap();
        let got = conv2d_forward(&input, &kernels, None).unwrap();
        let want = conv_oracle(&x, c, h, w, &kern, k);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Worst deviation from [`interpolation_oracle`] over `instances` random
/// events with `T ≤ 200` frames and widths `≤ 64`.
pub fn interpolation_max_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let t = rng.gen_range(2..=200);
        let width = rng.gen_range(2..=64);
        let rows: Vec<Vec<f64>> = (0..CHANNELS)
            .map(|_| (0..t).map(|_| rng.gen_range(20.0..100.0)).collect())
            .collect();
        let frames = (0..t)
            .map(|ti| {
                let mut bands = [0.0; BAND_COUNT];
                for (b, slot) in bands.iter_mut().enumerate() {
                    *slot = rows[b][ti];
                }
                SpectralFrame::new(bands, rows[BAND_COUNT][ti]).unwrap()
            })
            .collect();
        let event = NoiseEvent::new(format!("e{i}"), "m", t0, frames, None).unwrap();
        let got = interpolate_event(&event, width).unwrap();
        for (ch, row) in rows.iter().enumerate() {
            for (a, b) in got.row(ch).iter().zip(interpolation_oracle(row, width)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Random 1 Hz level stream of length `≤ 500` that hovers around the
/// detection thresholds so that every branch of the rule is exercised.
pub fn random_levels(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(1..=500);
    let mut levels = Vec::with_capacity(n);
    let mut regime = 0;
    for _ in 0..n {
        if rng.gen_bool(0.1) {
            regime = rng.gen_range(0..4);
        }
        let l = match regime {
            0 => rng.gen_range(45.0..62.0),
            1 => rng.gen_range(62.0..66.0),
            2 => rng.gen_range(63.0..75.0),
            _ => *[63.0, 65.0, 62.999, 65.001].get(rng.gen_range(0..4)).unwrap(),
        };
        levels.push(l);
    }
    levels
}

/// Number of random streams whose detections differ from [`detect_oracle`],
/// and the total number of events seen.
pub fn detection_mismatches(instances: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let mut mismatches = 0;
    let mut events = 0;
    for _ in 0..instances {
        let levels = random_levels(&mut rng);
        let stream = LevelStream::from_levels(t0, &levels).unwrap();
        let got = detect_events(&stream);
        events += got.len();
        if got != detect_oracle(&levels) {
            mismatches += 1;
        }
    }
    (mismatches, events)
}
