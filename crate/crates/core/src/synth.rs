//! Seeded synthetic events with the qualitative contrast of real data.
//!
//! Aircraft: a long, smooth rise and fall (a sin² envelope) of broadband
//! energy, Gaussian across bands with its center in bands 17–23.
//!
//! Community: shorter; either impulsive (1–3 broadband bursts of 1–3 s over
//! bands 5–35) or narrowband (a flat block of adjacent bands held steady).
//!
//! Each band row is the energetic sum of a per-event background and the
//! signal, plus Gaussian level noise of std `1 + 4·difficulty` dB. The
//! overall row is the energetic sum of the band rows. Difficulty also widens
//! the duration ranges toward each other, narrows the aircraft spectrum,
//! widens the narrowband block, and gives community events a smooth
//! envelope with probability `difficulty / 2`.
//!
//! At difficulty 0 the classes are separated by [`separation_rule`].

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::event::{
    ClassLabel, NoiseClass, NoiseEvent, SpectralFrame, BAND_COUNT, IMPORT_LABELER, MAX_LEVEL_DB,
    MIN_LEVEL_DB,
};
use crate::ingest::Dataset;
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Signal level below which a component is treated as absent.
const SILENT_DB: f64 = -200.0;

/// Kinds of generated event; the variant is a community source that the
/// two base kinds do not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Aircraft,
    Community,
    /// Steady broadband machinery noise with a tonal component: ramped
    /// onset, long plateau, ramped decay.
    CommunityVariant,
}

impl SynthKind {
    pub fn class(self) -> NoiseClass {
        match self {
            SynthKind::Aircraft => NoiseClass::Aircraft,
            _ => NoiseClass::Community,
        }
    }

    fn tag(self) -> (&'static str, u64) {
        match self {
            SynthKind::Aircraft => ("air", 1),
            SynthKind::Community => ("com", 2),
            SynthKind::CommunityVariant => ("var", 3),
        }
    }
}

fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).single().expect("valid date")
}

fn db_sum(levels: impl IntoIterator<Item = f64>) -> f64 {
    let total: f64 = levels.into_iter().map(|l| 10f64.powf(l / 10.0)).sum();
    10.0 * total.max(1e-30).log10()
}

/// sin² envelope sampled at frame centers, in dB relative to its peak.
fn smooth_envelope_db(t: usize, frames: usize) -> f64 {
    let x = std::f64::consts::PI * (t as f64 + 0.5) / frames as f64;
    10.0 * x.sin().powi(2).max(1e-6).log10()
}

/// Signal level of each (frame, band) relative to the event peak, in dB.
struct Shape {
    frames: usize,
    temporal: Vec<f64>,
    spectral: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn shape_for(kind: SynthKind, d: f64, rng: &mut ChaCha8Rng) -> Shape {
    match kind {
        SynthKind::Aircraft => {
            let frames = uniform(rng, 20.0 - 12.0 * d, 90.0 - 30.0 * d).round() as usize;
            let center = uniform(rng, 17.0, 23.0);
            let width = 7.0 - 3.0 * d;
            Shape {
                frames,
                temporal: (0..frames).map(|t| smooth_envelope_db(t, frames)).collect(),
                spectral: (0..BAND_COUNT)
                    .map(|k| -12.0 * ((k as f64 - center) / width).powi(2))
                    .collect(),
            }
        }
        SynthKind::Community => {
            let frames = uniform(rng, 8.0, 40.0 + 40.0 * d).round() as usize;
            let smooth = rng.gen_bool((0.5 * d).clamp(0.0, 1.0));
            if rng.gen_bool(0.5) {
                let mut temporal = vec![SILENT_DB; frames];
                for _ in 0..rng.gen_range(1..=3) {
                    let len = rng.gen_range(1..=3usize).min(frames);
                    let start = rng.gen_range(0..=frames - len);
                    temporal[start..start + len].iter_mut().for_each(|v| *v = 0.0);
                }
                if smooth {
                    temporal = (0..frames).map(|t| smooth_envelope_db(t, frames)).collect();
                }
                Shape {
                    frames,
                    temporal,
                    spectral: (0..BAND_COUNT)
                        .map(|k| if (5..=35).contains(&k) { 0.0 } else { SILENT_DB })
                        .collect(),
                }
            } else {
                let max_width = 6 + (14.0 * d).round() as usize;
                let width = rng.gen_range(1..=max_width);
                let start = rng.gen_range(0..=BAND_COUNT - width);
                let fade = 2.min(frames / 4);
                let temporal = (0..frames)
                    .map(|t| {
                        if smooth {
                            smooth_envelope_db(t, frames)
                        } else if t < fade || t >= frames - fade {
                            -6.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Shape {
                    frames,
                    temporal,
                    spectral: (0..BAND_COUNT)
                        .map(|k| if (start..start + width).contains(&k) { 0.0 } else { SILENT_DB })
                        .collect(),
                }
            }
        }
        SynthKind::CommunityVariant => {
            let frames = uniform(rng, 20.0, 70.0).round() as usize;
            let center = uniform(rng, 12.0, 20.0);
            let width = 6.0 - 2.0 * d;
            let ramp = uniform(rng, 3.0, 6.0);
            let tone = rng.gen_range(0..BAND_COUNT);
            Shape {
                frames,
                temporal: (0..frames)
                    .map(|t| {
                        let edge = (t as f64 + 0.5).min(frames as f64 - t as f64 - 0.5);
                        10.0 * (edge / ramp).clamp(0.01, 1.0).log10()
                    })
                    .collect(),
                spectral: (0..BAND_COUNT)
                    .map(|k| {
                        let bump = -12.0 * ((k as f64 - center) / width).powi(2);
                        if k == tone { bump.max(-4.0) + 6.0 } else { bump }
                    })
                    .collect(),
            }
        }
    }
}

/// One event of `kind`, fully determined by `(seed, kind, index, difficulty)`.
pub fn generate_event(kind: SynthKind, seed: u64, index: usize, difficulty: f64) -> NoiseEvent {
    let (tag, salt) = kind.tag();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[salt, index as u64]));
    let d = difficulty;
    let shape = shape_for(kind, d, &mut rng);
    let peak = match kind {
        SynthKind::Aircraft => uniform(&mut rng, 70.0, 85.0),
        SynthKind::Community => uniform(&mut rng, 66.0, 80.0),
        SynthKind::CommunityVariant => uniform(&mut rng, 68.0, 80.0),
    };
    let base = uniform(&mut rng, 35.0, 45.0);
    let background: Vec<f64> = (0..BAND_COUNT).map(|_| base + uniform(&mut rng, -2.0, 2.0)).collect();
    let noise = Normal::new(0.0, 1.0 + 4.0 * d).expect("positive std");
    let frames: Vec<SpectralFrame> = (0..shape.frames)
        .map(|t| {
            let mut bands = [0.0; BAND_COUNT];
            for (k, slot) in bands.iter_mut().enumerate() {
                let signal = peak + shape.temporal[t] + shape.spectral[k];
                let level = db_sum([background[k], signal]) + noise.sample(&mut rng);
                *slot = level.clamp(MIN_LEVEL_DB, MAX_LEVEL_DB);
            }
            let overall = db_sum(bands.iter().copied()).clamp(MIN_LEVEL_DB, MAX_LEVEL_DB);
            SpectralFrame::new(bands, overall).expect("levels in range")
        })
        .collect();
    let start = epoch() + Duration::seconds((derive_seed(seed, &[salt, index as u64, 7]) % 31_536_000) as i64);
    let label = ClassLabel::manual(kind.class(), IMPORT_LABELER, start);
    NoiseEvent::new(
        format!("{tag}-{seed}-{index:05}"),
        format!("synth-{}", index % 4),
        start,
        frames,
        Some(label),
    )
    .expect("generated events are long enough")
}

fn check_difficulty(d: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidConfig(format!("difficulty must be in [0, 1], got {d}")));
    }
    Ok(())
}

/// `n_per_class` aircraft and community events, alternating by class.
pub fn generate_synthetic_dataset(n_per_class: usize, seed: u64, difficulty: f64) -> Result<Dataset> {
    check_difficulty(difficulty)?;
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    let events = (0..n_per_class)
        .flat_map(|i| {
            [
                generate_event(SynthKind::Aircraft, seed, i, difficulty),
                generate_event(SynthKind::Community, seed, i, difficulty),
            ]
        })
        .collect();
    Dataset::new(events)
}

/// `n` community-variant events, labeled community.
pub fn generate_variant_events(n: usize, seed: u64, difficulty: f64) -> Result<Vec<NoiseEvent>> {
    check_difficulty(difficulty)?;
    Ok((0..n)
        .map(|i| generate_event(SynthKind::CommunityVariant, seed, i, difficulty))
        .collect())
}

/// Bands whose energetic time-average is within 10 dB of the loudest band.
pub fn spectral_breadth(event: &NoiseEvent) -> usize {
    let n = event.frames().len() as f64;
    let means: Vec<f64> = (0..BAND_COUNT)
        .map(|k| {
            let e: f64 = event.frames().iter().map(|f| 10f64.powf(f.band_levels()[k] / 10.0)).sum();
            10.0 * (e / n).log10()
        })
        .collect();
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    means.iter().filter(|&&m| m >= max - 10.0).count()
}

/// Largest frame-to-frame change of the overall level, dB.
pub fn max_overall_step(event: &NoiseEvent) -> f64 {
    event
        .frames()
        .windows(2)
        .map(|w| (w[1].overall_laeq() - w[0].overall_laeq()).abs())
        .fold(0.0, f64::max)
}

/// Fixed rule for difficulty-0 data: aircraft iff the spectrum is broad
/// (at least 8 bands within 10 dB of the loudest), not flat-broadband
/// (fewer than 24 such bands), and the overall level never jumps by 15 dB or
/// more between consecutive seconds.
pub fn separation_rule(event: &NoiseEvent) -> NoiseClass {
    let breadth = spectral_breadth(event);
    if (8..24).contains(&breadth) && max_overall_step(event) < 15.0 {
        NoiseClass::Aircraft
    } else {
        NoiseClass::Community
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = generate_synthetic_dataset(5, 7, 0.3).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.count(NoiseClass::Aircraft), 5);
        assert_eq!(a.count(NoiseClass::Community), 5);
        let b = generate_synthetic_dataset(5, 7, 0.3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(5, 8, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn smaller_sets_are_prefixes() {
        let small = generate_synthetic_dataset(3, 2, 0.5).unwrap();
        let big = generate_synthetic_dataset(6, 2, 0.5).unwrap();
        assert_eq!(small.events(), &big.events()[..6]);
    }

    #[test]
    fn durations_follow_class_ranges() {
        let ds = generate_synthetic_dataset(60, 1, 0.0).unwrap();
        for e in ds.events() {
            let t = e.frames().len();
            match e.class().unwrap() {
                NoiseClass::Aircraft => assert!((20..=90).contains(&t), "{t}"),
                NoiseClass::Community => assert!((8..=40).contains(&t), "{t}"),
            }
        }
    }

    #[test]
    fn overall_is_energetic_band_sum() {
        let e = generate_event(SynthKind::Aircraft, 3, 0, 0.2);
        for f in e.frames() {
            let expected = db_sum(f.band_levels().iter().copied());
            assert!((f.overall_laeq() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn rule_separates_difficulty_zero() {
        let ds = generate_synthetic_dataset(450, 11, 0.0).unwrap();
        let correct = ds
            .events()
            .iter()
            .filter(|e| separation_rule(e) == e.class().unwrap())
            .count();
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "rule accuracy {acc}");
    }

    #[test]
    fn variant_is_community() {
        let v = generate_variant_events(4, 1, 0.6).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|e| e.class() == Some(NoiseClass::Community)));
        assert!(generate_variant_events(1, 1, 1.5).is_err());
    }
}
