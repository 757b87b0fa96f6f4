//! Synthetic multimodal recordings driven by a hidden Markov sleep-state proxy.
//!
//! Each window has a latent state `k`. Every modality is a mix of a slow
//! wave and a state-specific fast rhythm with per-state, per-modality
//! amplitudes:
//!
//! ```text
//! x_m(t) = a_m,k * (sqrt(c) s(t) + sqrt(1-c) p_m(t)) + b_m,k * (sqrt(c) f(t) + sqrt(1-c) q_m(t)) + noise
//! ```
//!
//! `s`, `f` are shared across modalities and `p_m`, `q_m` are private, with
//! `c` the coupling. At `c = 0` the modalities only share the latent state.
//! Rare arousal bursts (3 s, ~20 Hz) are added to EEG and EMG, and the ECG
//! fast amplitude grows with age.

use std::f64::consts::PI;

use super::record::{Channel, Demographics, Gender, PatientRecord, SleepStage, WindowLabel, N_MODALITIES, WINDOW_SECONDS};
use crate::error::{Error, Result};
use crate::numerics::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct StateSpectrum {
    pub fast_hz: f64,
    /// Slow-wave amplitude per modality.
    pub slow_amp: [f64; N_MODALITIES],
    /// Fast-rhythm amplitude per modality.
    pub fast_amp: [f64; N_MODALITIES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// The first `n_labeled` patients (by id) carry labels.
    pub n_labeled: usize,
    pub windows_per_patient: usize,
    pub states: Vec<StateSpectrum>,
    pub stay_prob: f64,
    pub coupling: f64,
    pub noise_std: f64,
    pub arousal_rate: f64,
    pub slow_hz: (f64, f64),
    pub sample_rate_hz: f64,
    pub seed: u64,
}

/// Deterministic spectral table for `k` states (at most 5).
pub fn default_states(k: usize) -> Vec<StateSpectrum> {
    (0..k)
        .map(|s| {
            let frac = if k > 1 { s as f64 / (k - 1) as f64 } else { 0.0 };
            let mut slow_amp = [0.0; N_MODALITIES];
            let mut fast_amp = [0.0; N_MODALITIES];
            for m in 0..N_MODALITIES {
                let phase = (s * 3 + m * 5) % 7;
                slow_amp[m] = 0.7 + 0.1 * phase as f64;
                fast_amp[m] = 0.2 + 0.5 * ((s + m) % k) as f64 / k.max(1) as f64;
            }
            StateSpectrum { fast_hz: 2.5 + 10.5 * frac, slow_amp, fast_amp }
        })
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 64,
            n_labeled: 32,
            windows_per_patient: 8,
            states: default_states(5),
            stay_prob: 0.85,
            coupling: 1.0,
            noise_std: 0.1,
            arousal_rate: 0.027,
            slow_hz: (0.15, 0.25),
            sample_rate_hz: 200.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {v} is not in [0, 1]")))
            }
        };
        prob("coupling", self.coupling)?;
        prob("stay_prob", self.stay_prob)?;
        prob("arousal_rate", self.arousal_rate)?;
        if self.states.is_empty() || self.states.len() > SleepStage::ALL.len() {
            return Err(Error::InvalidArgument(format!(
                "latent state count {} must be in 1..=5",
                self.states.len()
            )));
        }
        if self.n_labeled > self.n_patients || self.windows_per_patient == 0 {
            return Err(Error::InvalidArgument("bad patient or window counts".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("noise and sample rate must be positive".into()));
        }
        let nyq = self.sample_rate_hz / 2.0;
        if self.states.iter().any(|s| s.fast_hz * 1.05 >= nyq) || self.slow_hz.1 >= nyq || self.slow_hz.0 > self.slow_hz.1 {
            return Err(Error::InvalidArgument("synthetic rhythm above Nyquist".into()));
        }
        Ok(())
    }
}

pub fn patient_id(i: usize) -> String {
    format!("syn{i:04}")
}

/// Age below which the binary age label is positive.
pub const AGE_THRESHOLD_YEARS: f64 = 55.0;

const AROUSAL_HZ: f64 = 20.0;
const AROUSAL_SECONDS: f64 = 3.0;
const AROUSAL_AMP: f64 = 2.5;

struct Tone {
    hz: f64,
    phase: f64,
}

impl Tone {
    fn draw(rng: &mut RngState, lo: f64, hi: f64) -> Self {
        Tone { hz: rng.uniform_range(lo, hi), phase: rng.uniform_range(0.0, 2.0 * PI) }
    }

    fn at(&self, t: f64) -> f64 {
        (2.0 * PI * self.hz * t + self.phase).sin()
    }
}

/// Generates all patients, sorted by id. Each patient uses its own RNG stream.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    (0..cfg.n_patients).map(|i| generate_patient(cfg, i)).collect()
}

pub fn generate_patient(cfg: &SynthConfig, i: usize) -> Result<PatientRecord> {
    let id = patient_id(i);
    let mut rng = RngState::derive(cfg.seed, &id);
    let fs = cfg.sample_rate_hz;
    let per_window = (WINDOW_SECONDS as f64 * fs).round() as usize;
    let k = cfg.states.len();
    let age = rng.uniform_range(20.0, 90.0);
    let gender = if rng.bernoulli(0.5) { Gender::Male } else { Gender::Female };
    let age_gain = 0.5 + age / 90.0;
    let (wc, wp) = (cfg.coupling.sqrt(), (1.0 - cfg.coupling).sqrt());

    let mut channels = vec![Vec::with_capacity(per_window * cfg.windows_per_patient); N_MODALITIES];
    let mut labels = Vec::with_capacity(cfg.windows_per_patient);
    let mut state = rng.below(k);
    for w in 0..cfg.windows_per_patient {
        if w > 0 && !rng.bernoulli(cfg.stay_prob) && k > 1 {
            let other = rng.below(k - 1);
            state = if other >= state { other + 1 } else { other };
        }
        let spec = &cfg.states[state];
        let fast_range = (spec.fast_hz * 0.95, spec.fast_hz * 1.05);
        let shared_slow = Tone::draw(&mut rng, cfg.slow_hz.0, cfg.slow_hz.1);
        let shared_fast = Tone::draw(&mut rng, fast_range.0, fast_range.1);
        let arousal = rng.bernoulli(cfg.arousal_rate);
        let burst_start = rng.uniform_range(0.0, WINDOW_SECONDS as f64 - AROUSAL_SECONDS);
        let burst_phase = rng.uniform_range(0.0, 2.0 * PI);
        for (m, ch) in channels.iter_mut().enumerate() {
            let private_slow = Tone::draw(&mut rng, cfg.slow_hz.0, cfg.slow_hz.1);
            let private_fast = Tone::draw(&mut rng, fast_range.0, fast_range.1);
            let a = spec.slow_amp[m];
            let b = spec.fast_amp[m] * if m == 3 { age_gain } else { 1.0 };
            for n in 0..per_window {
                let t = n as f64 / fs;
                let mut v = a * (wc * shared_slow.at(t) + wp * private_slow.at(t))
                    + b * (wc * shared_fast.at(t) + wp * private_fast.at(t))
                    + cfg.noise_std * rng.normal();
                if arousal && m <= 1 {
                    let u = (t - burst_start) / AROUSAL_SECONDS;
                    if (0.0..=1.0).contains(&u) {
                        let hann = 0.5 - 0.5 * (2.0 * PI * u).cos();
                        v += AROUSAL_AMP * hann * (2.0 * PI * AROUSAL_HZ * t + burst_phase).sin();
                    }
                }
                ch.push(v);
            }
        }
        labels.push(WindowLabel { stage: SleepStage::from_index(state)?, arousal });
    }
    let record = PatientRecord {
        patient_id: id,
        channels: channels.into_iter().map(|samples| Channel { samples, sample_rate: fs }).collect(),
        labels: (i < cfg.n_labeled).then_some(labels),
        demographics: Demographics { age_years: age, gender },
    };
    record.validate()?;
    Ok(record)
}
