//! Windowed-sinc bandpass design, FFT convolution and decimation.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::record::{Channel, Modality, PatientRecord, TARGET_RATE_HZ};
use crate::error::{Error, Result};

/// Pass band of one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub low_hz: f64,
    pub high_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    /// Indexed by [`Modality::index`].
    pub bands: [Band; 4],
    /// Width of the transition bands; sets the filter length.
    pub transition_hz: f64,
    pub target_rate_hz: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let neural = Band { low_hz: 0.1, high_hz: 30.0 };
        let wide = Band { low_hz: 0.1, high_hz: 70.0 };
        PreprocessConfig {
            // EEG, EMG, EOG, ECG
            bands: [neural, wide, neural, wide],
            transition_hz: 0.1,
            target_rate_hz: TARGET_RATE_HZ,
        }
    }
}

/// Hamming-window main-lobe constant: transition width ~ 3.3 * fs / taps.
const HAMMING_WIDTH: f64 = 3.3;

/// Odd number of taps giving a Hamming transition band of `transition_hz`.
pub fn taps_for_transition(fs: f64, transition_hz: f64) -> usize {
    let n = (HAMMING_WIDTH * fs / transition_hz).ceil() as usize;
    n | 1
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Linear-phase bandpass whose pass band `[low, high]` sits inside the
/// transition bands; the cutoffs are placed half a transition outside it.
pub fn design_bandpass(band: Band, fs: f64, transition_hz: f64) -> Result<Vec<f64>> {
    let nyq = fs / 2.0;
    if !(band.low_hz >= 0.0 && band.low_hz < band.high_hz && band.high_hz < nyq) {
        return Err(Error::InvalidArgument(format!(
            "band {:?} invalid for sample rate {fs}",
            band
        )));
    }
    let taps = taps_for_transition(fs, transition_hz);
    let m = (taps - 1) as f64 / 2.0;
    let lo = ((band.low_hz - transition_hz / 2.0).max(0.0)) / fs;
    let hi = ((band.high_hz + transition_hz / 2.0).min(nyq)) / fs;
    let h: Vec<f64> = (0..taps)
        .map(|n| {
            let t = n as f64 - m;
            let ideal = 2.0 * hi * sinc(2.0 * hi * t) - 2.0 * lo * sinc(2.0 * lo * t);
            let w = 0.54 - 0.46 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos();
            ideal * w
        })
        .collect();
    // unit gain at the geometric band centre
    let centre = (band.low_hz.max(transition_hz) * band.high_hz).sqrt();
    let g = response_magnitude(&h, centre, fs);
    Ok(h.into_iter().map(|v| v / g).collect())
}

/// |H(f)| of a symmetric FIR, evaluated directly from its taps.
pub fn response_magnitude(h: &[f64], freq_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * PI * freq_hz / fs;
    let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &c)| {
        (re + c * (w * n as f64).cos(), im - c * (w * n as f64).sin())
    });
    (re * re + im * im).sqrt()
}

/// Zero-phase ("same") convolution with an odd-length kernel via overlap-add FFT.
pub fn filter_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = h.len();
    if n == 0 {
        return Vec::new();
    }
    let delay = (m - 1) / 2;
    let block = 1usize << 15;
    let fft_len = (block + m - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    let mut hf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    hf.resize(fft_len, Complex::new(0.0, 0.0));
    fwd.process(&mut hf);

    // full linear convolution, length n + m - 1
    let mut full = vec![0.0; n + m - 1];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(&x[start..end]) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, hh) in buf.iter_mut().zip(&hf) {
            *b *= hh;
        }
        inv.process(&mut buf);
        let scale = 1.0 / fft_len as f64;
        for (i, b) in buf.iter().take(end - start + m - 1).enumerate() {
            full[start + i] += b.re * scale;
        }
    }
    full[delay..delay + n].to_vec()
}

/// Point-symmetric extension about both end samples, which keeps the
/// filter from ringing on the implicit zero padding at the record edges.
fn extend_odd(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let at = |i: usize| x[i.min(n - 1)];
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| 2.0 * x[0] - at(i)));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[(n - 1).saturating_sub(i)]));
    out
}

/// Bandpass with edge extension; output is aligned with `x`.
pub fn bandpass(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let pad = (h.len() - 1) / 2;
    let y = filter_same(&extend_odd(x, pad), h);
    y[pad..pad + x.len()].to_vec()
}

/// Filters every modality with its band and keeps every `factor`-th sample.
pub fn preprocess(record: &PatientRecord, cfg: &PreprocessConfig) -> Result<PatientRecord> {
    record.validate()?;
    let fs = record.sample_rate();
    let ratio = fs / cfg.target_rate_hz;
    let factor = ratio.round() as usize;
    if factor == 0 || (ratio - factor as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "sample rate {fs} Hz is not an integer multiple of {} Hz",
            cfg.target_rate_hz
        )));
    }
    let mut channels = Vec::with_capacity(record.channels.len());
    for (m, ch) in Modality::ALL.iter().zip(&record.channels) {
        let h = design_bandpass(cfg.bands[m.index()], fs, cfg.transition_hz)?;
        let y = bandpass(&ch.samples, &h);
        channels.push(Channel {
            samples: y.into_iter().step_by(factor).collect(),
            sample_rate: cfg.target_rate_hz,
        });
    }
    Ok(PatientRecord {
        patient_id: record.patient_id.clone(),
        channels,
        labels: record.labels.clone(),
        demographics: record.demographics,
    })
}
