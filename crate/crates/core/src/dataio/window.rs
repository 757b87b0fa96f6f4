use super::record::{PatientRecord, SignalWindow, N_MODALITIES, TARGET_RATE_HZ, WINDOW_SAMPLES};
use crate::error::{Error, Result};

/// Cuts a preprocessed record into contiguous, non-overlapping 30 s windows.
/// The trailing remainder is dropped.
pub fn window(record: &PatientRecord) -> Result<Vec<SignalWindow>> {
    record.validate()?;
    if (record.sample_rate() - TARGET_RATE_HZ).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{}: windows need {TARGET_RATE_HZ} Hz input, got {} Hz",
            record.patient_id,
            record.sample_rate()
        )));
    }
    let n = count_windows(record.n_samples());
    if n == 0 {
        return Err(Error::InsufficientData(format!(
            "{}: {:.1} s is shorter than one window",
            record.patient_id,
            record.duration_seconds()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for w in 0..n {
        let mut data = Vec::with_capacity(N_MODALITIES * WINDOW_SAMPLES);
        for ch in &record.channels {
            data.extend_from_slice(&ch.samples[w * WINDOW_SAMPLES..(w + 1) * WINDOW_SAMPLES]);
        }
        let win = SignalWindow {
            patient_id: record.patient_id.clone(),
            index: w,
            data,
            label: record.labels.as_ref().and_then(|l| l.get(w).copied()),
            demographics: record.demographics,
        };
        if !win.is_valid() {
            return Err(Error::NonFinite(format!("{} window {w}", record.patient_id)));
        }
        out.push(win);
    }
    Ok(out)
}

/// Windows of every record, optionally z-scored per window and modality.
pub fn windows_of(records: &[PatientRecord], zscore: bool) -> Result<Vec<SignalWindow>> {
    let mut out = Vec::new();
    for r in records {
        for mut w in window(r)? {
            if zscore {
                w.zscore();
            }
            out.push(w);
        }
    }
    Ok(out)
}

/// Whole windows in `n_samples` samples at 100 Hz.
pub fn count_windows(n_samples: usize) -> usize {
    n_samples / WINDOW_SAMPLES
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::record::{Channel, Demographics, Gender};

    fn rec(seconds: usize) -> PatientRecord {
        let n = seconds * 100;
        PatientRecord {
            patient_id: "p".into(),
            channels: (0..4)
                .map(|m| Channel { samples: (0..n).map(|i| (i * (m + 1)) as f64).collect(), sample_rate: 100.0 })
                .collect(),
            labels: None,
            demographics: Demographics { age_years: 50.0, gender: Gender::Male },
        }
    }

    #[test]
    fn full_night_window_count() {
        let seconds = (7.7 * 3600.0) as usize;
        assert_eq!(count_windows(seconds * 100), 924);
        assert_eq!(1985 * count_windows(seconds * 100), 1_834_140);
    }

    #[test]
    fn remainder_dropped_and_short_rejected() {
        assert_eq!(window(&rec(59)).unwrap().len(), 1);
        assert!(window(&rec(29)).is_err());
        assert!(window(&rec(0)).is_err());
    }

    #[test]
    fn windows_are_contiguous() {
        let w = window(&rec(90)).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1].data[0], 3000.0);
        assert_eq!(w[2].channel(crate::dataio::record::Modality::Emg)[0], 12000.0);
    }
}
