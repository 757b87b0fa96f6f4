use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const N_MODALITIES: usize = 4;
/// Sample rate of every window after preprocessing.
pub const TARGET_RATE_HZ: f64 = 100.0;
pub const WINDOW_SECONDS: usize = 30;
pub const CHUNK_SAMPLES: usize = 100;
pub const TOKENS_PER_MODALITY: usize = WINDOW_SECONDS;
pub const WINDOW_SAMPLES: usize = WINDOW_SECONDS * CHUNK_SAMPLES;
pub const MAX_TOKENS: usize = N_MODALITIES * TOKENS_PER_MODALITY;

/// Sensor stream, in the fixed fusion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Eeg,
    Emg,
    Eog,
    Ecg,
}

impl Modality {
    pub const ALL: [Modality; N_MODALITIES] = [Modality::Eeg, Modality::Emg, Modality::Eog, Modality::Ecg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Modality::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("modality index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "EEG",
            Modality::Emg => "EMG",
            Modality::Eog => "EOG",
            Modality::Ecg => "ECG",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SleepStage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [SleepStage::Wake, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        SleepStage::ALL.get(i).copied().ok_or_else(|| Error::OutOfRange(format!("sleep stage {i}")))
    }

    pub fn code(self) -> &'static str {
        match self {
            SleepStage::Wake => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }
}

impl FromStr for SleepStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SleepStage::ALL
            .into_iter()
            .find(|st| st.code() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown sleep stage '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Female => "F",
            Gender::Male => "M",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F" => Ok(Gender::Female),
            "M" => Ok(Gender::Male),
            _ => Err(Error::InvalidArgument(format!("unknown gender '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Demographics {
    pub age_years: f64,
    pub gender: Gender,
}

/// Annotation of one 30 s window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLabel {
    pub stage: SleepStage,
    pub arousal: bool,
}

/// One raw channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

/// All recordings of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// One channel per modality, in [`Modality::ALL`] order.
    pub channels: Vec<Channel>,
    /// Per-window labels, or `None` for unlabeled patients.
    pub labels: Option<Vec<WindowLabel>>,
    pub demographics: Demographics,
}

impl PatientRecord {
    pub fn sample_rate(&self) -> f64 {
        self.channels[0].sample_rate
    }

    pub fn n_samples(&self) -> usize {
        self.channels[0].samples.len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != N_MODALITIES {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {N_MODALITIES} channels, got {}",
                self.patient_id,
                self.channels.len()
            )));
        }
        let (n, fs) = (self.n_samples(), self.sample_rate());
        if !(fs > 0.0) {
            return Err(Error::InvalidArgument(format!("{}: sample rate {fs}", self.patient_id)));
        }
        for (m, c) in Modality::ALL.iter().zip(&self.channels) {
            if c.samples.len() != n || c.sample_rate != fs {
                return Err(Error::InvalidArgument(format!(
                    "{}: {m} stream not aligned with EEG",
                    self.patient_id
                )));
            }
        }
        if let Some(labels) = &self.labels {
            let per_window = fs * WINDOW_SECONDS as f64;
            let covered = (n as f64 / per_window).floor() as usize;
            if labels.len() > covered {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} labels but only {covered} whole windows",
                    self.patient_id,
                    labels.len()
                )));
            }
        }
        Ok(())
    }
}

/// One 30 s multimodal sample at 100 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalWindow {
    pub patient_id: String,
    pub index: usize,
    /// `N_MODALITIES * WINDOW_SAMPLES` values, modality-major.
    pub data: Vec<f64>,
    pub label: Option<WindowLabel>,
    pub demographics: Demographics,
}

impl SignalWindow {
    pub fn channel(&self, m: Modality) -> &[f64] {
        &self.data[m.index() * WINDOW_SAMPLES..(m.index() + 1) * WINDOW_SAMPLES]
    }

    pub fn channel_mut(&mut self, m: Modality) -> &mut [f64] {
        &mut self.data[m.index() * WINDOW_SAMPLES..(m.index() + 1) * WINDOW_SAMPLES]
    }

    /// One-second chunk `position` of modality `m`.
    pub fn chunk(&self, m: Modality, position: usize) -> &[f64] {
        &self.channel(m)[position * CHUNK_SAMPLES..(position + 1) * CHUNK_SAMPLES]
    }

    /// Z-scores every modality channel in place.
    pub fn zscore(&mut self) {
        for m in Modality::ALL {
            let ch = self.channel_mut(m);
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt().max(1e-8);
            ch.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == N_MODALITIES * WINDOW_SAMPLES && self.data.iter().all(|v| v.is_finite())
    }
}
