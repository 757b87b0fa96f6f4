//! Dataset format, preprocessing, windowing, patient splits and synthetic data.

pub mod filter;
pub mod format;
pub mod record;
pub mod split;
pub mod synth;
mod window;

pub use filter::{preprocess, PreprocessConfig};
pub use record::{
    Channel, Demographics, Gender, Modality, PatientRecord, SignalWindow, SleepStage, WindowLabel, CHUNK_SAMPLES,
    MAX_TOKENS, N_MODALITIES, TOKENS_PER_MODALITY, WINDOW_SAMPLES,
};
pub use split::{make_splits, Role, SplitConfig, SplitManifest};
pub use synth::{generate_synthetic, SynthConfig};
pub use window::{count_windows, window, windows_of};
