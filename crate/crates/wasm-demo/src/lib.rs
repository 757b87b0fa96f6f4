//! wasm-bindgen exports for the static page in `www/`.

use physio_mae::analysis::attention_rollout;
use physio_mae::dataio::{MAX_TOKENS, N_MODALITIES, TOKENS_PER_MODALITY};
use physio_mae::masking::{sample_batch_masks, MaskConfig};
use physio_mae::numerics::{lr_at, softmax_in_place, DArray, RngState, ScheduleConfig};
use physio_mae::tokenizers::TokenTag;
use wasm_bindgen::prelude::*;

/// Cell states returned by [`mask_plan`].
pub const VISIBLE: u8 = 0;
pub const MASKED: u8 = 1;
pub const DROPPED: u8 = 2;

fn js(e: physio_mae::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One sampled plan as 120 cells in canonical token order
/// (0 visible, 1 masked, 2 masked because its modality was dropped).
#[wasm_bindgen]
pub fn mask_plan(p: f64, modality_drop: bool, seed: u64) -> Result<Vec<u8>, JsError> {
    plan_cells(p, modality_drop, seed).map_err(js)
}

pub fn plan_cells(p: f64, modality_drop: bool, seed: u64) -> physio_mae::Result<Vec<u8>> {
    let cfg = MaskConfig { p, modality_drop };
    let mut rng = RngState::new(seed);
    let plan = sample_batch_masks(&cfg, 1, &mut rng)?.remove(0);
    Ok((0..MAX_TOKENS)
        .map(|t| match plan.dropped {
            Some(m) if t / TOKENS_PER_MODALITY == m.index() => DROPPED,
            _ if plan.is_masked(t) => MASKED,
            _ => VISIBLE,
        })
        .collect())
}

/// Expected fraction of masked tokens: 1/N + p(N-1)/N with drop, else p.
#[wasm_bindgen]
pub fn expected_mask_fraction(p: f64, modality_drop: bool) -> f64 {
    let n = N_MODALITIES as f64;
    if modality_drop {
        1.0 / n + p * (n - 1.0) / n
    } else {
        p
    }
}

/// Learning rate at `points` evenly spaced epochs `total * i / points`.
#[wasm_bindgen]
pub fn lr_curve(base_lr: f64, warmup_epochs: usize, total_epochs: usize, min_lr: f64, points: usize) -> Result<Vec<f64>, JsError> {
    schedule(base_lr, warmup_epochs, total_epochs, min_lr, points).map_err(js)
}

pub fn schedule(base_lr: f64, warmup_epochs: usize, total_epochs: usize, min_lr: f64, points: usize) -> physio_mae::Result<Vec<f64>> {
    let cfg = ScheduleConfig { warmup_epochs, base_lr, total_epochs, min_lr };
    let points = points.max(1);
    (0..points).map(|i| lr_at(total_epochs as f64 * i as f64 / points as f64, &cfg)).collect()
}

/// Rollout of `n_layers` random attention layers over the 120 fused tokens.
/// Attention logits favour tokens of the same modality by `modality_bias` and
/// are scaled by `sharpness`. Returns the `[120, 120]` matrix row-major.
#[wasm_bindgen]
pub fn random_rollout(n_layers: usize, heads: usize, sharpness: f64, modality_bias: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    rollout(n_layers, heads, sharpness, modality_bias, seed).map_err(js)
}

pub fn rollout(n_layers: usize, heads: usize, sharpness: f64, modality_bias: f64, seed: u64) -> physio_mae::Result<Vec<f64>> {
    let n = MAX_TOKENS;
    let heads = heads.max(1);
    let mut rng = RngState::new(seed);
    let layers: Vec<DArray> = (0..n_layers)
        .map(|_| {
            let mut w = DArray::zeros(&[heads, n, n]);
            for (r, row) in w.data_mut().chunks_mut(n).enumerate() {
                let i = r % n;
                for (j, x) in row.iter_mut().enumerate() {
                    let same = i / TOKENS_PER_MODALITY == j / TOKENS_PER_MODALITY;
                    *x = sharpness * rng.normal() + if same { modality_bias } else { 0.0 };
                }
                softmax_in_place(row);
            }
            w
        })
        .collect();
    let tags: Vec<TokenTag> = (0..n).map(|t| TokenTag::from_index(t).expect("canonical index")).collect();
    Ok(attention_rollout(&layers, &tags)?.values.into_data())
}

#[wasm_bindgen]
pub fn n_tokens() -> usize {
    MAX_TOKENS
}

#[wasm_bindgen]
pub fn tokens_per_modality() -> usize {
    TOKENS_PER_MODALITY
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_cell_counts() {
        let cells = plan_cells(0.6, true, 3).unwrap();
        assert_eq!(cells.len(), 120);
        assert_eq!(cells.iter().filter(|&&c| c == DROPPED).count(), 30);
        assert_eq!(cells.iter().filter(|&&c| c != VISIBLE).count(), 84);
        let plain = plan_cells(0.7, false, 3).unwrap();
        assert_eq!(plain.iter().filter(|&&c| c == MASKED).count(), 84);
        assert!(!plain.contains(&DROPPED));
    }

    #[test]
    fn fraction_formula() {
        assert!((expected_mask_fraction(0.6, true) - 0.7).abs() < 1e-12);
        assert_eq!(expected_mask_fraction(0.7, false), 0.7);
    }

    #[test]
    fn curve_shape() {
        let c = schedule(1e-3, 10, 100, 0.0, 100).unwrap();
        assert_eq!(c[0], 0.0);
        assert!((c[10] - 1e-3).abs() < 1e-15);
        assert!(c[99] < 1e-6);
        assert!(c[10..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rollout_rows_are_stochastic() {
        let r = rollout(3, 2, 1.0, 0.5, 1).unwrap();
        for row in r.chunks(120) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let eye = rollout(0, 1, 1.0, 0.0, 1).unwrap();
        assert_eq!(eye[0], 1.0);
        assert_eq!(eye[1], 0.0);
    }
}
