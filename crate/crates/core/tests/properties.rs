use proptest::prelude::*;

use physio_mae::analysis::{attention_rollout, rsv_of};
use physio_mae::config::ExperimentConfig;
use physio_mae::contrastive::{clip_loo_loss, clip_pair_loss};
use physio_mae::dataio::{make_splits, Modality, SplitConfig, MAX_TOKENS, TOKENS_PER_MODALITY};
use physio_mae::evalprobe::{aggregate_score, auroc, balanced_accuracy, class_weights, cohen_kappa, macro_f1, pool, Confusion};
use physio_mae::masking::{apply_mask, interleave, sample_batch_masks, MaskConfig};
use physio_mae::numerics::{lr_at, softmax_in_place, DArray, Graph, RngState, ScheduleConfig};
use physio_mae::tokenizers::{fuse, positional_table, TokenTag};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DArray {
    let mut rng = RngState::new(seed);
    DArray::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn canonical_sequence(dim: usize, seed: u64) -> physio_mae::tokenizers::TokenSequence {
    let blocks: Vec<_> = (0..4).map(|m| Some(random_matrix(TOKENS_PER_MODALITY, dim, seed + m))).collect();
    fuse(&blocks, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(row in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut r = row.clone();
        softmax_in_place(&mut r);
        prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn schedule_stays_within_bounds(epoch in 0.0f64..100.0, warmup in 0usize..20, base in 1e-5f64..1e-2) {
        let cfg = ScheduleConfig { warmup_epochs: warmup, base_lr: base, total_epochs: 100, min_lr: 0.0 };
        let lr = lr_at(epoch, &cfg).unwrap();
        prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
    }

    #[test]
    fn mask_plans_partition_the_tokens(p in 0.05f64..0.95, drop in any::<bool>(), seed in any::<u64>()) {
        let cfg = MaskConfig { p, modality_drop: drop };
        let mut rng = RngState::new(seed);
        let plans = sample_batch_masks(&cfg, 4, &mut rng).unwrap();
        let counts: Vec<usize> = plans.iter().map(|pl| (0..MAX_TOKENS).filter(|&t| pl.is_masked(t)).count()).collect();
        prop_assert!(counts.iter().all(|&c| c == counts[0] && c < MAX_TOKENS));
        for pl in &plans {
            prop_assert_eq!(pl.visible_tags().len() + pl.masked_tags().len(), MAX_TOKENS);
            if let Some(m) = pl.dropped {
                prop_assert!((0..TOKENS_PER_MODALITY).all(|i| pl.is_masked(m.index() * TOKENS_PER_MODALITY + i)));
            }
        }
    }

    #[test]
    fn interleave_restores_canonical_layout(p in 0.1f64..0.9, drop in any::<bool>(), seed in any::<u64>()) {
        let dim = 4;
        let seq = canonical_sequence(dim, seed % 1000);
        let mut rng = RngState::new(seed);
        let plan = sample_batch_masks(&MaskConfig { p, modality_drop: drop }, 1, &mut rng).unwrap().remove(0);
        let visible = apply_mask(&seq, &plan).unwrap();
        let full = interleave(&visible, &plan, &[0.0; 4], &positional_table(dim), None).unwrap();
        let canonical: Vec<TokenTag> = (0..MAX_TOKENS).map(|t| TokenTag::from_index(t).unwrap()).collect();
        prop_assert_eq!(&full.tags, &canonical);
        for t in 0..MAX_TOKENS {
            prop_assert_eq!(full.masked[t], plan.is_masked(t));
            if !plan.is_masked(t) {
                prop_assert_eq!(full.tokens.row(t), seq.tokens.row(t));
            }
        }
    }

    #[test]
    fn fuse_inverts_through_tags(seed in 0u64..1000, dropped in prop::option::of(0usize..4)) {
        let dropped = dropped.map(|i| Modality::ALL[i]);
        let blocks: Vec<Option<DArray>> = Modality::ALL
            .iter()
            .map(|&m| (Some(m) != dropped).then(|| random_matrix(TOKENS_PER_MODALITY, 3, seed + m.index() as u64)))
            .collect();
        let seq = fuse(&blocks, dropped).unwrap();
        prop_assert_eq!(seq.len(), blocks.iter().flatten().count() * TOKENS_PER_MODALITY);
        prop_assert_eq!(seq.split(), blocks);
    }

    #[test]
    fn splits_are_disjoint(
        n_unlabeled in 0usize..20,
        n_pre in 1usize..6,
        n_val in 1usize..5,
        n_test in 1usize..8,
        seed in any::<u64>(),
    ) {
        let labeled: Vec<String> = (0..n_pre + n_val + n_test).map(|i| format!("l{i:02}")).collect();
        let unlabeled: Vec<String> = (0..n_unlabeled).map(|i| format!("u{i:02}")).collect();
        let cfg = SplitConfig { n_labeled_pretrain: n_pre, n_train: n_pre, n_validation: n_val, n_test, seed };
        let s = make_splits(&labeled, &unlabeled, &cfg).unwrap();
        prop_assert!(s.check().is_ok());
        prop_assert!(s.test.iter().all(|t| !s.pretrain.contains(t) && !s.validation.contains(t) && !s.train.contains(t)));
        prop_assert!(s.validation.iter().all(|v| !s.pretrain.contains(v)));
        prop_assert_eq!(s.pretrain.len(), n_unlabeled + n_pre);
    }

    #[test]
    fn rollout_rows_sum_to_one(n_layers in 0usize..4, heads in 1usize..3, seed in any::<u64>()) {
        let n = 8;
        let tags: Vec<TokenTag> = (0..n).map(|t| TokenTag::from_index(t).unwrap()).collect();
        let layers: Vec<DArray> = (0..n_layers)
            .map(|l| {
                let mut a = random_matrix(heads * n, n, seed.wrapping_add(l as u64)).reshape(&[heads, n, n]).unwrap();
                for row in a.data_mut().chunks_mut(n) {
                    softmax_in_place(row);
                }
                a
            })
            .collect();
        let r = attention_rollout(&layers, &tags).unwrap();
        prop_assert!(r.max_row_sum_error() <= 1e-6);
        prop_assert!(r.values.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn identity_layers_roll_out_to_identity(k in 0usize..6) {
        let n = 6;
        let tags: Vec<TokenTag> = (0..n).map(|t| TokenTag::from_index(t).unwrap()).collect();
        let mut eye = DArray::zeros(&[1, n, n]);
        for i in 0..n {
            eye.data_mut()[i * n + i] = 1.0;
        }
        let r = attention_rollout(&vec![eye; k], &tags).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(r.values.get2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rsv_is_a_distribution(v in prop::array::uniform4(0.0f64..100.0), normalize in any::<bool>()) {
        let q = rsv_of(v, normalize);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        // permuting sources permutes the output
        let r = rsv_of([v[3], v[0], v[1], v[2]], normalize);
        prop_assert!((r[0] - q[3]).abs() < 1e-12 && (r[1] - q[0]).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_range(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 8..200),
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        prop_assume!((0..4).all(|c| truth.contains(&c)));
        let c = Confusion::from_predictions(&truth, &pred, 4).unwrap();
        let ba = balanced_accuracy(&c).unwrap();
        prop_assert!((0.0..=1.0).contains(&ba));
        prop_assert!(cohen_kappa(&c).unwrap() <= 1.0 + 1e-12);
        let f1 = macro_f1(&c).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn auroc_is_antisymmetric(data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 4..100)) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auroc(&neg, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_zero_at_chance(chance in prop::collection::vec(0.05f64..0.9, 1..6), bump in 0.0f64..0.05) {
        prop_assert!(aggregate_score(&chance, &chance).unwrap().abs() < 1e-12);
        let better: Vec<f64> = chance.iter().map(|c| c + bump).collect();
        prop_assert!(aggregate_score(&better, &chance).unwrap() >= 0.0);
    }

    #[test]
    fn class_weights_balance_the_classes(labels in prop::collection::vec(0usize..3, 3..100)) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let w = class_weights(&labels, 3, false).unwrap();
        let n = labels.len() as f64;
        for c in 0..3 {
            let mass: f64 = labels.iter().filter(|&&l| l == c).map(|&l| w[l]).sum();
            prop_assert!((mass - n / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_ignores_token_order(seed in any::<u64>(), rot in 1usize..10) {
        let x = random_matrix(10, 6, seed);
        let rows: Vec<Vec<f64>> = (0..10).map(|i| x.row((i + rot) % 10).to_vec()).collect();
        let y = DArray::from_rows(&rows).unwrap();
        let (a, b) = (pool(&x).unwrap(), pool(&y).unwrap());
        prop_assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn clip_losses_ignore_common_rotation(seed in any::<u64>(), angle in 0.0f64..6.283) {
        let reps: Vec<DArray> = (0..3).map(|k| random_matrix(4, 3, seed.wrapping_add(k))).collect();
        let (c, s) = (angle.cos(), angle.sin());
        // rotation in the first two coordinates followed by a swap with the third
        let rotate = |a: &DArray| {
            let rows: Vec<Vec<f64>> = (0..a.rows())
                .map(|i| {
                    let r = a.row(i);
                    vec![r[2], c * r[0] - s * r[1], s * r[0] + c * r[1]]
                })
                .collect();
            DArray::from_rows(&rows).unwrap()
        };
        let eval = |xs: &[DArray]| {
            let mut g = Graph::new();
            let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let p = clip_pair_loss(&mut g, &vars, 0.1).unwrap();
            let l = clip_loo_loss(&mut g, &vars, 0.1).unwrap();
            (g.value(p).item(), g.value(l).item())
        };
        let before = eval(&reps);
        let after = eval(&reps.iter().map(rotate).collect::<Vec<_>>());
        prop_assert!((before.0 - after.0).abs() < 1e-9 && (before.1 - after.1).abs() < 1e-9);
    }

    #[test]
    fn config_hash_ignores_line_order(heads in 1usize..64, lr in 1e-6f64..1e-1) {
        let dim = 8 * heads;
        let a = ExperimentConfig::parse(&format!("model.dim = {dim}\npretrain.lr = {lr}\n")).unwrap();
        let b = ExperimentConfig::parse(&format!("# comment\npretrain.lr = {lr}\n\nmodel.dim = {dim}\n")).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse(&format!("model.dim = {}\npretrain.lr = {lr}\n", dim + 8)).unwrap();
        prop_assert_ne!(a.hash(), c.hash());
    }
}

#[test]
fn random_classifier_scores_chance() {
    let mut rng = RngState::new(42);
    for k in [2usize, 5] {
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let ba = balanced_accuracy(&Confusion::from_predictions(&truth, &pred, k).unwrap()).unwrap();
        assert!((ba - 1.0 / k as f64).abs() <= 0.03, "k={k}: {ba}");
    }
}

#[test]
fn each_modality_dropped_about_a_quarter_of_the_time() {
    let mut rng = RngState::new(8);
    let mut hits = [0usize; 4];
    for _ in 0..1000 {
        let plan = sample_batch_masks(&MaskConfig::standard(true), 1, &mut rng).unwrap().remove(0);
        hits[plan.dropped.unwrap().index()] += 1;
    }
    for h in hits {
        assert!((h as f64 / 1000.0 - 0.25).abs() <= 0.03, "{hits:?}");
    }
}
