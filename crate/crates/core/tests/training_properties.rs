mod common;

use common::{finite_difference, max_relative_error, random_matrix, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sigrot::graph::build_graph;
use sigrot::losses::{clip_loss, sigrot_loss, ModelBatch};
use sigrot::training::{
    batch_objective, clip_global_norm, shuffle_batches, train, Model, Objective, PairDataset,
    PairRecord, ProjectionHead, Split, TrainConfig,
};
use sigrot::DenseMatrix;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Small clustered pair set built independently of the CLI generator.
fn clustered(clusters: usize, images_per_cluster: usize, sigma: f64, seed: u64) -> PairDataset {
    let mut r = rng(seed);
    let (d_img, d_txt, d_g) = (6, 5, 4);
    let gauss = |d: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(r)).collect()
    };
    let img_c: Vec<Vec<f64>> = (0..clusters).map(|_| unit(gauss(d_img, &mut r))).collect();
    let txt_c: Vec<Vec<f64>> = (0..clusters).map(|_| unit(gauss(d_txt, &mut r))).collect();
    let g_c: Vec<Vec<f64>> = (0..clusters).map(|_| unit(gauss(d_g, &mut r))).collect();
    let mut records = Vec::new();
    for c in 0..clusters {
        for k in 0..images_per_cluster {
            let img: Vec<f64> = img_c[c]
                .iter()
                .zip(gauss(d_img, &mut r))
                .map(|(a, z)| a + sigma * z)
                .collect();
            let split = match k % 5 {
                0 => Split::Val,
                1 => Split::Test,
                _ => Split::Train,
            };
            for cap in 0..2 {
                records.push(PairRecord {
                    image_id: format!("{c}-{k}"),
                    caption_id: format!("{c}-{k}-{cap}"),
                    split,
                    image_feature: img.clone(),
                    text_feature: txt_c[c]
                        .iter()
                        .zip(gauss(d_txt, &mut r))
                        .map(|(a, z)| a + sigma * z)
                        .collect(),
                    graph_image_feature: g_c[c].clone(),
                    graph_text_feature: g_c[c].clone(),
                });
            }
        }
    }
    PairDataset::new(records, d_img, d_txt, d_g).unwrap()
}

fn small_cfg(objective: Objective, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 16,
        peak_lr: 1e-2,
        warmup_epochs: 1,
        objective,
        seed,
        embed_dim: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn forward_matches_scalar_loop() {
    let mut r = rng(3);
    let head = ProjectionHead::new(random_matrix(&mut r, 5, 7, -1.0, 1.0)).unwrap();
    for _ in 0..20 {
        let x: Vec<f64> = (0..7).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut y = vec![0.0; 5];
        for (i, yi) in y.iter_mut().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                *yi += head.weight.get(i, j) * xj;
            }
        }
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = head.forward(&x).unwrap();
        for (g, e) in got.iter().zip(&y) {
            assert!((g - e / n).abs() < 1e-12);
        }
    }
}

#[test]
fn head_backward_matches_finite_differences() {
    let mut r = rng(5);
    let head = ProjectionHead::new(random_matrix(&mut r, 3, 4, -1.0, 1.0)).unwrap();
    let x = random_matrix(&mut r, 6, 4, -1.0, 1.0);
    let probe = random_matrix(&mut r, 6, 3, -1.0, 1.0);
    // linear functional of the normalized outputs
    let f = |w: &DenseMatrix| -> f64 {
        let out = ProjectionHead::new(w.clone())
            .unwrap()
            .forward_batch(&x)
            .unwrap()
            .embeddings;
        out.data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let proj = head.forward_batch(&x).unwrap();
    let analytic = head.backward(&x, &proj, &probe).unwrap();
    let numeric = finite_difference(&head.weight, 1e-6, f);
    assert!(max_relative_error(&analytic, &numeric) < 1e-6);
}

#[test]
fn clipping_uses_the_norm_of_the_concatenation() {
    let mut r = rng(8);
    for _ in 0..50 {
        let mut a: Vec<f64> = (0..7).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut b: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut c = [r.random_range(-3.0..3.0)];
        let flat: Vec<f64> = a.iter().chain(&b).chain(&c).copied().collect();
        let expected = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        let max = r.random_range(0.5..6.0);
        let norm = clip_global_norm(&mut [&mut a, &mut b, &mut c], max);
        assert!((norm - expected).abs() < 1e-12);
        let after = a
            .iter()
            .chain(&b)
            .chain(&c)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((after - expected.min(max)).abs() < 1e-12);
    }
}

#[test]
fn pure_sigrot_loss_decreases_over_first_epochs() {
    let data = clustered(3, 20, 0.2, 11);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..small_cfg(Objective::ClipSigrot, 1)
    };
    let out = train(&data, &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.loss).collect();
    assert!(losses[..5].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn hybrid_objective_is_additive_at_the_first_step() {
    let data = clustered(3, 10, 0.3, 2);
    let cfg = small_cfg(Objective::ClipSigrot, 4);
    let (d_img, d_txt, _) = data.dims();
    let model = Model::init(d_img, d_txt, cfg.embed_dim, cfg.objective, cfg.seed);
    let idx = &shuffle_batches(
        data.split_indices(Split::Train).len(),
        cfg.batch_size,
        cfg.seed,
        0,
    )[0];
    let train_idx = data.split_indices(Split::Train);
    let idx: Vec<usize> = idx.iter().map(|&p| train_idx[p]).collect();
    let (hybrid, _) = batch_objective(&model, &data, &idx, &cfg).unwrap();

    let img = model
        .image_head
        .forward_batch(&data.image_features(&idx))
        .unwrap()
        .embeddings;
    let txt = model
        .text_head
        .forward_batch(&data.text_features(&idx))
        .unwrap()
        .embeddings;
    let batch = ModelBatch::new(img, txt).unwrap();
    let graph = build_graph(&data.graph_embeddings(&idx).unwrap(), cfg.strategy).unwrap();
    let clip = clip_loss(&batch, &model.scale).unwrap().value;
    let ot = sigrot_loss(&batch, &graph, &cfg.solver).unwrap().value;
    assert!((hybrid - (0.1 * clip + ot)).abs() < 1e-10);
}

#[test]
fn identical_seeds_give_identical_weights() {
    let data = clustered(3, 10, 0.3, 6);
    for objective in [Objective::Clip, Objective::SiglipSigrot] {
        let a = train(&data, &small_cfg(objective, 21)).unwrap();
        let b = train(&data, &small_cfg(objective, 21)).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.last, b.last);
        assert_eq!(a.history, b.history);
        let c = train(&data, &small_cfg(objective, 22)).unwrap();
        assert_ne!(a.last.model, c.last.model);
    }
}

#[test]
fn best_checkpoint_has_max_val_recall_earliest_on_ties() {
    let data = clustered(3, 10, 0.5, 9);
    for seed in 0..4 {
        let out = train(&data, &small_cfg(Objective::Clip, seed)).unwrap();
        let best = out
            .history
            .iter()
            .map(|h| h.val_t2i_r1)
            .fold(f64::NEG_INFINITY, f64::max);
        let first = out
            .history
            .iter()
            .position(|h| h.val_t2i_r1 == best)
            .unwrap()
            + 1;
        assert_eq!(out.best_epoch, first);
        assert_eq!(
            out.best.step as usize,
            first * out.last.step as usize / out.history.len()
        );
    }
}

#[test]
fn step_counter_advances_once_per_batch() {
    let data = clustered(3, 10, 0.3, 1);
    let cfg = small_cfg(Objective::Clip, 0);
    let out = train(&data, &cfg).unwrap();
    let per_epoch =
        shuffle_batches(data.split_indices(Split::Train).len(), cfg.batch_size, 0, 0).len();
    assert_eq!(out.last.step as usize, per_epoch * cfg.epochs);
}

#[test]
fn empty_splits_and_oversized_batches_are_rejected() {
    let data = clustered(2, 3, 0.3, 1);
    let only_train: Vec<PairRecord> = data
        .records()
        .iter()
        .cloned()
        .map(|mut r| {
            r.split = Split::Train;
            r
        })
        .collect();
    let (a, b, c) = data.dims();
    let no_val = PairDataset::new(only_train, a, b, c).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        ..small_cfg(Objective::Clip, 0)
    };
    assert!(matches!(
        train(&no_val, &cfg),
        Err(sigrot::Error::EmptySplit("val"))
    ));
    let huge = TrainConfig {
        batch_size: 10_000,
        ..small_cfg(Objective::Clip, 0)
    };
    assert!(matches!(
        train(&data, &huge),
        Err(sigrot::Error::InvalidConfig(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn pure_sigrot_history_stays_finite(seed in 0u64..1_000_000) {
        let data = clustered(3, 10, 0.35, seed);
        let cfg = TrainConfig { epochs: 3, lambda: 0.0, ..small_cfg(Objective::ClipSigrot, seed) };
        let out = train(&data, &cfg).unwrap();
        for h in &out.history {
            prop_assert!(h.loss.is_finite());
        }
        prop_assert!(out.last.model.image_head.weight.is_finite());
    }

    #[test]
    fn shuffles_cover_every_index_once(n in 2usize..300, batch in 2usize..64, seed in 0u64..1000, epoch in 0u64..50) {
        let batches = shuffle_batches(n, batch, seed, epoch);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        let dropped = if n % batch == 1 { 1 } else { 0 };
        prop_assert_eq!(seen.len(), n - dropped);
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), n - dropped);
        prop_assert!(batches.iter().all(|b| b.len() >= 2 && b.len() <= batch));
    }
}
