//! Acceptance suite: one test per shipped guarantee, each printing a
//! `[PASS] criterion N` line with its measured numbers.
//!
//! Criteria 6-8 train real models; they share a cached table of runs so the
//! suite stays inside its time budgets.

use glamor_core::attention::{fuse, fuse_backward, ChannelMasks, GAParams, LAParams};
use glamor_core::attention::{
    global_attention, global_attention_backward, global_attention_forward,
    local_attention_backward, local_attention_forward,
};
use glamor_core::backbone::{
    sparsity_probe, Model, ModelConfig, StageSpec, StemSpec,
};
use glamor_core::data::{
    lr_at, make_synthetic_dataset, EraseConfig, PkSamplerConfig, ScheduleConfig, ScheduleKind,
    SyntheticDataset,
};
use glamor_core::gradcheck::{grad_check_multi_step, ClosureFn, COMPOSITE_STEPS};
use glamor_core::io::{
    read_checkpoint, read_embeddings, read_manifest, read_model_config, read_tensor,
    write_checkpoint, write_embeddings, write_manifest, write_model_config, write_tensor,
    ManifestEntry,
};
use glamor_core::losses::{
    batch_hard_mine, smoothed_softmax_loss, smoothed_targets, triplet_loss, trisoft_loss,
    LossConfig, Smoothing,
};
use glamor_core::norms::{
    norm_backward, normalize, normalize_forward, NormSpec, NormState,
};
use glamor_core::reid::{rank, EmbeddingSet, Protocol};
use glamor_core::rng::SplitMix64;
use glamor_core::tensor::{Matrix, Tensor4};
use glamor_core::train::{embed_all, train, TrainConfig};
use std::sync::OnceLock;
use std::time::Instant;

// ---------------------------------------------------------------------------
// criterion 1: gradient suite
// ---------------------------------------------------------------------------

const SEEDS_PER_CHECK: u64 = 50;
const UNIT_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

fn composite_config() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        stem: StemSpec { out_channels: 4, kernel: 3, stride: 2 },
        stages: vec![
            StageSpec { blocks: 1, channels: 4, stride: 1 },
            StageSpec { blocks: 1, channels: 8, stride: 1 },
        ],
        norm_group_size: 2,
        epsilon: 1e-5,
        feature_dim: 8,
        num_classes: 3,
        attach_ga: true,
        attach_la: true,
        la_reduction: 2,
        la_kernel: 3,
        leaky_slope: 0.01,
    }
}

fn check_all_seeds(name: &str, tol: f64, mut one: impl FnMut(u64) -> f64) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS_PER_CHECK {
        let err = one(seed);
        assert!(
            err <= tol,
            "{name} seed {seed}: rel error {err:.3e} > {tol:.0e}"
        );
        worst = worst.max(err);
    }
    println!("  {name}: worst rel error {worst:.2e} over {SEEDS_PER_CHECK} seeds");
}

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    check_all_seeds("triplet", UNIT_TOL, |seed| {
        let mut rng = SplitMix64::new(10_000 + seed);
        let emb0 = Matrix::random(9, 5, &mut rng);
        let ids: Vec<i64> = (0..9).map(|i| (i / 3) as i64).collect();
        let config = LossConfig::new(0.3, Smoothing::None, 3).unwrap();
        let value = {
            let ids = ids.clone();
            move |p: &[f64]| {
                let emb = Matrix::from_vec(9, 5, p.to_vec())?;
                let mined = batch_hard_mine(&emb, &ids)?;
                Ok(triplet_loss(&emb, &mined, &config)?.value)
            }
        };
        let gradient = {
            let ids = ids.clone();
            move |p: &[f64]| {
                let emb = Matrix::from_vec(9, 5, p.to_vec())?;
                let mined = batch_hard_mine(&emb, &ids)?;
                Ok(triplet_loss(&emb, &mined, &config)?.embeddings_grad.data().to_vec())
            }
        };
        grad_check_multi_step(&ClosureFn { value, gradient }, emb0.data(), UNIT_TOL, &COMPOSITE_STEPS)
            .unwrap()
            .max_rel_error
    });
    check_all_seeds("smoothed softmax", UNIT_TOL, |seed| {
        let smoothing = match seed % 3 {
            0 => Smoothing::None,
            1 => Smoothing::Explicit(0.15),
            _ => Smoothing::OneOverN,
        };
        let config = LossConfig::new(0.3, smoothing, 5).unwrap();
        let mut rng = SplitMix64::new(20_000 + seed);
        let logits0 = Matrix::random(4, 5, &mut rng);
        let labels = vec![
            rng.below(5),
            rng.below(5),
            rng.below(5),
            rng.below(5),
        ];
        let value = {
            let labels = labels.clone();
            move |p: &[f64]| {
                let logits = Matrix::from_vec(4, 5, p.to_vec())?;
                Ok(smoothed_softmax_loss(&logits, &labels, &config)?.value)
            }
        };
        let gradient = {
            let labels = labels.clone();
            move |p: &[f64]| {
                let logits = Matrix::from_vec(4, 5, p.to_vec())?;
                Ok(smoothed_softmax_loss(&logits, &labels, &config)?.logits_grad.data().to_vec())
            }
        };
        grad_check_multi_step(&ClosureFn { value, gradient }, logits0.data(), UNIT_TOL, &COMPOSITE_STEPS)
            .unwrap()
            .max_rel_error
    });
    for (label, spec) in [
        ("layer norm", NormSpec::layer()),
        ("group norm", NormSpec::group(2)),
        ("batch norm", NormSpec::batch()),
        ("l2 norm", NormSpec::l2()),
    ] {
        check_all_seeds(label, UNIT_TOL, |seed| {
            let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
            let mut rng = SplitMix64::new(30_000 + seed);
            let x0 = Tensor4::random(n, c, h, w, &mut rng);
            let weights: Vec<f64> = (0..x0.len()).map(|_| rng.normal()).collect();
            let value = {
                let weights = weights.clone();
                move |p: &[f64]| {
                    let t = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                    let mut state = NormState::new(c);
                    let out = normalize(&t, &spec, &mut state, true)?;
                    Ok(out.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum())
                }
            };
            let gradient = {
                let weights = weights.clone();
                move |p: &[f64]| {
                    let t = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                    let mut state = NormState::new(c);
                    let fwd = normalize_forward(&t, &spec, &mut state, true)?;
                    let upstream = Tensor4::from_vec(n, c, h, w, weights.clone())?;
                    Ok(norm_backward(&fwd.ctx, &upstream)?.input.data().to_vec())
                }
            };
            grad_check_multi_step(&ClosureFn { value, gradient }, x0.data(), UNIT_TOL, &COMPOSITE_STEPS)
                .unwrap()
                .max_rel_error
        });
    }
    check_all_seeds("global attention", UNIT_TOL, |seed| {
        let (n, c, h, w) = (1usize, 2usize, 4usize, 4usize);
        let mut rng = SplitMix64::new(40_000 + seed);
        let f0 = Tensor4::random(n, c, h, w, &mut rng);
        let params0 = GAParams::he_init(c, c, &mut rng).unwrap();
        let input_len = f0.len();
        let w1 = params0.conv1.weights.len();
        let w2 = params0.conv2.weights.len();
        let assemble = move |p: &[f64]| {
            let f = Tensor4::from_vec(n, c, h, w, p[..input_len].to_vec()).unwrap();
            let mut params = GAParams::zeros(c, c).unwrap();
            let mut cursor = input_len;
            params.conv1.weights.copy_from_slice(&p[cursor..cursor + w1]);
            cursor += w1;
            params.conv1.bias.copy_from_slice(&p[cursor..cursor + c]);
            cursor += c;
            params.conv2.weights.copy_from_slice(&p[cursor..cursor + w2]);
            cursor += w2;
            params.conv2.bias.copy_from_slice(&p[cursor..cursor + c]);
            (f, params)
        };
        let value = move |p: &[f64]| {
            let (f, params) = assemble(p);
            Ok(global_attention(&f, &params)?.data().iter().sum())
        };
        let gradient = move |p: &[f64]| {
            let (f, params) = assemble(p);
            let fwd = global_attention_forward(&f, &params)?;
            let ones = Tensor4::filled(n, c, h, w, 1.0);
            let grads = global_attention_backward(&fwd.ctx, &params, &ones)?;
            let mut flat = grads.input.data().to_vec();
            flat.extend(grads.conv1_weights);
            flat.extend(grads.conv1_bias);
            flat.extend(grads.conv2_weights);
            flat.extend(grads.conv2_bias);
            Ok(flat)
        };
        let mut flat = f0.data().to_vec();
        flat.extend(params0.conv1.weights.iter());
        flat.extend(params0.conv1.bias.iter());
        flat.extend(params0.conv2.weights.iter());
        flat.extend(params0.conv2.bias.iter());
        grad_check_multi_step(&ClosureFn { value, gradient }, &flat, UNIT_TOL, &COMPOSITE_STEPS)
            .unwrap()
            .max_rel_error
    });
    check_all_seeds("local attention", UNIT_TOL, |seed| {
        let (n, c, h, w) = (1usize, 4usize, 4usize, 4usize);
        let mut rng = SplitMix64::new(50_000 + seed);
        let f0 = Tensor4::random(n, c, h, w, &mut rng);
        let params = LAParams::he_init(c, 2, 3, &mut rng).unwrap();
        let value = {
            let params = params.clone();
            move |p: &[f64]| {
                let f = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                Ok(glamor_core::attention::local_attention(&f, &params)?.data().iter().sum())
            }
        };
        let gradient = {
            let params = params.clone();
            move |p: &[f64]| {
                let f = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                let fwd = local_attention_forward(&f, &params)?;
                let ones = Tensor4::filled(n, c, h, w, 1.0);
                Ok(local_attention_backward(&fwd.ctx, &params, &ones)?.input.data().to_vec())
            }
        };
        grad_check_multi_step(&ClosureFn { value, gradient }, f0.data(), UNIT_TOL, &COMPOSITE_STEPS)
            .unwrap()
            .max_rel_error
    });
    check_all_seeds("fusion", UNIT_TOL, |seed| {
        let (n, c, h, w) = (1usize, 4usize, 3usize, 3usize);
        let masks = ChannelMasks::new(c);
        let mut rng = SplitMix64::new(60_000 + seed);
        let len = n * c * h * w;
        let flat: Vec<f64> = (0..2 * len).map(|_| rng.normal()).collect();
        let weights: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let value = {
            let masks = masks.clone();
            let weights = weights.clone();
            move |p: &[f64]| {
                let fg = Tensor4::from_vec(n, c, h, w, p[..len].to_vec())?;
                let fl = Tensor4::from_vec(n, c, h, w, p[len..].to_vec())?;
                let fused = fuse(&fg, &fl, &masks)?;
                Ok(fused.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum())
            }
        };
        let gradient = {
            let masks = masks.clone();
            let weights = weights.clone();
            move |_p: &[f64]| {
                let upstream = Tensor4::from_vec(n, c, h, w, weights.clone())?;
                let (gg, gl) = fuse_backward(&upstream, &masks)?;
                let mut flat = gg.data().to_vec();
                flat.extend_from_slice(gl.data());
                Ok(flat)
            }
        };
        grad_check_multi_step(&ClosureFn { value, gradient }, &flat, UNIT_TOL, &COMPOSITE_STEPS)
            .unwrap()
            .max_rel_error
    });
    check_all_seeds("full composite", COMPOSITE_TOL, |seed| {
        let model0 = Model::init(composite_config(), 100 + seed).unwrap();
        let mut rng = SplitMix64::new(200 + seed);
        let images = Tensor4::random(4, 3, 8, 8, &mut rng);
        let ids = vec![0i64, 0, 1, 1];
        let loss_config = LossConfig::new(0.3, Smoothing::Explicit(0.1), 3).unwrap();
        let flat0 = model0.flatten();
        let value = {
            let model0 = model0.clone();
            let images = images.clone();
            let ids = ids.clone();
            move |p: &[f64]| {
                let mut model = model0.clone();
                model.assign_flat(p)?;
                let pass = model.forward(&images, true)?;
                Ok(trisoft_loss(&pass.triplet_features, &pass.logits, &ids, &loss_config)?.total)
            }
        };
        let gradient = {
            let model0 = model0.clone();
            let images = images.clone();
            let ids = ids.clone();
            move |p: &[f64]| {
                let mut model = model0.clone();
                model.assign_flat(p)?;
                let pass = model.forward(&images, true)?;
                let loss = trisoft_loss(&pass.triplet_features, &pass.logits, &ids, &loss_config)?;
                Ok(model.backward(&pass, &loss.embeddings_grad, &loss.logits_grad)?.flatten())
            }
        };
        grad_check_multi_step(&ClosureFn { value, gradient }, &flat0, COMPOSITE_TOL, &COMPOSITE_STEPS)
            .unwrap()
            .max_rel_error
    });
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s (budget 120s)");
    println!("[PASS] criterion 1: gradient suite, {SEEDS_PER_CHECK} seeds per check, {elapsed:.1}s < 120s");
}

// ---------------------------------------------------------------------------
// criterion 2: mining oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_mining_oracle() {
    let started = Instant::now();
    for case in 0..500u64 {
        let mut rng = SplitMix64::new(70_000 + case);
        let p = 2 + rng.below(5);
        let k = 2 + rng.below(5);
        let rows = p * k;
        let emb = Matrix::random(rows, 4, &mut rng);
        let ids: Vec<i64> = (0..rows).map(|i| (i / k) as i64).collect();
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        assert_eq!(mined.triplets.len(), rows);
        // independent exhaustive scan, same lowest-index tie-break
        for a in 0..rows {
            let mut best_pos: Option<(usize, f64)> = None;
            let mut best_neg: Option<(usize, f64)> = None;
            for j in 0..rows {
                if j == a {
                    continue;
                }
                let d: f64 = emb
                    .row(a)
                    .iter()
                    .zip(emb.row(j).iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if ids[j] == ids[a] {
                    if best_pos.map(|(_, bd)| d > bd).unwrap_or(true) {
                        best_pos = Some((j, d));
                    }
                } else if best_neg.map(|(_, bd)| d < bd).unwrap_or(true) {
                    best_neg = Some((j, d));
                }
            }
            let t = &mined.triplets[a];
            let (pi, pd) = best_pos.unwrap();
            let (ni, nd) = best_neg.unwrap();
            assert_eq!(t.anchor, a);
            assert_eq!(t.hardest_positive, pi, "case {case} anchor {a}");
            assert_eq!(t.hardest_negative, ni, "case {case} anchor {a}");
            assert!((t.d_ap - pd).abs() <= 1e-10);
            assert!((t.d_an - nd).abs() <= 1e-10);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "mining oracle took {elapsed:.1}s (budget 30s)");
    println!("[PASS] criterion 2: 500 mining batches match the exhaustive scan, {elapsed:.1}s < 30s");
}

// ---------------------------------------------------------------------------
// criterion 3: ranking oracle
// ---------------------------------------------------------------------------

/// Naive evaluator, written against the protocol definition only.
fn naive_rank(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
) -> (f64, Vec<f64>, usize) {
    let mut aps = Vec::new();
    let mut hit_ranks = Vec::new();
    let mut skipped = 0usize;
    for qi in 0..query.len() {
        let mut entries: Vec<(f64, usize, bool)> = Vec::new();
        for gi in 0..gallery.len() {
            if protocol == Protocol::Veri
                && gallery.identities[gi] == query.identities[qi]
                && gallery.cameras[gi] == query.cameras[qi]
            {
                continue;
            }
            let d: f64 = query
                .vectors
                .row(qi)
                .iter()
                .zip(gallery.vectors.row(gi).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            entries.push((d, gi, gallery.identities[gi] == query.identities[qi]));
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let positives = entries.iter().filter(|e| e.2).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first = None;
        for (pos, e) in entries.iter().enumerate() {
            if e.2 {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
                if first.is_none() {
                    first = Some(pos + 1);
                }
            }
        }
        aps.push(ap / positives as f64);
        hit_ranks.push(first.unwrap());
    }
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    let mut cmc = vec![0.0; gallery.len() + 1];
    if !aps.is_empty() {
        for k in 1..=gallery.len() {
            cmc[k] = hit_ranks.iter().filter(|&&r| r <= k).count() as f64 / aps.len() as f64;
        }
    }
    (map, cmc, skipped)
}

fn random_set(count: usize, prefix: &str, ids: usize, cams: usize, rng: &mut SplitMix64) -> EmbeddingSet {
    let rows: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..4).map(|_| rng.normal()).collect())
        .collect();
    EmbeddingSet::new(
        Matrix::from_rows(&rows).unwrap(),
        (0..count).map(|i| format!("{prefix}{i}")).collect(),
        (0..count).map(|_| format!("id{}", rng.below(ids))).collect(),
        (0..count).map(|_| format!("c{}", rng.below(cams))).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_03_ranking_oracle() {
    let started = Instant::now();
    for case in 0..100u64 {
        let mut rng = SplitMix64::new(80_000 + case);
        // two max-size instances, the rest random within the stated bounds
        let (nq, ng) = if case < 2 {
            (200, 1000)
        } else {
            (5 + rng.below(60), 30 + rng.below(300))
        };
        let ids = 4 + rng.below(12);
        let query = random_set(nq, "q", ids, 3, &mut rng);
        let gallery = random_set(ng, "g", ids, 3, &mut rng);
        for protocol in [Protocol::Plain, Protocol::Veri] {
            let report = rank(&query, &gallery, protocol).unwrap();
            let (map, cmc, skipped) = naive_rank(&query, &gallery, protocol);
            assert!((report.map - map).abs() <= 1e-12, "case {case} {protocol:?}");
            assert_eq!(report.num_skipped_queries, skipped);
            assert_eq!(report.cmc.len(), cmc.len());
            for (a, b) in report.cmc.iter().zip(cmc.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
    // the veri twin fixture: a same-id same-camera duplicate may not inflate AP
    let query = EmbeddingSet::new(
        Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        vec!["q0".into()],
        vec!["a".into()],
        vec!["c1".into()],
    )
    .unwrap();
    let gallery = EmbeddingSet::new(
        Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![1.0, 0.0]]).unwrap(),
        vec!["g0".into(), "g1".into(), "g2".into()],
        vec!["a".into(), "a".into(), "b".into()],
        vec!["c1".into(), "c2".into(), "c1".into()],
    )
    .unwrap();
    let veri = rank(&query, &gallery, Protocol::Veri).unwrap();
    assert!((veri.per_query_ap[0] - 0.5).abs() <= 1e-15);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "ranking oracle took {elapsed:.1}s (budget 60s)");
    println!("[PASS] criterion 3: 100 ranking instances match the naive evaluator, {elapsed:.1}s < 60s");
}

// ---------------------------------------------------------------------------
// criterion 4: equation-form fixtures
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_equation_form_fixtures() {
    // smoothed targets for the 576-identity training split, reciprocal mode
    let config = LossConfig::new(0.3, Smoothing::OneOverN, 576).unwrap();
    let q = smoothed_targets(0, &config).unwrap();
    assert_eq!(q[0], 1.0 - 1.0 / 576.0);
    assert_eq!(q[1], 1.0 / 576.0);
    assert_eq!(q[575], 1.0 / 576.0);
    // channel masks for C = 4
    let masks = ChannelMasks::new(4);
    assert_eq!(masks.global_mask, vec![0.0, 0.0, 1.0, 1.0]);
    assert_eq!(masks.local_mask, vec![1.0, 1.0, 0.0, 0.0]);
    // zeroed second conv gives exactly half the input
    let mut rng = SplitMix64::new(90_000);
    let f = Tensor4::random(2, 3, 5, 5, &mut rng);
    let mut params = GAParams::he_init(3, 3, &mut rng).unwrap();
    params.conv2.weights.iter_mut().for_each(|w| *w = 0.0);
    params.conv2.bias.iter_mut().for_each(|b| *b = 0.0);
    let out = global_attention(&f, &params).unwrap();
    for (o, x) in out.data().iter().zip(f.data().iter()) {
        assert_eq!(*o, 0.5 * x);
    }
    println!("[PASS] criterion 4: smoothing targets, channel masks, and the half-gate identity are exact");
}

// ---------------------------------------------------------------------------
// criterion 5: schedule fixtures
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_schedule_fixtures() {
    let config = ScheduleConfig::new(1e-4, ScheduleKind::Warmup1).unwrap();
    for (epoch, want) in [(0usize, 1e-5), (10, 1e-4), (20, 6e-5), (40, 3.6e-5)] {
        let got = lr_at(&config, epoch);
        assert!(
            (got - want).abs() <= 1e-15,
            "lr({epoch}) = {got:e}, want {want:e}"
        );
    }
    println!("[PASS] criterion 5: warmup1 endpoints and decay fixtures exact to 1e-15");
}

// ---------------------------------------------------------------------------
// criteria 6-8: trained-model properties over a shared run table
// ---------------------------------------------------------------------------

const DATASET_SEED: u64 = 4242;
const OVERFIT_EPOCHS: usize = 200;
const COMPARISON_EPOCHS: usize = 200;
const BASE_LR: f64 = 1e-3;
const COMPARISON_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RunKey {
    seed: u64,
    ga: bool,
    la: bool,
    smoothed_softmax: bool,
    epochs: usize,
}

#[derive(Debug, Clone, Copy)]
struct RunOutcome {
    map: f64,
    rank1: f64,
    stem_sparsity: f64,
}

fn dataset() -> &'static SyntheticDataset {
    static DS: OnceLock<SyntheticDataset> = OnceLock::new();
    DS.get_or_init(|| make_synthetic_dataset(10, 20, 16, DATASET_SEED).unwrap())
}

fn train_config(key: &RunKey) -> TrainConfig {
    TrainConfig {
        epochs: key.epochs,
        seed: key.seed,
        sampler: PkSamplerConfig::new(5, 4, key.seed).unwrap(),
        loss: LossConfig::new(
            0.3,
            if key.smoothed_softmax { Smoothing::OneOverN } else { Smoothing::None },
            10,
        )
        .unwrap(),
        schedule: ScheduleConfig::new(BASE_LR, ScheduleKind::Warmup1).unwrap(),
        erase: Some(EraseConfig::new(0.5).unwrap()),
    }
}

fn model_config(key: &RunKey) -> ModelConfig {
    let mut config = ModelConfig::toy(10);
    config.attach_ga = key.ga;
    config.attach_la = key.la;
    config
}

/// Train one model and measure the held-in split plus the stem sparsity.
fn execute_run(key: &RunKey) -> (Model, RunOutcome) {
    let ds = dataset();
    let mut model = Model::init(model_config(key), key.seed).unwrap();
    train(&mut model, &ds.images, &ds.labels, &train_config(key)).unwrap();
    let (map, rank1) = held_in_metrics(&model, ds);
    let stem_sparsity = sparsity_probe(&model, &ds.images, 1e-6, 40)
        .unwrap()
        .per_layer
        .iter()
        .find(|(name, _)| name == "stem")
        .unwrap()
        .1;
    (model, RunOutcome { map, rank1, stem_sparsity })
}

/// First two instances of each identity are the queries, the rest the
/// gallery; everything was seen in training.
fn held_in_metrics(model: &Model, ds: &SyntheticDataset) -> (f64, f64) {
    let emb = embed_all(model, &ds.images, 32).unwrap();
    let per_id = 20usize;
    let mut q_rows = Vec::new();
    let mut g_rows = Vec::new();
    let mut q_meta: (Vec<String>, Vec<String>, Vec<String>) = Default::default();
    let mut g_meta: (Vec<String>, Vec<String>, Vec<String>) = Default::default();
    for i in 0..ds.len() {
        let row = emb.row(i).to_vec();
        let sample_id = ds.sample_ids[i].clone();
        let identity = ds.labels[i].to_string();
        let camera = ds.cameras[i].to_string();
        if i % per_id < 2 {
            q_rows.push(row);
            q_meta.0.push(sample_id);
            q_meta.1.push(identity);
            q_meta.2.push(camera);
        } else {
            g_rows.push(row);
            g_meta.0.push(sample_id);
            g_meta.1.push(identity);
            g_meta.2.push(camera);
        }
    }
    let query = EmbeddingSet::new(Matrix::from_rows(&q_rows).unwrap(), q_meta.0, q_meta.1, q_meta.2).unwrap();
    let gallery = EmbeddingSet::new(Matrix::from_rows(&g_rows).unwrap(), g_meta.0, g_meta.1, g_meta.2).unwrap();
    let report = rank(&query, &gallery, Protocol::Plain).unwrap();
    (report.map, report.rank1())
}

/// Cached comparison runs shared by criteria 7 and 8.
fn comparison_runs() -> &'static Vec<(RunKey, RunOutcome)> {
    static RUNS: OnceLock<Vec<(RunKey, RunOutcome)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut table = Vec::new();
        for &seed in &COMPARISON_SEEDS {
            for (ga, la, smoothed) in [
                (false, false, true),  // base, trisoft: shared by 7 and 8
                (true, false, true),   // GA only: criterion 7
                (false, false, false), // triplet-only base: criterion 8
                (true, true, true),    // full GLAMOR: criterion 8
            ] {
                let key = RunKey {
                    seed,
                    ga,
                    la,
                    smoothed_softmax: smoothed,
                    epochs: COMPARISON_EPOCHS,
                };
                let (_, outcome) = execute_run(&key);
                table.push((key, outcome));
            }
        }
        table
    })
}

fn lookup(ga: bool, la: bool, smoothed: bool) -> Vec<RunOutcome> {
    comparison_runs()
        .iter()
        .filter(|(k, _)| k.ga == ga && k.la == la && k.smoothed_softmax == smoothed)
        .map(|(_, o)| *o)
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_06_overfit_smoke() {
    let started = Instant::now();
    let key = RunKey {
        seed: 0,
        ga: true,
        la: true,
        smoothed_softmax: true,
        epochs: OVERFIT_EPOCHS,
    };
    let (model, outcome) = execute_run(&key);
    assert!(
        model.param_count() <= 50_000,
        "model has {} parameters (budget 50k)",
        model.param_count()
    );
    assert!(outcome.rank1 >= 0.95, "rank-1 {} < 0.95", outcome.rank1);
    assert!(outcome.map >= 0.90, "mAP {} < 0.90", outcome.map);
    // bit-exact reproducibility of the whole run
    let (model2, _) = execute_run(&key);
    assert_eq!(model.flatten(), model2.flatten(), "same-seed rerun diverged");
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 600.0, "overfit smoke took {elapsed:.1}s (budget 600s)");
    println!(
        "[PASS] criterion 6: toy overfit rank-1 {:.3} >= 0.95, mAP {:.3} >= 0.90, {} params, reproducible, {elapsed:.1}s < 600s",
        outcome.rank1,
        outcome.map,
        model.param_count()
    );
}

#[test]
fn criterion_07_sparsity_direction() {
    let with_ga = mean(lookup(true, false, true).iter().map(|o| o.stem_sparsity));
    let without_ga = mean(lookup(false, false, true).iter().map(|o| o.stem_sparsity));
    assert!(
        with_ga < without_ga,
        "stem sparsity with GA ({with_ga:.4}) not strictly below without GA ({without_ga:.4})"
    );
    println!(
        "[PASS] criterion 7: mean stem sparsity with GA {with_ga:.4} < without GA {without_ga:.4} over {} seeds",
        COMPARISON_SEEDS.len()
    );
}

#[test]
fn criterion_08_ablation_ordering() {
    let triplet_only = mean(lookup(false, false, false).iter().map(|o| o.map));
    let trisoft = mean(lookup(false, false, true).iter().map(|o| o.map));
    let glamor = mean(lookup(true, true, true).iter().map(|o| o.map));
    assert!(
        trisoft >= triplet_only,
        "triplet+smoothed-softmax mAP {trisoft:.4} < triplet-only {triplet_only:.4}"
    );
    assert!(
        glamor >= trisoft,
        "GLAMOR mAP {glamor:.4} < base mAP {trisoft:.4}"
    );
    println!(
        "[PASS] criterion 8: mAP ordering triplet-only {triplet_only:.4} <= trisoft {trisoft:.4} <= GLAMOR {glamor:.4} over {} seeds",
        COMPARISON_SEEDS.len()
    );
}

// ---------------------------------------------------------------------------
// criterion 9: invariance suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_invariance_suite() {
    // triplet translation invariance
    let mut rng = SplitMix64::new(95_000);
    let emb = Matrix::random(12, 6, &mut rng);
    let ids: Vec<i64> = (0..12).map(|i| (i / 3) as i64).collect();
    let config = LossConfig::new(0.3, Smoothing::None, 4).unwrap();
    let mined = batch_hard_mine(&emb, &ids).unwrap();
    let base = triplet_loss(&emb, &mined, &config).unwrap().value;
    let shift: Vec<f64> = (0..6).map(|_| rng.normal() * 5.0).collect();
    let mut moved = emb.clone();
    for r in 0..12 {
        for (v, s) in moved.row_mut(r).iter_mut().zip(shift.iter()) {
            *v += s;
        }
    }
    let mined2 = batch_hard_mine(&moved, &ids).unwrap();
    let shifted = triplet_loss(&moved, &mined2, &config).unwrap().value;
    assert!((base - shifted).abs() <= 1e-10, "translation moved the loss by {}", (base - shifted).abs());

    // softmax logit-shift invariance
    let logits = Matrix::random(5, 7, &mut rng);
    let labels = [0usize, 3, 6, 2, 5];
    let sconfig = LossConfig::new(0.3, Smoothing::Explicit(0.1), 7).unwrap();
    let sbase = smoothed_softmax_loss(&logits, &labels, &sconfig).unwrap().value;
    let mut shifted_logits = logits.clone();
    for r in 0..5 {
        let c = rng.normal() * 20.0;
        for v in shifted_logits.row_mut(r) {
            *v += c;
        }
    }
    let smoved = smoothed_softmax_loss(&shifted_logits, &labels, &sconfig).unwrap().value;
    assert!((sbase - smoved).abs() <= 1e-10);

    // ranking invariance under a monotone distance transform (uniform scale)
    let gallery = random_set(40, "g", 6, 3, &mut rng);
    let query = random_set(10, "q", 6, 3, &mut rng);
    let base_report = rank(&query, &gallery, Protocol::Plain).unwrap();
    for scale in [0.01, 3.0, 250.0] {
        let scale_set = |set: &EmbeddingSet, prefix: &str| {
            let rows: Vec<Vec<f64>> = (0..set.len())
                .map(|i| set.vectors.row(i).iter().map(|v| v * scale).collect())
                .collect();
            EmbeddingSet::new(
                Matrix::from_rows(&rows).unwrap(),
                (0..set.len()).map(|i| format!("{prefix}{i}")).collect(),
                set.identities.clone(),
                set.cameras.clone(),
            )
            .unwrap()
        };
        let scaled = rank(&scale_set(&query, "q"), &scale_set(&gallery, "g"), Protocol::Plain).unwrap();
        assert_eq!(base_report.per_query_ap, scaled.per_query_ap);
        assert_eq!(base_report.cmc, scaled.cmc);
    }

    // fusion channel provenance
    let fg = Tensor4::random(1, 6, 3, 3, &mut rng);
    let fl = Tensor4::random(1, 6, 3, 3, &mut rng);
    let masks = ChannelMasks::new(6);
    let fused = fuse(&fg, &fl, &masks).unwrap();
    let mut fl_perturbed = fl.clone();
    for ci in 3..6 {
        for hi in 0..3 {
            for wi in 0..3 {
                fl_perturbed.set(0, ci, hi, wi, 77.0);
            }
        }
    }
    assert_eq!(fuse(&fg, &fl_perturbed, &masks).unwrap(), fused);
    let mut fg_perturbed = fg.clone();
    for ci in 0..3 {
        for hi in 0..3 {
            for wi in 0..3 {
                fg_perturbed.set(0, ci, hi, wi, -77.0);
            }
        }
    }
    assert_eq!(fuse(&fg_perturbed, &fl, &masks).unwrap(), fused);
    // odd channel count: the middle channel belongs to the global branch
    let odd = ChannelMasks::new(5);
    assert_eq!(odd.global_mask[2], 1.0);

    // group norm with a single group equals layer norm
    let x = Tensor4::random(2, 6, 4, 4, &mut rng);
    let mut s1 = NormState::new(6);
    let mut s2 = NormState::new(6);
    let g = normalize(&x, &NormSpec::group(6), &mut s1, true).unwrap();
    let l = normalize(&x, &NormSpec::layer(), &mut s2, true).unwrap();
    for (a, b) in g.data().iter().zip(l.data().iter()) {
        assert!((a - b).abs() <= 1e-12);
    }
    println!("[PASS] criterion 9: translation/shift/monotone/provenance/GN-LN invariances hold");
}

// ---------------------------------------------------------------------------
// criterion 10: format round-trips
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_format_round_trips() {
    let mut rng = SplitMix64::new(97_000);
    for case in 0..5 {
        // tensor files
        let t = Tensor4::random(1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(6), 1 + rng.below(6), &mut rng);
        let text = write_tensor(&t);
        let back = read_tensor(&text).unwrap();
        assert_eq!(back, t, "tensor case {case}");
        assert_eq!(write_tensor(&back), text);
        // embeddings
        let set = random_set(3 + rng.below(8), "s", 4, 3, &mut rng);
        let etext = write_embeddings(&set);
        let eback = read_embeddings(&etext).unwrap();
        assert_eq!(write_embeddings(&eback), etext);
        // manifest
        let entries: Vec<ManifestEntry> = (0..3 + rng.below(5))
            .map(|i| ManifestEntry {
                sample_id: format!("s{i}"),
                identity: format!("id{}", rng.below(4)),
                camera: format!("c{}", rng.below(3)),
                path: format!("dir/t{i}.tensor"),
            })
            .collect();
        let mtext = write_manifest(&entries);
        assert_eq!(write_manifest(&read_manifest(&mtext).unwrap()), mtext);
        // checkpoint through a real model
        let model = Model::init(composite_config(), rng.next_u64()).unwrap();
        let ctext = write_checkpoint(&model.export_entries());
        let centries = read_checkpoint(&ctext).unwrap();
        assert_eq!(write_checkpoint(&centries), ctext);
        let mut loaded = Model::init(composite_config(), 0).unwrap();
        loaded.import_entries(&centries).unwrap();
        assert_eq!(loaded.flatten(), model.flatten());
        // model config
        let cfg_text = write_model_config(&model.config);
        let cfg = read_model_config(&cfg_text).unwrap();
        assert_eq!(write_model_config(&cfg), cfg_text);
    }
    println!("[PASS] criterion 10: tensor/embedding/manifest/checkpoint/config files round-trip byte-identically");
}
