//! Built-in self checks behind the `selftest` CLI subcommand: gradient
//! checks, brute-force oracle comparisons, and protocol fixtures. Each check
//! is independent and reports pass/fail plus a one-line detail.

use crate::attention::{fuse, global_attention, ChannelMasks, GAParams, LAParams};
use crate::attention::{
    fuse_backward, global_attention_backward, global_attention_forward, local_attention_backward,
    local_attention_forward,
};
use crate::backbone::{Model, ModelConfig, StageSpec, StemSpec};
use crate::data::{lr_at, ScheduleConfig, ScheduleKind};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_multi_step, ClosureFn, COMPOSITE_STEPS};
use crate::losses::{
    batch_hard_mine, pairwise_distances, smoothed_softmax_loss, smoothed_targets, triplet_loss,
    trisoft_loss, LossConfig, Smoothing,
};
use crate::norms::{norm_backward, normalize, normalize_forward, NormSpec, NormState};
use crate::reid::{rank, EmbeddingSet, Protocol};
use crate::rng::SplitMix64;
use crate::tensor::{conv2d, ConvKernel, Matrix, Tensor4};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &str, outcome: Result<String>) -> CheckResult {
        match outcome {
            Ok(detail) => CheckResult {
                name: name.to_string(),
                passed: true,
                detail,
            },
            Err(e) => CheckResult {
                name: name.to_string(),
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grads,
    Oracles,
    Protocol,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Suite> {
        match s {
            "grads" => Some(Suite::Grads),
            "oracles" => Some(Suite::Oracles),
            "protocol" => Some(Suite::Protocol),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

pub fn run_suite(suite: Suite) -> Vec<CheckResult> {
    let mut results = Vec::new();
    if matches!(suite, Suite::Grads | Suite::All) {
        results.extend(grads_suite());
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        results.extend(oracles_suite(&LossConfig::new(0.3, Smoothing::None, 4).unwrap()));
    }
    if matches!(suite, Suite::Protocol | Suite::All) {
        results.extend(protocol_suite());
    }
    results
}

fn fail(context: String) -> crate::error::Error {
    crate::error::Error::InvalidConfig { context }
}

fn check_grad_report(report: crate::gradcheck::GradCheckReport, tol: f64) -> Result<String> {
    if report.passed {
        Ok(format!("max rel error {:.2e} <= {tol:.0e}", report.max_rel_error))
    } else {
        Err(fail(format!(
            "max rel error {:.2e} > {tol:.0e} at {:?}",
            report.max_rel_error,
            report.worst()
        )))
    }
}

fn grads_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(CheckResult::from("grads.triplet", triplet_grad_check(3)));
    out.push(CheckResult::from("grads.softmax", softmax_grad_check(3)));
    for (name, spec) in [
        ("grads.norm.layer", NormSpec::layer()),
        ("grads.norm.group", NormSpec::group(2)),
        ("grads.norm.batch", NormSpec::batch()),
        ("grads.norm.l2", NormSpec::l2()),
    ] {
        out.push(CheckResult::from(name, norm_grad_check(spec, 3)));
    }
    out.push(CheckResult::from("grads.global_attention", ga_grad_check(2)));
    out.push(CheckResult::from("grads.local_attention", la_grad_check(2)));
    out.push(CheckResult::from("grads.fusion", fuse_grad_check(2)));
    out.push(CheckResult::from("grads.full_composite", composite_grad_check(2)));
    out
}

fn composite_grad_check(seeds: u64) -> Result<String> {
    let config = ModelConfig {
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
    };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let model0 = Model::init(config.clone(), 10_000 + seed)?;
        let mut rng = SplitMix64::new(20_000 + seed);
        let images = Tensor4::random(4, 3, 8, 8, &mut rng);
        let ids = vec![0i64, 0, 1, 1];
        let loss_config = LossConfig::new(0.3, Smoothing::Explicit(0.1), 3)?;
        let flat0 = model0.flatten();
        let value = {
            let model0 = model0.clone();
            let images = images.clone();
            let ids = ids.clone();
            move |p: &[f64]| -> Result<f64> {
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
            move |p: &[f64]| -> Result<Vec<f64>> {
                let mut model = model0.clone();
                model.assign_flat(p)?;
                let pass = model.forward(&images, true)?;
                let loss = trisoft_loss(&pass.triplet_features, &pass.logits, &ids, &loss_config)?;
                Ok(model.backward(&pass, &loss.embeddings_grad, &loss.logits_grad)?.flatten())
            }
        };
        let report =
            grad_check_multi_step(&ClosureFn { value, gradient }, &flat0, 1e-3, &COMPOSITE_STEPS)?;
        if !report.passed {
            return Err(fail(format!(
                "composite seed {seed}: max rel error {:.3e} at {:?}",
                report.max_rel_error,
                report.worst()
            )));
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

fn triplet_grad_check(seeds: u64) -> Result<String> {
    let config = LossConfig::new(0.3, Smoothing::None, 3)?;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(1000 + seed);
        let emb0 = Matrix::random(9, 5, &mut rng);
        let ids: Vec<i64> = (0..9).map(|i| (i / 3) as i64).collect();
        let value = {
            let ids = ids.clone();
            move |p: &[f64]| -> Result<f64> {
                let emb = Matrix::from_vec(9, 5, p.to_vec())?;
                let mined = batch_hard_mine(&emb, &ids)?;
                Ok(triplet_loss(&emb, &mined, &config)?.value)
            }
        };
        let gradient = {
            let ids = ids.clone();
            move |p: &[f64]| -> Result<Vec<f64>> {
                let emb = Matrix::from_vec(9, 5, p.to_vec())?;
                let mined = batch_hard_mine(&emb, &ids)?;
                Ok(triplet_loss(&emb, &mined, &config)?.embeddings_grad.data().to_vec())
            }
        };
        let report = grad_check(&ClosureFn { value, gradient }, emb0.data(), 1e-4, 1e-5)?;
        if !report.passed {
            return check_grad_report(report, 1e-4);
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

fn softmax_grad_check(seeds: u64) -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let config = LossConfig::new(0.3, Smoothing::Explicit(0.1), 5)?;
        let mut rng = SplitMix64::new(2000 + seed);
        let logits0 = Matrix::random(4, 5, &mut rng);
        let labels = vec![0usize, 4, 2, 1];
        let value = {
            let labels = labels.clone();
            move |p: &[f64]| -> Result<f64> {
                let logits = Matrix::from_vec(4, 5, p.to_vec())?;
                Ok(smoothed_softmax_loss(&logits, &labels, &config)?.value)
            }
        };
        let gradient = {
            let labels = labels.clone();
            move |p: &[f64]| -> Result<Vec<f64>> {
                let logits = Matrix::from_vec(4, 5, p.to_vec())?;
                Ok(smoothed_softmax_loss(&logits, &labels, &config)?.logits_grad.data().to_vec())
            }
        };
        let report = grad_check(&ClosureFn { value, gradient }, logits0.data(), 1e-4, 1e-5)?;
        if !report.passed {
            return check_grad_report(report, 1e-4);
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

fn norm_grad_check(spec: NormSpec, seeds: u64) -> Result<String> {
    let (n, c, h, w) = (2usize, 4usize, 3usize, 3usize);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(3000 + seed);
        let x0 = Tensor4::random(n, c, h, w, &mut rng);
        let weights: Vec<f64> = (0..n * c * h * w).map(|_| rng.normal()).collect();
        let value = {
            let weights = weights.clone();
            move |p: &[f64]| -> Result<f64> {
                let t = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                let mut state = NormState::new(c);
                let out = normalize(&t, &spec, &mut state, true)?;
                Ok(out.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum())
            }
        };
        let gradient = {
            let weights = weights.clone();
            move |p: &[f64]| -> Result<Vec<f64>> {
                let t = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                let mut state = NormState::new(c);
                let fwd = normalize_forward(&t, &spec, &mut state, true)?;
                let upstream = Tensor4::from_vec(n, c, h, w, weights.clone())?;
                Ok(norm_backward(&fwd.ctx, &upstream)?.input.data().to_vec())
            }
        };
        let report = grad_check(&ClosureFn { value, gradient }, x0.data(), 1e-4, 1e-5)?;
        if !report.passed {
            return check_grad_report(report, 1e-4);
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

fn ga_grad_check(seeds: u64) -> Result<String> {
    let (n, c, h, w) = (1usize, 2usize, 4usize, 4usize);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(4000 + seed);
        let f0 = Tensor4::random(n, c, h, w, &mut rng);
        let params = GAParams::he_init(c, c, &mut rng)?;
        let value = {
            let params = params.clone();
            move |p: &[f64]| -> Result<f64> {
                let f = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                Ok(global_attention(&f, &params)?.data().iter().sum())
            }
        };
        let gradient = {
            let params = params.clone();
            move |p: &[f64]| -> Result<Vec<f64>> {
                let f = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                let fwd = global_attention_forward(&f, &params)?;
                let ones = Tensor4::filled(n, c, h, w, 1.0);
                Ok(global_attention_backward(&fwd.ctx, &params, &ones)?.input.data().to_vec())
            }
        };
        let report = grad_check(&ClosureFn { value, gradient }, f0.data(), 1e-4, 1e-5)?;
        if !report.passed {
            return check_grad_report(report, 1e-4);
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

fn la_grad_check(seeds: u64) -> Result<String> {
    let (n, c, h, w) = (1usize, 4usize, 4usize, 4usize);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(5000 + seed);
        let f0 = Tensor4::random(n, c, h, w, &mut rng);
        let params = LAParams::he_init(c, 2, 3, &mut rng)?;
        let value = {
            let params = params.clone();
            move |p: &[f64]| -> Result<f64> {
                let f = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                Ok(crate::attention::local_attention(&f, &params)?.data().iter().sum())
            }
        };
        let gradient = {
            let params = params.clone();
            move |p: &[f64]| -> Result<Vec<f64>> {
                let f = Tensor4::from_vec(n, c, h, w, p.to_vec())?;
                let fwd = local_attention_forward(&f, &params)?;
                let ones = Tensor4::filled(n, c, h, w, 1.0);
                Ok(local_attention_backward(&fwd.ctx, &params, &ones)?.input.data().to_vec())
            }
        };
        let report = grad_check(&ClosureFn { value, gradient }, f0.data(), 1e-4, 1e-5)?;
        if !report.passed {
            return check_grad_report(report, 1e-4);
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

fn fuse_grad_check(seeds: u64) -> Result<String> {
    let (n, c, h, w) = (1usize, 4usize, 3usize, 3usize);
    let masks = ChannelMasks::new(c);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = SplitMix64::new(6000 + seed);
        let len = n * c * h * w;
        let mut flat: Vec<f64> = Vec::with_capacity(2 * len);
        for _ in 0..2 * len {
            flat.push(rng.normal());
        }
        let weights: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        let value = {
            let masks = masks.clone();
            let weights = weights.clone();
            move |p: &[f64]| -> Result<f64> {
                let fg = Tensor4::from_vec(n, c, h, w, p[..len].to_vec())?;
                let fl = Tensor4::from_vec(n, c, h, w, p[len..].to_vec())?;
                let fused = fuse(&fg, &fl, &masks)?;
                Ok(fused.data().iter().zip(weights.iter()).map(|(a, b)| a * b).sum())
            }
        };
        let gradient = {
            let masks = masks.clone();
            let weights = weights.clone();
            move |_p: &[f64]| -> Result<Vec<f64>> {
                let upstream = Tensor4::from_vec(n, c, h, w, weights.clone())?;
                let (gg, gl) = fuse_backward(&upstream, &masks)?;
                let mut flat = gg.data().to_vec();
                flat.extend_from_slice(gl.data());
                Ok(flat)
            }
        };
        let report = grad_check(&ClosureFn { value, gradient }, &flat, 1e-6, 1e-5)?;
        if !report.passed {
            return check_grad_report(report, 1e-6);
        }
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max rel error {worst:.2e} over {seeds} seeds"))
}

/// Oracle checks; `loss_config` is injectable so the negative-control test
/// can knock the hinge out and watch the fixture fail.
pub fn oracles_suite(loss_config: &LossConfig) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(CheckResult::from("oracles.conv_direct_loop", conv_oracle(20)));
    out.push(CheckResult::from("oracles.pairwise_direct_loop", pairwise_oracle(10)));
    out.push(CheckResult::from("oracles.mining_exhaustive", mining_oracle(60)));
    out.push(CheckResult::from("oracles.ranking_naive", ranking_oracle(15)));
    out.push(CheckResult::from(
        "oracles.triplet_hinge_fixture",
        triplet_hinge_fixture(loss_config),
    ));
    out.push(CheckResult::from(
        "oracles.gradcheck_negative_control",
        gradcheck_negative_control(),
    ));
    out
}

fn conv_oracle(cases: u64) -> Result<String> {
    for seed in 0..cases {
        let mut rng = SplitMix64::new(7000 + seed);
        let n = 1 + rng.below(2);
        let ic = 1 + rng.below(3);
        let oc = 1 + rng.below(3);
        let k = [1usize, 3, 5][rng.below(3)];
        let stride = 1 + rng.below(2);
        let pad = rng.below(k / 2 + 1);
        let h = k + rng.below(5);
        let w = k + rng.below(5);
        let input = Tensor4::random(n, ic, h, w, &mut rng);
        let mut kernel = ConvKernel::zeros(oc, ic, k, k, stride, pad)?;
        for v in &mut kernel.weights {
            *v = rng.normal();
        }
        for v in &mut kernel.bias {
            *v = rng.normal();
        }
        let got = conv2d(&input, &kernel)?;
        // independent direct loop, ic-major accumulation order
        let (oh, ow) = kernel.output_dims(h, w)?;
        for ni in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = kernel.bias[o];
                        for ci in 0..ic {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                        acc += input.get(ni, ci, iy as usize, ix as usize)
                                            * kernel.weights[kernel.weight_index(o, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                        if (got.get(ni, o, oy, ox) - acc).abs() > 1e-12 {
                            return Err(fail(format!(
                                "conv mismatch at seed {seed}: {} vs {acc}",
                                got.get(ni, o, oy, ox)
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{cases} random shapes match the direct loop"))
}

fn pairwise_oracle(cases: u64) -> Result<String> {
    for seed in 0..cases {
        let mut rng = SplitMix64::new(7500 + seed);
        let emb = Matrix::random(12, 5, &mut rng);
        let d = pairwise_distances(&emb)?;
        for i in 0..12 {
            for j in 0..12 {
                let direct: f64 = emb
                    .row(i)
                    .iter()
                    .zip(emb.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if (d.get(i, j) - direct).abs() > 1e-10 {
                    return Err(fail(format!("pairwise mismatch at seed {seed}")));
                }
            }
        }
    }
    Ok(format!("{cases} random matrices match the direct loop"))
}

fn mining_oracle(cases: u64) -> Result<String> {
    for seed in 0..cases {
        let mut rng = SplitMix64::new(8000 + seed);
        let p = 2 + rng.below(5);
        let k = 2 + rng.below(5);
        let rows = p * k;
        let emb = Matrix::random(rows, 4, &mut rng);
        let ids: Vec<i64> = (0..rows).map(|i| (i / k) as i64).collect();
        let mined = batch_hard_mine(&emb, &ids)?;
        // exhaustive scan with the same tie-break
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
            let (p_idx, _) = best_pos.expect("every id has k >= 2");
            let (n_idx, _) = best_neg.expect("p >= 2");
            if t.hardest_positive != p_idx || t.hardest_negative != n_idx {
                return Err(fail(format!(
                    "mining mismatch at seed {seed} anchor {a}: ({}, {}) vs ({p_idx}, {n_idx})",
                    t.hardest_positive, t.hardest_negative
                )));
            }
        }
    }
    Ok(format!("{cases} random PK batches match the exhaustive scan"))
}

fn ranking_oracle(cases: u64) -> Result<String> {
    for seed in 0..cases {
        let mut rng = SplitMix64::new(9000 + seed);
        let nq = 3 + rng.below(6);
        let ng = 12 + rng.below(20);
        let n_ids = 4 + rng.below(4);
        let build = |count: usize, prefix: &str, rng: &mut SplitMix64| -> Result<EmbeddingSet> {
            let rows: Vec<Vec<f64>> = (0..count)
                .map(|_| (0..3).map(|_| rng.normal()).collect())
                .collect();
            EmbeddingSet::new(
                Matrix::from_rows(&rows)?,
                (0..count).map(|i| format!("{prefix}{i}")).collect(),
                (0..count).map(|_| format!("id{}", rng.below(n_ids))).collect(),
                (0..count).map(|_| format!("c{}", rng.below(3))).collect(),
            )
        };
        let query = build(nq, "q", &mut rng)?;
        let gallery = build(ng, "g", &mut rng)?;
        for protocol in [Protocol::Plain, Protocol::Veri] {
            let report = rank(&query, &gallery, protocol)?;
            // naive: sort (distance, index) tuples per query and scan
            let mut aps = Vec::new();
            for qi in 0..nq {
                let mut entries: Vec<(f64, usize, bool)> = Vec::new();
                for gi in 0..ng {
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
                    continue;
                }
                let mut hits = 0;
                let mut ap = 0.0;
                for (pos, e) in entries.iter().enumerate() {
                    if e.2 {
                        hits += 1;
                        ap += hits as f64 / (pos + 1) as f64;
                    }
                }
                aps.push(ap / positives as f64);
            }
            let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
            if (report.map - map).abs() > 1e-12 {
                return Err(fail(format!(
                    "ranking mismatch at seed {seed} {protocol:?}: {} vs {map}",
                    report.map
                )));
            }
        }
    }
    Ok(format!("{cases} random query/gallery pairs match the naive evaluator"))
}

fn triplet_hinge_fixture(loss_config: &LossConfig) -> Result<String> {
    // satisfied margin: d_ap = 0, d_an = 3 -> hinged loss must vanish
    let emb = Matrix::from_rows(&[
        vec![0.0, 0.0],
        vec![0.0, 0.0],
        vec![3.0, 0.0],
        vec![3.0, 0.0],
    ])?;
    let ids = vec![0i64, 0, 1, 1];
    let mined = batch_hard_mine(&emb, &ids)?;
    let frag = triplet_loss(&emb, &mined, loss_config)?;
    if frag.value.abs() > 1e-12 {
        return Err(fail(format!(
            "satisfied-margin triplet loss is {}, expected 0",
            frag.value
        )));
    }
    Ok("satisfied margin gives zero loss".to_string())
}

fn gradcheck_negative_control() -> Result<String> {
    let wrong = ClosureFn {
        value: |p: &[f64]| Ok(p.iter().map(|x| x * x).sum()),
        gradient: |p: &[f64]| Ok(p.iter().map(|x| 4.0 * x).collect()),
    };
    let report = grad_check(&wrong, &[3.0, -1.0], 1e-4, 1e-5)?;
    if report.passed {
        return Err(fail("deliberately wrong gradient passed the check".into()));
    }
    Ok("deliberately wrong gradient is rejected".to_string())
}

fn protocol_suite() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(CheckResult::from("protocol.eq3_targets_n576", || -> Result<String> {
        let config = LossConfig::new(0.3, Smoothing::OneOverN, 576)?;
        let q = smoothed_targets(0, &config)?;
        if q[0] != 1.0 - 1.0 / 576.0 || q[1] != 1.0 / 576.0 {
            return Err(fail(format!("targets ({}, {})", q[0], q[1])));
        }
        Ok(format!("targets ({}, {})", q[0], q[1]))
    }()));
    out.push(CheckResult::from("protocol.masks_c4", || -> Result<String> {
        let masks = ChannelMasks::new(4);
        if masks.global_mask != vec![0.0, 0.0, 1.0, 1.0] || masks.local_mask != vec![1.0, 1.0, 0.0, 0.0] {
            return Err(fail(format!("{masks:?}")));
        }
        Ok("masks ((0,0,1,1),(1,1,0,0))".to_string())
    }()));
    out.push(CheckResult::from("protocol.ga_half_gate", || -> Result<String> {
        let mut rng = SplitMix64::new(11000);
        let f = Tensor4::random(1, 3, 4, 4, &mut rng);
        let mut params = GAParams::he_init(3, 3, &mut rng)?;
        params.conv2.weights.iter_mut().for_each(|w| *w = 0.0);
        params.conv2.bias.iter_mut().for_each(|b| *b = 0.0);
        let out = global_attention(&f, &params)?;
        for (o, x) in out.data().iter().zip(f.data().iter()) {
            if *o != 0.5 * x {
                return Err(fail(format!("{o} != 0.5 * {x}")));
            }
        }
        Ok("zeroed second conv gives exactly 0.5 F".to_string())
    }()));
    out.push(CheckResult::from("protocol.schedule_fixtures", || -> Result<String> {
        let config = ScheduleConfig::new(1e-4, ScheduleKind::Warmup1)?;
        for (epoch, want) in [(0usize, 1e-5), (10, 1e-4), (20, 6e-5), (40, 3.6e-5)] {
            let got = lr_at(&config, epoch);
            if (got - want).abs() > 1e-15 {
                return Err(fail(format!("lr({epoch}) = {got}, want {want}")));
            }
        }
        Ok("warmup1 endpoints and decay points exact".to_string())
    }()));
    out.push(CheckResult::from("protocol.veri_filter", || -> Result<String> {
        let query = EmbeddingSet::new(
            Matrix::from_rows(&[vec![0.0, 0.0]])?,
            vec!["q0".into()],
            vec!["a".into()],
            vec!["c1".into()],
        )?;
        let gallery = EmbeddingSet::new(
            Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0], vec![1.0, 0.0]])?,
            vec!["g0".into(), "g1".into(), "g2".into()],
            vec!["a".into(), "a".into(), "b".into()],
            vec!["c1".into(), "c2".into(), "c1".into()],
        )?;
        let report = rank(&query, &gallery, Protocol::Veri)?;
        if (report.per_query_ap[0] - 0.5).abs() > 1e-15 {
            return Err(fail(format!("veri AP {}", report.per_query_ap[0])));
        }
        Ok("same-id same-camera twin is excluded".to_string())
    }()));
    out.push(CheckResult::from("protocol.gn_equals_ln", || -> Result<String> {
        let mut rng = SplitMix64::new(12000);
        let x = Tensor4::random(1, 6, 4, 4, &mut rng);
        let mut s1 = NormState::new(6);
        let mut s2 = NormState::new(6);
        let g = normalize(&x, &NormSpec::group(6), &mut s1, true)?;
        let l = normalize(&x, &NormSpec::layer(), &mut s2, true)?;
        for (a, b) in g.data().iter().zip(l.data().iter()) {
            if (a - b).abs() > 1e-12 {
                return Err(fail(format!("{a} vs {b}")));
            }
        }
        Ok("group norm with one group equals layer norm".to_string())
    }()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_is_green() {
        let results = run_suite(Suite::All);
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn removing_the_hinge_breaks_the_oracle_suite() {
        let broken = LossConfig::new(0.3, Smoothing::None, 4)
            .unwrap()
            .with_hinge(false);
        let results = oracles_suite(&broken);
        let fixture = results
            .iter()
            .find(|r| r.name == "oracles.triplet_hinge_fixture")
            .unwrap();
        assert!(!fixture.passed, "hinge removal must fail the fixture");
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse("grads"), Some(Suite::Grads));
        assert_eq!(Suite::parse("oracles"), Some(Suite::Oracles));
        assert_eq!(Suite::parse("protocol"), Some(Suite::Protocol));
        assert_eq!(Suite::parse("all"), Some(Suite::All));
        assert_eq!(Suite::parse("bogus"), None);
    }
}
