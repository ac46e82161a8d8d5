//! Identity-balanced PK batch sampling, warmup/decay learning-rate
//! schedules, random-erasing augmentation, and a procedural synthetic
//! dataset for desk-scale experiments.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor4;

/// P identities x K instances per batch, drawn deterministically from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkSamplerConfig {
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl PkSamplerConfig {
    pub fn new(p: usize, k: usize, seed: u64) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::config(format!(
                "PK sampler needs P >= 2 and K >= 2, got P={p} K={k}"
            )));
        }
        Ok(PkSamplerConfig { p, k, seed })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }
}

/// Build one epoch of PK batches over `labels` (one label per sample).
///
/// Each round shuffles the identity list and walks it in chunks of P;
/// every identity contributes K instances per round, drawn from its own
/// shuffled pool with replacement when it owns fewer than K images. Rounds
/// repeat until the largest identity's pool has been cycled once, so every
/// identity appears at least once per epoch. Chunks short of P identities
/// are topped up with distinct identities reused from earlier in the round.
pub fn pk_sample(labels: &[i64], config: &PkSamplerConfig, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let mut by_identity: Vec<(i64, Vec<usize>)> = Vec::new();
    for (idx, &label) in labels.iter().enumerate() {
        match by_identity.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(idx),
            None => by_identity.push((label, vec![idx])),
        }
    }
    if by_identity.len() < config.p {
        return Err(Error::config(format!(
            "dataset has {} identities, sampler needs P={}",
            by_identity.len(),
            config.p
        )));
    }
    let mut rng = SplitMix64::new(config.seed).fork(epoch);
    // per-identity shuffled pools, consumed cyclically across rounds
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(by_identity.len());
    let mut cursors = vec![0usize; by_identity.len()];
    for (_, members) in &by_identity {
        let mut pool = members.clone();
        rng.shuffle(&mut pool);
        pools.push(pool);
    }
    let rounds = by_identity
        .iter()
        .map(|(_, m)| m.len().div_ceil(config.k))
        .max()
        .unwrap_or(1);
    let mut batches = Vec::new();
    for _ in 0..rounds {
        let mut id_order: Vec<usize> = (0..by_identity.len()).collect();
        rng.shuffle(&mut id_order);
        for chunk in id_order.chunks(config.p) {
            let mut chosen: Vec<usize> = chunk.to_vec();
            if chosen.len() < config.p {
                // top up with distinct identities from earlier in the round
                for &cand in &id_order {
                    if chosen.len() == config.p {
                        break;
                    }
                    if !chosen.contains(&cand) {
                        chosen.push(cand);
                    }
                }
            }
            let mut batch = Vec::with_capacity(config.batch_size());
            for &id_idx in &chosen {
                let pool = &pools[id_idx];
                for _ in 0..config.k {
                    batch.push(pool[cursors[id_idx] % pool.len()]);
                    cursors[id_idx] += 1;
                }
            }
            batches.push(batch);
        }
    }
    Ok(batches)
}

/// Learning-rate schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear ramp from 0.1x base at epoch 0 to base at epoch 10.
    Warmup1,
    /// Same endpoints but stepped, moving only on even epochs.
    Warmup2,
    /// No warmup; decay only.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub kind: ScheduleKind,
    pub warmup_epochs: usize,
    pub decay_gamma: f64,
    pub decay_period: usize,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, kind: ScheduleKind) -> Result<Self> {
        if base_lr <= 0.0 {
            return Err(Error::config(format!("base_lr {base_lr} must be > 0")));
        }
        Ok(ScheduleConfig {
            base_lr,
            kind,
            warmup_epochs: 10,
            decay_gamma: 0.6,
            decay_period: 20,
        })
    }
}

/// Learning rate at an epoch: warmup factor times step decay
/// (`gamma^floor(epoch / period)`).
pub fn lr_at(config: &ScheduleConfig, epoch: usize) -> f64 {
    let we = config.warmup_epochs;
    let warm = match config.kind {
        ScheduleKind::None => 1.0,
        ScheduleKind::Warmup1 => {
            let e = epoch.min(we);
            0.1 + 0.9 * e as f64 / we as f64
        }
        ScheduleKind::Warmup2 => {
            let e = epoch.min(we);
            let stepped = e - (e % 2);
            0.1 + 0.9 * stepped as f64 / we as f64
        }
    };
    let decays = (epoch / config.decay_period) as i32;
    config.base_lr * warm * config.decay_gamma.powi(decays)
}

/// What to write inside an erased rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EraseFill {
    /// Independent uniform noise in [0, 1) per value.
    UniformNoise,
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseConfig {
    pub probability: f64,
    /// Rectangle area as a fraction of the image area.
    pub area: (f64, f64),
    /// Rectangle aspect ratio range.
    pub aspect: (f64, f64),
    pub fill: EraseFill,
}

impl EraseConfig {
    pub fn new(probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::config(format!("erase probability {probability}")));
        }
        Ok(EraseConfig {
            probability,
            area: (0.02, 0.4),
            aspect: (0.3, 10.0 / 3.0),
            fill: EraseFill::UniformNoise,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("erase probability outside [0,1]"));
        }
        if !(self.area.0 > 0.0 && self.area.0 <= self.area.1) {
            return Err(Error::config("erase area range must satisfy 0 < lo <= hi"));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return Err(Error::config("erase aspect range must satisfy 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// What [`random_erase`] did to the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EraseOutcome {
    /// The probability draw said leave it alone.
    Skipped,
    /// One rectangle `(top, left, height, width)` was overwritten.
    Erased(usize, usize, usize, usize),
    /// No feasible rectangle after 100 draws; image unchanged.
    NoFit,
}

/// With probability `p`, overwrite one random rectangle of the given sample
/// (all channels) with the configured fill. The rectangle always lies fully
/// inside the image.
pub fn random_erase(
    image: &mut Tensor4,
    sample: usize,
    config: &EraseConfig,
    rng: &mut SplitMix64,
) -> Result<EraseOutcome> {
    config.validate()?;
    let (n, c, h, w) = image.shape();
    if sample >= n {
        return Err(Error::shape(format!("sample {sample} out of {n}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("random_erase on empty image"));
    }
    if rng.next_f64() >= config.probability {
        return Ok(EraseOutcome::Skipped);
    }
    let image_area = (h * w) as f64;
    for _ in 0..100 {
        let target_area = image_area * rng.range_f64(config.area.0, config.area.1);
        let aspect = rng.range_f64(config.aspect.0, config.aspect.1);
        let eh = (target_area * aspect).sqrt().round() as usize;
        let ew = (target_area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let top = rng.below(h - eh + 1);
        let left = rng.below(w - ew + 1);
        for ci in 0..c {
            for dy in 0..eh {
                for dx in 0..ew {
                    let v = match config.fill {
                        EraseFill::UniformNoise => rng.next_f64(),
                        EraseFill::Constant(k) => k,
                    };
                    image.set(sample, ci, top + dy, left + dx, v);
                }
            }
        }
        return Ok(EraseOutcome::Erased(top, left, eh, ew));
    }
    Ok(EraseOutcome::NoFit)
}

/// Mirror one sample left-right in place.
pub fn flip_horizontal(image: &mut Tensor4, sample: usize) {
    let (_, c, h, w) = image.shape();
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w / 2 {
                let a = image.get(sample, ci, hi, wi);
                let b = image.get(sample, ci, hi, w - 1 - wi);
                image.set(sample, ci, hi, wi, b);
                image.set(sample, ci, hi, w - 1 - wi, a);
            }
        }
    }
}

/// Bilinear resize of a whole batch to `out_h x out_w`.
pub fn resize_bilinear(image: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    let (n, c, h, w) = image.shape();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape("resize to/from empty image"));
    }
    let sy = if out_h > 1 { (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
    Ok(Tensor4::from_fn(n, c, out_h, out_w, |ni, ci, oy, ox| {
        let fy = oy as f64 * sy;
        let fx = ox as f64 * sx;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let v00 = image.get(ni, ci, y0, x0);
        let v01 = image.get(ni, ci, y0, x1);
        let v10 = image.get(ni, ci, y1, x0);
        let v11 = image.get(ni, ci, y1, x1);
        v00 * (1.0 - dy) * (1.0 - dx) + v01 * (1.0 - dy) * dx + v10 * dy * (1.0 - dx) + v11 * dy * dx
    }))
}

/// A generated dataset: one RGB tensor per sample plus labels and cameras.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Tensor4,
    pub labels: Vec<i64>,
    pub cameras: Vec<u32>,
    pub sample_ids: Vec<String>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Procedural stand-in for a vehicle re-id dataset.
///
/// Every identity owns a base color, a blob position, and a small motif
/// (a bright bar) at an identity-specific location. Instances jitter the
/// colors and positions, vary the blob scale, and may drop an occluding
/// rectangle over the image, so raw pixels are informative but not trivially
/// separable. Camera ids cycle over four synthetic cameras.
pub fn make_synthetic_dataset(
    num_identities: usize,
    images_per_identity: usize,
    image_size: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if num_identities == 0 || images_per_identity == 0 || image_size < 8 {
        return Err(Error::config(
            "synthetic dataset needs positive counts and image_size >= 8",
        ));
    }
    let s = image_size;
    let total = num_identities * images_per_identity;
    let mut rng = SplitMix64::new(seed);
    let mut images = Tensor4::zeros(total, 3, s, s);
    let mut labels = Vec::with_capacity(total);
    let mut cameras = Vec::with_capacity(total);
    let mut sample_ids = Vec::with_capacity(total);
    for id in 0..num_identities {
        // identity signature
        let base_color = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        let blob_cy = rng.range_f64(0.3, 0.7);
        let blob_cx = rng.range_f64(0.3, 0.7);
        let motif_y = rng.below(s - s / 4);
        let motif_x = rng.below(s - s / 4);
        let motif_channel = rng.below(3);
        for inst in 0..images_per_identity {
            let sample = id * images_per_identity + inst;
            let jitter = 0.08;
            let color: Vec<f64> = base_color
                .iter()
                .map(|c| (c + rng.range_f64(-jitter, jitter)).clamp(0.0, 1.0))
                .collect();
            let scale = rng.range_f64(0.7, 1.3);
            let cy = (blob_cy + rng.range_f64(-0.08, 0.08)) * s as f64;
            let cx = (blob_cx + rng.range_f64(-0.08, 0.08)) * s as f64;
            let radius = 0.3 * s as f64 * scale;
            for ci in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let noise = rng.range_f64(0.0, 0.15);
                        let dy = y as f64 - cy;
                        let dx = x as f64 - cx;
                        let inside = (dy * dy + dx * dx).sqrt() <= radius;
                        let v = if inside { color[ci] } else { 0.1 } + noise;
                        images.set(sample, ci, y, x, v.clamp(0.0, 1.0));
                    }
                }
            }
            // identity motif: a bright bar, jittered by a pixel or two
            let my = (motif_y as isize + rng.below(5) as isize - 2).clamp(0, (s - s / 4) as isize)
                as usize;
            let mx = (motif_x as isize + rng.below(5) as isize - 2).clamp(0, (s - s / 4) as isize)
                as usize;
            for y in my..my + s / 8 {
                for x in mx..mx + s / 4 {
                    images.set(sample, motif_channel, y, x, 1.0);
                }
            }
            // occlusion on roughly a third of the instances
            if rng.next_f64() < 0.35 {
                let oh = s / 4 + rng.below(s / 4);
                let ow = s / 4 + rng.below(s / 4);
                let oy = rng.below(s - oh + 1);
                let ox = rng.below(s - ow + 1);
                let shade = rng.next_f64() * 0.3;
                for ci in 0..3 {
                    for y in oy..oy + oh {
                        for x in ox..ox + ow {
                            images.set(sample, ci, y, x, shade);
                        }
                    }
                }
            }
            labels.push(id as i64);
            cameras.push((inst % 4) as u32);
            sample_ids.push(format!("id{id:03}_img{inst:03}"));
        }
    }
    Ok(SyntheticDataset {
        images,
        labels,
        cameras,
        sample_ids,
    })
}
