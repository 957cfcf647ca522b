//! Training: losses, the Adam optimizer, the learning-rate schedule,
//! geometric data augmentation, and the epoch loop with checkpointing.
//!
//! Supervision is binary cross-entropy on the saliency logits against the
//! ground-truth mask, plus the same loss on the edge logits against an
//! edge mask extracted from the ground truth. Both terms sum over pixels
//! and average over the batch.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{batch_tensors, build_sample, save_checkpoint, Plane, Sample, TensorStore};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelOutput, SwinNet};
use crate::nn::ParamVisit;
use crate::tensor::{ops, Elem, Grads, Tape, Tensor};

pub const DEFAULT_LR: f64 = 5e-5;
pub const DEFAULT_EPOCHS: usize = 200;

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_e: f64,
    pub total: f64,
}

/// Joint loss over both heads. `edge` supervision is required exactly when
/// the model produced edge logits.
pub fn total_loss<T: Elem>(
    out: &ModelOutput<T>,
    gt: &Tensor<T>,
    edge: &Tensor<T>,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let l_s = ops::bce_with_logits(&out.s_logits, gt)?;
    match &out.se_logits {
        Some(se) => {
            let l_e = ops::bce_with_logits(se, edge)?;
            let total = ops::add(&l_s, &l_e)?;
            Ok((
                total.clone(),
                LossBreakdown {
                    l_s: l_s.item()?.as_f64(),
                    l_e: l_e.item()?.as_f64(),
                    total: total.item()?.as_f64(),
                },
            ))
        }
        None => Ok((
            l_s.clone(),
            LossBreakdown {
                l_s: l_s.item()?.as_f64(),
                l_e: 0.0,
                total: l_s.item()?.as_f64(),
            },
        )),
    }
}

/// Step decay: one order of magnitude every 100 epochs.
pub fn lr_schedule(lr0: f64, epoch: usize) -> f64 {
    lr0 * 10f64.powi(-((epoch / 100) as i32))
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction; first/second moments are kept in f64.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// Apply one update to every trainable parameter and drop all tape
    /// links. Fails on non-finite gradients, leaving parameters untouched
    /// for the failing tensor onward.
    pub fn step<T: Elem, M: ParamVisit<T>>(
        &mut self,
        model: &mut M,
        grads: &Grads<T>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut failure: Option<Error> = None;
        model.visit("", &mut |name, param, trainable| {
            if failure.is_some() {
                return;
            }
            if !trainable {
                *param = param.detach();
                return;
            }
            let g = match grads.for_tensor(param) {
                Ok(g) => g,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            if g.iter().any(|v| !v.as_f64().is_finite()) {
                failure = Some(Error::numeric(format!(
                    "non-finite gradient in parameter {name}"
                )));
                return;
            }
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            *param = param.detach();
            let data = param.data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] = T::of_f64(data[i].as_f64() - lr * mh / (vh.sqrt() + eps));
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// A sample before resizing/normalization, so geometric augmentation can
/// run at native resolution and the edge target can be recomputed after.
pub struct RawSample {
    pub id: String,
    pub rgb: [Plane; 3],
    pub aux: Plane,
    pub gt: Plane,
}

fn hflip(p: &Plane) -> Plane {
    let mut data = Vec::with_capacity(p.data.len());
    for r in 0..p.h {
        for c in 0..p.w {
            data.push(p.at(r, p.w - 1 - c));
        }
    }
    Plane {
        h: p.h,
        w: p.w,
        data,
    }
}

/// Quarter turn counter-clockwise: (r, c) -> (c, H-1-r) reads from the
/// source so width and height swap.
fn rot90(p: &Plane) -> Plane {
    let (h, w) = (p.h, p.w);
    let mut data = Vec::with_capacity(h * w);
    for r in 0..w {
        for c in 0..h {
            data.push(p.at(h - 1 - c, r));
        }
    }
    Plane { h: w, w: h, data }
}

fn clip_border(p: &Plane, top: usize, bottom: usize, left: usize, right: usize, nearest: bool) -> Plane {
    let (h, w) = (p.h, p.w);
    let (nh, nw) = (h - top - bottom, w - left - right);
    let mut data = Vec::with_capacity(nh * nw);
    for r in top..h - bottom {
        data.extend_from_slice(&p.data[r * w + left..r * w + w - right]);
    }
    let cropped = Plane {
        h: nh,
        w: nw,
        data,
    };
    if nearest {
        cropped.resize_nearest(h, w)
    } else {
        cropped.resize_bilinear(h, w)
    }
}

/// Random geometric augmentation, applied identically to all planes of a
/// sample: horizontal flip (p = 0.5), a uniform multiple of 90 degrees,
/// and with p = 0.5 a border clip of up to 10% per side followed by a
/// resize back to the original extent (nearest-neighbor for the mask).
pub fn augment(sample: &RawSample, rng: &mut ChaCha8Rng) -> RawSample {
    let flip = rng.gen_bool(0.5);
    let quarter_turns = rng.gen_range(0..4u8);
    let clip = rng.gen_bool(0.5);
    let (h, w) = (sample.gt.h, sample.gt.w);
    let margins = if clip {
        [
            rng.gen_range(0..=h / 10),
            rng.gen_range(0..=h / 10),
            rng.gen_range(0..=w / 10),
            rng.gen_range(0..=w / 10),
        ]
    } else {
        [0; 4]
    };
    let apply = |p: &Plane, nearest: bool| -> Plane {
        let mut q = if flip { hflip(p) } else { p.clone() };
        for _ in 0..quarter_turns {
            q = rot90(&q);
        }
        if margins.iter().any(|&m| m > 0) {
            // margins follow the plane through rotation: recompute against
            // the current extent
            let (mh, mw) = (q.h / 10, q.w / 10);
            q = clip_border(
                &q,
                margins[0].min(mh),
                margins[1].min(mh),
                margins[2].min(mw),
                margins[3].min(mw),
                nearest,
            );
        }
        q
    };
    RawSample {
        id: sample.id.clone(),
        rgb: [
            apply(&sample.rgb[0], false),
            apply(&sample.rgb[1], false),
            apply(&sample.rgb[2], false),
        ],
        aux: apply(&sample.aux, false),
        gt: apply(&sample.gt, true),
    }
}

/// Preprocess a raw sample for the model, optionally augmenting first.
/// The edge target is extracted from the (possibly transformed) mask.
pub fn prepare(
    raw: &RawSample,
    size: usize,
    augment_flag: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if augment_flag {
        let a = augment(raw, rng);
        build_sample(&a.id, &a.rgb, &a.aux, &a.gt, size)
    } else {
        build_sample(&raw.id, &raw.rgb, &raw.aux, &raw.gt, size)
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub augment: bool,
    /// write a checkpoint every this many epochs (and after the last)
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr0: DEFAULT_LR,
            seed: 0,
            augment: true,
            checkpoint_every: 50,
        }
    }
}

/// Snapshot all model tensors (trainable and running statistics) as f32.
pub fn model_tensors<T: Elem, M: ParamVisit<T>>(model: &mut M) -> TensorStore {
    let mut out = BTreeMap::new();
    model.visit("", &mut |name, t, _| {
        out.insert(
            name.to_string(),
            (
                t.shape().to_vec(),
                t.data().iter().map(|v| v.as_f64() as f32).collect(),
            ),
        );
    });
    out
}

/// Load a tensor snapshot back into the model; every name and shape must
/// match exactly in both directions.
pub fn load_model_tensors<T: Elem, M: ParamVisit<T>>(
    model: &mut M,
    tensors: &TensorStore,
) -> Result<()> {
    let mut failure: Option<Error> = None;
    let mut used = 0usize;
    model.visit("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match tensors.get(name) {
            Some((shape, data)) if shape == t.shape() => {
                used += 1;
                *t = Tensor::from_vec(shape, data.iter().map(|&v| T::of_f64(v as f64)).collect())
                    .expect("shape/data agree");
            }
            Some((shape, _)) => {
                failure = Some(Error::CheckpointMismatch(format!(
                    "tensor {name}: stored shape {shape:?} vs model shape {:?}",
                    t.shape()
                )));
            }
            None => {
                failure = Some(Error::CheckpointMismatch(format!(
                    "tensor {name} missing from checkpoint"
                )));
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if used != tensors.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} tensors but the model consumed {used}",
            tensors.len()
        )));
    }
    Ok(())
}

/// Run one optimization step over a prepared batch. Returns the loss
/// breakdown; the model is left detached.
pub fn train_step(
    model: &mut SwinNet<f32>,
    opt: &mut Adam,
    batch: &[&Sample],
    lr: f64,
) -> Result<LossBreakdown> {
    let (rgb, aux, gt, edge) = batch_tensors(batch)?;
    let tape = Tape::new();
    model.attach(&tape);
    let result = (|| {
        let out = model.forward(&rgb, &aux, true)?;
        let (loss, breakdown) = total_loss(&out, &gt, &edge)?;
        if !breakdown.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss on batch {:?}",
                batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>()
            )));
        }
        let grads = tape.backward(&loss)?;
        opt.step(model, &grads, lr)?;
        Ok(breakdown)
    })();
    // on any failure the parameters may still carry tape links
    if result.is_err() {
        model.detach_params();
    }
    result
}

/// Full training loop: seeded shuffling, per-step logging
/// (`epoch step l_e l_s total lr`, space separated), periodic
/// checkpoints named `checkpoint_ep{N}.swnt` under `out_dir`.
pub fn train_loop(
    model: &mut SwinNet<f32>,
    model_cfg: &ModelConfig,
    data: &[RawSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epochs must be positive"));
    }
    let size = model_cfg.backbone().img_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new();
    let mut last = LossBreakdown::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr0, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        // Fisher-Yates with the run RNG
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let prepared: Vec<Sample> = chunk
                .iter()
                .map(|&i| prepare(&data[i], size, cfg.augment, &mut rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = prepared.iter().collect();
            last = train_step(model, &mut opt, &refs, lr)?;
            writeln!(
                log,
                "{epoch} {step} {:.6} {:.6} {:.6} {lr:e}",
                last.l_e, last.l_s, last.total
            )
            .map_err(|e| Error::io("<log>", e))?;
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        if let Some(dir) = out_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 || last_epoch {
                let path = dir.join(format!("checkpoint_ep{}.swnt", epoch + 1));
                save_checkpoint(&path, model_cfg, &model_tensors(model))?;
            }
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, Scale};

    #[test]
    fn lr_schedule_decays_by_decades() {
        assert_eq!(lr_schedule(5e-5, 0), 5e-5);
        assert_eq!(lr_schedule(5e-5, 99), 5e-5);
        assert!((lr_schedule(5e-5, 100) - 5e-6).abs() < 1e-18);
        assert!((lr_schedule(5e-5, 250) - 5e-7).abs() < 1e-19);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // with bias correction, the very first update is lr * g/(|g| + ~0)
        struct One {
            p: Tensor<f64>,
        }
        impl ParamVisit<f64> for One {
            fn visit(&mut self, _prefix: &str, f: &mut crate::nn::ParamFn<'_, f64>) {
                f("p", &mut self.p, true);
            }
        }
        let mut m = One {
            p: Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(),
        };
        let tape = Tape::new();
        m.attach(&tape);
        // loss = 3*p0 - 0.5*p1
        let w = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
        let loss = ops::sum_all(&ops::mul(&m.p, &w).unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut opt = Adam::new();
        opt.step(&mut m, &grads, 0.01).unwrap();
        assert!((m.p.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((m.p.data()[1] - (-2.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        struct One {
            p: Tensor<f64>,
        }
        impl ParamVisit<f64> for One {
            fn visit(&mut self, _prefix: &str, f: &mut crate::nn::ParamFn<'_, f64>) {
                f("p", &mut self.p, true);
            }
        }
        let mut m = One {
            p: Tensor::from_vec(&[1], vec![10.0]).unwrap(),
        };
        let mut opt = Adam::new();
        for _ in 0..2000 {
            let tape = Tape::new();
            m.attach(&tape);
            let d = ops::add_scalar(&m.p, -3.0).unwrap();
            let loss = ops::sum_all(&ops::mul(&d, &d).unwrap()).unwrap();
            let grads = tape.backward(&loss).unwrap();
            opt.step(&mut m, &grads, 0.05).unwrap();
        }
        assert!((m.p.data()[0] - 3.0).abs() < 1e-3, "p = {}", m.p.data()[0]);
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        struct One {
            p: Tensor<f64>,
        }
        impl ParamVisit<f64> for One {
            fn visit(&mut self, _prefix: &str, f: &mut crate::nn::ParamFn<'_, f64>) {
                f("p", &mut self.p, true);
            }
        }
        let mut m = One {
            p: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        };
        let tape = Tape::new();
        m.attach(&tape);
        let sq = ops::mul(&m.p, &m.p).unwrap();
        let _keep = &sq;
        let loss = ops::sum_all(&sq).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        // poison the gradient slot
        let id = m.p.tape_id().unwrap();
        grads.add_assign(id, 1, |g| g[0] = f64::NAN);
        let mut opt = Adam::new();
        assert!(matches!(opt.step(&mut m, &grads, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn hflip_is_involutive_and_rot90_cycles() {
        let p = Plane::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(hflip(&hflip(&p)), p);
        let mut q = p.clone();
        for _ in 0..4 {
            q = rot90(&q);
        }
        assert_eq!(q, p);
        let r = rot90(&p);
        assert_eq!((r.h, r.w), (3, 2));
        // top-left of the rotation is the top-right source pixel... check
        // a known value: (0,0) <- (h-1-0, 0) = (1,0) = 4
        assert_eq!(r.at(0, 0), 4.0);
    }

    #[test]
    fn augmented_mask_stays_binary_and_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gt = Plane::constant(20, 20, 0.0);
        for r in 5..15 {
            for c in 8..13 {
                gt.data[r * 20 + c] = 1.0;
            }
        }
        // make one appearance channel equal to the mask so geometric
        // alignment is observable
        let raw = RawSample {
            id: "a".into(),
            rgb: [gt.clone(), gt.clone(), gt.clone()],
            aux: gt.clone(),
            gt: gt.clone(),
        };
        for _ in 0..20 {
            let a = augment(&raw, &mut rng);
            assert!(a.gt.data.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(a.gt.data.len(), 400);
            // foreground never disappears (clip is at most 10% per side)
            assert!(a.gt.data.iter().sum::<f64>() > 0.0);
            // the appearance channel tracks the mask up to interpolation
            for (x, g) in a.rgb[0].data.iter().zip(&a.gt.data) {
                assert!((x - g).abs() < 1.0 - 1e-6 || (x - g).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn augmentation_without_clip_moves_mask_exactly() {
        // flip + rotation alone are permutations: the mask channel of the
        // appearance image must match the transformed mask bit for bit
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gt = Plane::constant(12, 12, 0.0);
        gt.data[5 * 12 + 3] = 1.0;
        let raw = RawSample {
            id: "a".into(),
            rgb: [gt.clone(), gt.clone(), gt.clone()],
            aux: gt.clone(),
            gt,
        };
        let mut seen_exact = 0;
        for _ in 0..30 {
            let a = augment(&raw, &mut rng);
            if a.gt.data.iter().sum::<f64>() == 1.0 && a.rgb[0].data == a.gt.data {
                seen_exact += 1;
            }
        }
        assert!(seen_exact > 0);
    }

    #[test]
    fn snapshot_roundtrip_restores_model() {
        let cfg = ModelConfig {
            scale: Scale::Toy,
            ablation: Ablation::None,
        };
        let mut a = SwinNet::<f32>::new(&cfg, 5).unwrap();
        let mut b = SwinNet::<f32>::new(&cfg, 6).unwrap();
        let snap = model_tensors(&mut a);
        load_model_tensors(&mut b, &snap).unwrap();
        assert_eq!(model_tensors(&mut b), snap);
        // a snapshot from a differently-shaped model is refused
        let cfg2 = ModelConfig {
            scale: Scale::Toy,
            ablation: Ablation::NoEdge,
        };
        let mut c = SwinNet::<f32>::new(&cfg2, 5).unwrap();
        assert!(matches!(
            load_model_tensors(&mut c, &snap),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    fn synthetic_raw(seed: u64, hw: usize) -> RawSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt = Plane::constant(hw, hw, 0.0);
        let r0 = rng.gen_range(0..hw / 2);
        let c0 = rng.gen_range(0..hw / 2);
        for r in r0..r0 + hw / 3 {
            for c in c0..c0 + hw / 3 {
                gt.data[r * hw + c] = 1.0;
            }
        }
        let noise = |rng: &mut ChaCha8Rng, base: &Plane| {
            let data = base
                .data
                .iter()
                .map(|&v| (0.6 * v + 0.2 + 0.2 * rng.gen::<f64>()).clamp(0.0, 1.0))
                .collect();
            Plane::new(hw, hw, data).unwrap()
        };
        RawSample {
            id: format!("syn{seed}"),
            rgb: [noise(&mut rng, &gt), noise(&mut rng, &gt), noise(&mut rng, &gt)],
            aux: noise(&mut rng, &gt),
            gt,
        }
    }

    #[test]
    fn short_training_run_reduces_loss_and_logs() {
        let cfg = ModelConfig {
            scale: Scale::Toy,
            ablation: Ablation::None,
        };
        let mut model = SwinNet::<f32>::new(&cfg, 7).unwrap();
        let data = vec![synthetic_raw(1, 96)];
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 1,
            lr0: 1e-4,
            seed: 0,
            augment: false,
            checkpoint_every: 1000,
        };
        let mut log = Vec::new();
        let last = train_loop(&mut model, &cfg, &data, &tc, None, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        for l in &lines {
            let cols: Vec<&str> = l.split(' ').collect();
            assert_eq!(cols.len(), 6, "bad log line {l}");
        }
        let first: f64 = lines[0].split(' ').nth(4).unwrap().parse().unwrap();
        assert!(last.total.is_finite());
        assert!(last.total < first, "loss {first} -> {}", last.total);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig {
            scale: Scale::Toy,
            ablation: Ablation::None,
        };
        let data = vec![synthetic_raw(2, 96)];
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 1,
            lr0: 5e-5,
            seed: 11,
            augment: true,
            checkpoint_every: 1000,
        };
        let run = || {
            let mut model = SwinNet::<f32>::new(&cfg, 7).unwrap();
            let mut log = Vec::new();
            train_loop(&mut model, &cfg, &data, &tc, None, &mut log).unwrap();
            (String::from_utf8(log).unwrap(), model_tensors(&mut model))
        };
        let (la, ta) = run();
        let (lb, tb) = run();
        assert_eq!(la, lb);
        assert_eq!(ta, tb);
    }
}
