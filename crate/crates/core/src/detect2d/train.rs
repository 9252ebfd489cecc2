use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use mipcad_nn::io::{collect_state, read_model, restore_state, write_model};
use mipcad_nn::optim::{Adam, EarlyStopping, PlateauScheduler};
use mipcad_nn::{Mode, Tensor};
use ndarray::{s, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{Augment2d, MAX_SHIFT};
use super::loss::{dice_with_grad, DICE_EPS};
use super::unet::{UNet, UNetSpec};
use super::TrainConfig2D;
use crate::mip::MipStack;
use crate::{Error, Result};

/// A projection stack with its rasterized label maps.
#[derive(Debug, Clone)]
pub struct LabelledStack {
    pub stack: MipStack,
    pub labels: Array3<f32>,
}

impl LabelledStack {
    pub fn new(stack: MipStack, labels: Array3<f32>) -> Result<Self> {
        if stack.images.dim() != labels.dim() {
            return Err(Error::Contract(format!(
                "label maps {:?} do not match stack {:?}",
                labels.dim(),
                stack.images.dim()
            )));
        }
        Ok(Self { stack, labels })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    spec: UNetSpec,
    slab_thickness: u32,
    seed: u64,
}

const KIND: &str = "unet2d";

/// A trained detector bound to one slab thickness.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub net: UNet,
    pub slab_thickness: u32,
    pub seed: u64,
}

impl DetectorModel {
    pub fn new(spec: &UNetSpec, slab_thickness: u32, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: UNet::new(spec, &mut rng)?,
            slab_thickness,
            seed,
        })
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let d = Descriptor {
            kind: KIND.into(),
            spec: self.net.spec().clone(),
            slab_thickness: self.slab_thickness,
            seed: self.seed,
        };
        let weights = collect_state(|f| self.net.visit_state(f));
        write_model(path, &d, &weights)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (d, weights): (Descriptor, Vec<f32>) = read_model(path)?;
        if d.kind != KIND {
            return Err(Error::format(path, format!("expected a {KIND} model, found {}", d.kind)));
        }
        let mut m = Self::new(&d.spec, d.slab_thickness, d.seed)?;
        restore_state(&weights, |f| m.net.visit_state(f))?;
        Ok(m)
    }

    /// Probabilities for a batch of equally sized images.
    fn infer(&mut self, images: &[Array2<f32>]) -> Vec<Array2<f32>> {
        let (h, w) = images[0].dim();
        let mult = self.net.spec().size_multiple();
        let (ph, pw) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
        let padded: Vec<Array2<f32>> = images.iter().map(|i| pad(i.view(), ph, pw)).collect();
        let x = to_tensor(&padded);
        let y = self.net.forward(&x, Mode::Eval);
        let plane = ph * pw;
        (0..images.len())
            .map(|i| {
                let full = Array2::from_shape_vec((ph, pw), y.data()[i * plane..(i + 1) * plane].to_vec())
                    .expect("plane size");
                full.slice(s![..h, ..w]).to_owned()
            })
            .collect()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: DetectorModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Last epoch run.
    pub stopped_epoch: usize,
    pub steps: usize,
}

impl TrainOutcome {
    /// Writes the log as one JSON object per line.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.log {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pad(img: ArrayView2<f32>, h: usize, w: usize) -> Array2<f32> {
    let mut out = Array2::zeros((h, w));
    let (ih, iw) = img.dim();
    out.slice_mut(s![..ih.min(h), ..iw.min(w)])
        .assign(&img.slice(s![..ih.min(h), ..iw.min(w)]));
    out
}

fn to_tensor(images: &[Array2<f32>]) -> Tensor {
    let (h, w) = images[0].dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for i in images {
        data.extend(i.iter());
    }
    Tensor::from_vec(&[images.len(), 1, h, w], data).expect("consistent image sizes")
}

#[derive(Clone, Copy)]
struct ImageRef {
    stack: usize,
    k: usize,
}

fn split_refs(set: &[LabelledStack]) -> (Vec<ImageRef>, Vec<ImageRef>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (si, ls) in set.iter().enumerate() {
        for k in 0..ls.stack.len() {
            let r = ImageRef { stack: si, k };
            if ls.labels.index_axis(ndarray::Axis(0), k).iter().any(|&v| v > 0.0) {
                pos.push(r);
            } else {
                neg.push(r);
            }
        }
    }
    (pos, neg)
}

/// Square working side: the larger image side rounded up to the size
/// multiple, or the patch size.
fn working_side(set: &[LabelledStack], spec: &UNetSpec, patch: Option<usize>) -> Result<usize> {
    let mult = spec.size_multiple();
    if let Some(p) = patch {
        if p == 0 || p % mult != 0 {
            return Err(Error::Parameter(format!("patch size {p} is not a positive multiple of {mult}")));
        }
        return Ok(p);
    }
    let side = set
        .iter()
        .map(|l| {
            let (_, h, w) = l.stack.images.dim();
            h.max(w)
        })
        .max()
        .unwrap_or(mult);
    Ok(side.div_ceil(mult) * mult)
}

/// Cuts a `side × side` window from a zero-padded copy of the image. For
/// positives the window is placed so that a random labelled pixel is inside.
fn crop_pair<R: Rng + ?Sized>(
    img: ArrayView2<f32>,
    lab: ArrayView2<f32>,
    side: usize,
    rng: &mut R,
) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = img.dim();
    let (hh, ww) = (h.max(side), w.max(side));
    let img = pad(img, hh, ww);
    let lab = pad(lab, hh, ww);
    let anchor: Vec<(usize, usize)> = lab.indexed_iter().filter(|(_, &v)| v > 0.0).map(|(p, _)| p).collect();
    let pick = |extent: usize, centre: Option<usize>, rng: &mut R| -> usize {
        let max0 = extent - side;
        match centre {
            Some(c) => {
                let lo = c.saturating_sub(side - 1).min(max0);
                let hi = c.min(max0);
                rng.gen_range(lo..=hi)
            }
            None => rng.gen_range(0..=max0),
        }
    };
    let a = anchor.choose(rng).copied();
    let y0 = pick(hh, a.map(|p| p.0), rng);
    let x0 = pick(ww, a.map(|p| p.1), rng);
    (
        img.slice(s![y0..y0 + side, x0..x0 + side]).to_owned(),
        lab.slice(s![y0..y0 + side, x0..x0 + side]).to_owned(),
    )
}

fn validation_loss(model: &mut DetectorModel, set: &[LabelledStack], refs: &[ImageRef], batch: usize) -> Result<f64> {
    if refs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in refs.chunks(batch) {
        // stacks may differ in size, so evaluate per image
        for r in chunk {
            let ls = &set[r.stack];
            let img = ls.stack.image(r.k).to_owned();
            let p = model.infer(std::slice::from_ref(&img)).remove(0);
            let lab = ls.labels.index_axis(ndarray::Axis(0), r.k);
            let pv: Vec<f32> = p.iter().copied().collect();
            let lv: Vec<f32> = lab.iter().copied().collect();
            total += dice_with_grad(&pv, &lv, DICE_EPS)?.0;
        }
    }
    Ok(total / refs.len() as f64)
}

/// Trains one detector stream with Adam on the soft dice loss.
///
/// Positive images (with any labelled pixel) are augmented; nodule-free
/// images are mixed in unmodified. The learning rate drops on validation
/// plateaus and training stops early once validation loss has not improved
/// for the configured patience. Returns the best-validation weights.
pub fn train_detector(
    train: &[LabelledStack],
    val: &[LabelledStack],
    spec: &UNetSpec,
    cfg: &TrainConfig2D,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (pos, neg) = split_refs(train);
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let thickness = train[0].stack.slab_thickness;
    if let Some(other) = train.iter().chain(val).find(|l| l.stack.slab_thickness != thickness) {
        return Err(Error::Contract(format!(
            "mixed slab thicknesses {} and {}",
            thickness, other.stack.slab_thickness
        )));
    }
    let side = working_side(train, spec, cfg.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = DetectorModel::new(spec, thickness, cfg.seed)?;

    let (vpos, vneg) = split_refs(val);
    let mut val_refs = vpos;
    val_refs.extend(vneg);
    if let Some(cap) = cfg.max_val_images {
        val_refs.truncate(cap);
    }

    let mut adam = Adam::new(cfg.initial_lr as f32);
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.lr_factor, cfg.plateau_patience, cfg.min_lr);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = collect_state(|f| model.net.visit_state(f));
    let mut log = Vec::new();
    let mut steps = 0usize;
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        let n_neg = if pos.is_empty() {
            neg.len()
        } else {
            ((pos.len() as f64 * cfg.negatives_per_positive).round() as usize).min(neg.len())
        };
        let mut order: Vec<(ImageRef, bool)> = pos.iter().map(|&r| (r, true)).collect();
        order.extend(neg.choose_multiple(&mut rng, n_neg).map(|&r| (r, false)));
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.steps_per_epoch {
            order.truncate(cap * cfg.batch_size);
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ys = Vec::with_capacity(chunk.len());
            for &(r, positive) in chunk {
                let ls = &train[r.stack];
                let (mut x, mut y) = crop_pair(
                    ls.stack.image(r.k),
                    ls.labels.index_axis(ndarray::Axis(0), r.k),
                    side,
                    &mut rng,
                );
                if positive && cfg.augment {
                    let t = Augment2d::random(&mut rng, MAX_SHIFT.min(side as isize / 4));
                    x = t.apply(&x);
                    y = t.apply(&y);
                }
                xs.push(x);
                ys.push(y);
            }
            let xt = to_tensor(&xs);
            let yt = to_tensor(&ys);
            let p = model.net.forward(&xt, Mode::Train);
            let (loss, grad) = dice_with_grad(p.data(), yt.data(), DICE_EPS)?;
            let g = Tensor::from_vec(p.shape(), grad)?;
            model.net.backward(&g);
            adam.tick();
            model.net.visit_params(&mut |prm| adam.update(prm));
            epoch_loss += loss;
            batches += 1;
            steps += 1;
        }
        if batches == 0 {
            break;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val_refs.is_empty() {
            train_loss
        } else {
            validation_loss(&mut model, val, &val_refs, cfg.batch_size)?
        };
        let lr = sched.lr();
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        info!("t={thickness} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.1e}");
        stopped_epoch = epoch;
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = collect_state(|f| model.net.visit_state(f));
        }
        adam.lr = sched.observe(val_loss) as f32;
        if stop || cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    restore_state(&best, |f| model.net.visit_state(f))?;
    Ok(TrainOutcome {
        model,
        best_epoch: stopper.best_epoch(),
        stopped_epoch,
        log,
        steps,
    })
}

/// Runs a detector over every image of a stack, returning maps `[k, y, x]`
/// of probabilities in `[0, 1]`.
pub fn predict_maps(model: &mut DetectorModel, stack: &MipStack) -> Result<Array3<f32>> {
    if model.slab_thickness != stack.slab_thickness {
        return Err(Error::Contract(format!(
            "detector trained for {} mm slabs applied to a {} mm stack",
            model.slab_thickness, stack.slab_thickness
        )));
    }
    let (n, h, w) = stack.images.dim();
    let mut out = Array3::zeros((n, h, w));
    const BATCH: usize = 4;
    let mut k = 0;
    while k < n {
        let end = (k + BATCH).min(n);
        let imgs: Vec<Array2<f32>> = (k..end).map(|i| stack.image(i).to_owned()).collect();
        for (i, m) in model.infer(&imgs).into_iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), k + i).assign(&m);
        }
        k = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Geometry;

    fn small_spec() -> UNetSpec {
        UNetSpec {
            input_size: 32,
            base_width: 4,
            levels: 3,
            kernel: 3,
        }
    }

    fn disc_stack(seed: u64, t: u32) -> LabelledStack {
        // a few bright discs of radius 2..4 with square labels
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, side) = (6, 32);
        let mut images = Array3::<f32>::from_elem((n, side, side), 0.1);
        let mut labels = Array3::<f32>::zeros((n, side, side));
        for k in 0..n {
            let r: f64 = rng.gen_range(2.0..4.0);
            let cy: f64 = rng.gen_range(6.0..26.0);
            let cx: f64 = rng.gen_range(6.0..26.0);
            for y in 0..side {
                for x in 0..side {
                    let (dy, dx) = (y as f64 + 0.0 - cy, x as f64 - cx);
                    if dy * dy + dx * dx <= r * r {
                        images[[k, y, x]] = 0.9;
                    }
                    if dy.abs() <= r && dx.abs() <= r {
                        labels[[k, y, x]] = 1.0;
                    }
                }
            }
        }
        let stack = MipStack {
            images,
            slab_thickness: t,
            z_centers: (0..n).map(|k| k as f64).collect(),
            series_id: format!("s{seed}"),
            geometry: Geometry {
                spacing: [1.0; 3],
                origin: [0.0; 3],
            },
        };
        LabelledStack::new(stack, labels).unwrap()
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let cfg = TrainConfig2D::default();
        assert!(matches!(train_detector(&[], &[], &small_spec(), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn overfits_bright_discs() {
        let train = vec![disc_stack(1, 5), disc_stack(2, 5)];
        let cfg = TrainConfig2D {
            max_steps: Some(200),
            max_epochs: 1000,
            early_stop_patience: 1000,
            plateau_patience: 1000,
            augment: false,
            initial_lr: 1e-2,
            seed: 5,
            ..TrainConfig2D::default()
        };
        let mut out = train_detector(&train, &[], &small_spec(), &cfg).unwrap();
        assert_eq!(out.steps, 200);
        let mut dice = Vec::new();
        for ls in &train {
            let maps = predict_maps(&mut out.model, &ls.stack).unwrap();
            let pv: Vec<f32> = maps.iter().copied().collect();
            let lv: Vec<f32> = ls.labels.iter().copied().collect();
            dice.push(1.0 - dice_with_grad(&pv, &lv, DICE_EPS).unwrap().0);
            // every disc centre fires
            for k in 0..ls.stack.len() {
                let lab = ls.labels.index_axis(ndarray::Axis(0), k);
                let pts: Vec<_> = lab.indexed_iter().filter(|(_, &v)| v > 0.0).map(|(p, _)| p).collect();
                let cy = pts.iter().map(|p| p.0).sum::<usize>() / pts.len();
                let cx = pts.iter().map(|p| p.1).sum::<usize>() / pts.len();
                assert!(maps[[k, cy, cx]] >= 0.5, "centre of {k} at {}", maps[[k, cy, cx]]);
            }
        }
        assert!(dice.iter().all(|&d| d >= 0.8), "dice {dice:?}");
    }

    #[test]
    fn inference_contract() {
        let ls = disc_stack(3, 10);
        let mut m = DetectorModel::new(&small_spec(), 10, 0).unwrap();
        let mut zero = ls.stack.clone();
        zero.images.fill(0.0);
        let a = predict_maps(&mut m, &zero).unwrap();
        assert!(a.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let b = predict_maps(&mut m, &ls.stack).unwrap();
        let c = predict_maps(&mut m, &ls.stack).unwrap();
        assert_eq!(b, c);
        let mut wrong = ls.stack.clone();
        wrong.slab_thickness = 5;
        assert!(matches!(predict_maps(&mut m, &wrong), Err(Error::Contract(_))));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let mut m = DetectorModel::new(&small_spec(), 1, 0).unwrap();
        let stack = MipStack {
            images: Array3::from_elem((2, 20, 27), 0.5),
            slab_thickness: 1,
            z_centers: vec![0.0, 1.0],
            series_id: "odd".into(),
            geometry: Geometry {
                spacing: [1.0; 3],
                origin: [0.0; 3],
            },
        };
        assert_eq!(predict_maps(&mut m, &stack).unwrap().dim(), (2, 20, 27));
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let ls = disc_stack(4, 15);
        let mut m = DetectorModel::new(&small_spec(), 15, 9).unwrap();
        m.save(&path).unwrap();
        let mut back = DetectorModel::load(&path).unwrap();
        assert_eq!(back.slab_thickness, 15);
        assert_eq!(predict_maps(&mut m, &ls.stack).unwrap(), predict_maps(&mut back, &ls.stack).unwrap());
    }

    #[test]
    fn log_is_line_delimited() {
        let train = vec![disc_stack(6, 1)];
        let val = vec![disc_stack(7, 1)];
        let cfg = TrainConfig2D {
            max_epochs: 2,
            ..TrainConfig2D::default()
        };
        let out = train_detector(&train, &val, &small_spec(), &cfg).unwrap();
        assert_eq!(out.log.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        out.write_log(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first: EpochRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        assert_eq!(first.lr, 1e-3);
    }
}
