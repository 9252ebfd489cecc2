use std::path::Path;

use log::info;
use mipcad_nn::activation::softmax_rows;
use mipcad_nn::io::{collect_state, read_model, restore_state, write_model};
use mipcad_nn::optim::{Adam, EarlyStopping, PlateauScheduler};
use mipcad_nn::{Mode, Tensor};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{ArchiSpec, FprNet};
use super::{binary_cross_entropy, ensemble_probability, extract_patch, Rotation3};
use crate::detect2d::EpochRecord;
use crate::ingest::CtVolume;
use crate::merge::Candidate;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LabelledPatch {
    pub voxels: Array3<f32>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig3D {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub min_lr: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Positive draws per negative in each epoch; positives are repeated
    /// with random rotations until this ratio is reached.
    pub positive_ratio: f64,
    /// Optional cap on negatives drawn per epoch.
    pub max_negatives_per_epoch: Option<usize>,
    pub max_steps: Option<usize>,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig3D {
    fn default() -> Self {
        Self {
            batch_size: 16,
            initial_lr: 1e-4,
            min_lr: 1e-7,
            lr_factor: 0.01,
            plateau_patience: 5,
            early_stop_patience: 10,
            max_epochs: 100,
            positive_ratio: 1.0 / 3.0,
            max_negatives_per_epoch: None,
            max_steps: None,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    spec: ArchiSpec,
    seed: u64,
}

const KIND: &str = "fpr3d";

#[derive(Debug, Clone)]
pub struct FprModel {
    pub net: FprNet,
    pub seed: u64,
}

impl FprModel {
    pub fn new(spec: &ArchiSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: FprNet::new(spec, &mut rng)?,
            seed,
        })
    }

    pub fn patch_side(&self) -> usize {
        self.net.spec().patch_side
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let d = Descriptor {
            kind: KIND.into(),
            spec: self.net.spec().clone(),
            seed: self.seed,
        };
        let w = collect_state(|f| self.net.visit_state(f));
        write_model(path, &d, &w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (d, w): (Descriptor, Vec<f32>) = read_model(path)?;
        if d.kind != KIND {
            return Err(Error::format(path, format!("expected a {KIND} model, found {}", d.kind)));
        }
        let mut m = Self::new(&d.spec, d.seed)?;
        restore_state(&w, |f| m.net.visit_state(f))?;
        Ok(m)
    }

    /// Nodule probability for each cube.
    pub fn predict(&mut self, cubes: &[&Array3<f32>]) -> Result<Vec<f64>> {
        let side = self.patch_side();
        let mut out = Vec::with_capacity(cubes.len());
        for chunk in cubes.chunks(16) {
            if let Some(c) = chunk.iter().find(|c| c.dim() != (side, side, side)) {
                return Err(Error::Contract(format!("expected {side}³ patches, got {:?}", c.dim())));
            }
            out.extend(self.net.predict(&to_tensor(chunk, side)));
        }
        Ok(out)
    }
}

fn to_tensor(cubes: &[&Array3<f32>], side: usize) -> Tensor {
    let mut data = Vec::with_capacity(cubes.len() * side * side * side);
    for c in cubes {
        data.extend(c.iter());
    }
    Tensor::from_vec(&[cubes.len(), 1, side, side, side], data).expect("cube sizes checked")
}

/// The two trained classifiers used for scoring.
#[derive(Debug, Clone, Default)]
pub struct FprEnsemble {
    /// Large-patch classifier.
    pub archi2: Option<FprModel>,
    /// Small-patch classifier.
    pub archi3: Option<FprModel>,
}

/// Ensemble probability for each candidate of one volume.
pub fn score_candidates(v: &CtVolume, cands: &[Candidate], models: &mut FprEnsemble) -> Result<Vec<f64>> {
    let (Some(a2), Some(a3)) = (models.archi2.as_mut(), models.archi3.as_mut()) else {
        return Err(Error::Contract("both classifiers are required for scoring".into()));
    };
    let mut out = Vec::with_capacity(cands.len());
    for chunk in cands.chunks(16) {
        let big = chunk
            .iter()
            .map(|c| extract_patch(v, c, a2.patch_side()).map(|p| p.voxels))
            .collect::<Result<Vec<_>>>()?;
        let small = chunk
            .iter()
            .map(|c| extract_patch(v, c, a3.patch_side()).map(|p| p.voxels))
            .collect::<Result<Vec<_>>>()?;
        let p2 = a2.predict(&big.iter().collect::<Vec<_>>())?;
        let p3 = a3.predict(&small.iter().collect::<Vec<_>>())?;
        for (i, c) in chunk.iter().enumerate() {
            out.push(ensemble_probability(p2[i], p3[i], c.bbox_side));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FprOutcome {
    pub model: FprModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub steps: usize,
}

fn mean_loss(model: &mut FprModel, set: &[LabelledPatch]) -> Result<f64> {
    let cubes: Vec<&Array3<f32>> = set.iter().map(|p| &p.voxels).collect();
    let probs = model.predict(&cubes)?;
    let total: f64 = probs
        .iter()
        .zip(set)
        .map(|(&p, s)| binary_cross_entropy(p, if s.label { 1.0 } else { 0.0 }).0)
        .sum();
    Ok(total / set.len() as f64)
}

/// Trains one patch classifier with Adam on binary cross-entropy over a
/// two-way soft-max. Positives are oversampled with random rotations to
/// the configured ratio.
pub fn train_fpr(
    train: &[LabelledPatch],
    val: &[LabelledPatch],
    spec: &ArchiSpec,
    cfg: &TrainConfig3D,
) -> Result<FprOutcome> {
    let pos: Vec<usize> = (0..train.len()).filter(|&i| train[i].label).collect();
    let neg: Vec<usize> = (0..train.len()).filter(|&i| !train[i].label).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract(format!(
            "classifier training needs both classes ({} positives, {} negatives)",
            pos.len(),
            neg.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let side = spec.patch_side;
    if let Some(p) = train.iter().chain(val).find(|p| p.voxels.dim() != (side, side, side)) {
        return Err(Error::Contract(format!("expected {side}³ patches, got {:?}", p.voxels.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FprModel::new(spec, cfg.seed)?;
    let mut adam = Adam::new(cfg.initial_lr as f32);
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.lr_factor, cfg.plateau_patience, cfg.min_lr);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = collect_state(|f| model.net.visit_state(f));
    let mut log = Vec::new();
    let mut steps = 0;
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut negs = neg.clone();
        negs.shuffle(&mut rng);
        if let Some(cap) = cfg.max_negatives_per_epoch {
            negs.truncate(cap);
        }
        let n_pos = pos.len().max((negs.len() as f64 * cfg.positive_ratio).ceil() as usize);
        let mut order: Vec<usize> = negs;
        let mut cycle = pos.clone();
        cycle.shuffle(&mut rng);
        order.extend(cycle.iter().cycle().take(n_pos));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let cubes: Vec<Array3<f32>> = chunk
                .iter()
                .map(|&i| {
                    let p = &train[i];
                    if p.label && cfg.augment {
                        Rotation3::random(&mut rng).apply(&p.voxels)
                    } else {
                        p.voxels.clone()
                    }
                })
                .collect();
            let x = to_tensor(&cubes.iter().collect::<Vec<_>>(), side);
            let logits = model.net.forward(&x, Mode::Train);
            let probs = softmax_rows(&logits);
            let n = chunk.len() as f32;
            let mut grad = probs.clone();
            let mut loss = 0.0;
            for (j, &i) in chunk.iter().enumerate() {
                let y = train[i].label as usize;
                loss += binary_cross_entropy(probs.data()[2 * j + 1] as f64, y as f64).0;
                // soft-max with cross-entropy: dL/dz = p − onehot
                grad.data_mut()[2 * j + y] -= 1.0;
            }
            for g in grad.data_mut() {
                *g /= n;
            }
            model.net.backward(&grad);
            adam.tick();
            model.net.visit_params(&mut |p| adam.update(p));
            epoch_loss += loss / chunk.len() as f64;
            batches += 1;
            steps += 1;
        }
        if batches == 0 {
            break;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(&mut model, val)? };
        let lr = sched.lr();
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        info!("{:?} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.1e}", spec.archi);
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
    Ok(FprOutcome {
        model,
        best_epoch: stopper.best_epoch(),
        stopped_epoch,
        log,
        steps,
    })
}
