//! The optimization loop shared by pretraining and mixed fine-tuning.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, augment, io_err, sample_patch, OptimizerState, Result, RunDir, TrainConfig, TrainError};
use crate::lossmetrics::{soft_dice_loss, OneHotTarget};
use crate::model::{save_checkpoint, Checkpoint, ParamStore, SwinUnetr};
use crate::preprocess::{preprocess_case, Preprocessed};
use crate::tensor::{Graph, Tensor};
use crate::volumeio::{read_labels, read_volume, DatasetManifest, LabelMap, Spacing, Split, Volume};

/// Crop, resample and z-score one case; training and inference share this.
pub fn prepare_case(image: &Volume, labels: Option<&LabelMap>, target: Option<Spacing>) -> Result<Preprocessed> {
    Ok(preprocess_case(image, labels, target.unwrap_or(image.spacing))?)
}

/// A preprocessed case held in memory for training.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub id: String,
    pub split: Split,
    pub image: Volume,
    pub labels: LabelMap,
}

/// Cases sampled uniformly during training.
#[derive(Clone, Debug, Default)]
pub struct CasePool {
    pub cases: Vec<TrainingCase>,
}

impl CasePool {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> &TrainingCase {
        &self.cases[rng.gen_range(0..self.cases.len())]
    }
}

/// Loads and preprocesses every case of `splits` in manifest order.
pub fn load_pool(manifest: &DatasetManifest, splits: &[Split], target: Option<Spacing>) -> Result<CasePool> {
    let mut cases = Vec::new();
    for c in manifest.cases.iter().filter(|c| splits.contains(&c.split)) {
        let Some(label) = &c.label else {
            continue;
        };
        let image = read_volume(&manifest.resolve(&c.image))?;
        let labels = read_labels(&manifest.resolve(label))?;
        let p = prepare_case(&image, Some(&labels), target)?;
        cases.push(TrainingCase {
            id: c.id.clone(),
            split: c.split,
            image: p.image,
            labels: p.labels.expect("labels were given"),
        });
    }
    Ok(CasePool { cases })
}

/// One line of `logs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of completed steps.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct Trainer {
    model: SwinUnetr<f32>,
    state: OptimizerState,
    cfg: TrainConfig,
    pool: CasePool,
    step: u64,
}

impl Trainer {
    /// Fresh optimizer state at step 0.
    pub fn new(model: SwinUnetr<f32>, cfg: TrainConfig, pool: CasePool) -> Result<Self> {
        cfg.validate(model.config())?;
        if pool.is_empty() {
            return Err(TrainError::Config("the case pool is empty".into()));
        }
        let state = OptimizerState::zeros_like(model.params());
        Ok(Self {
            model,
            state,
            cfg,
            pool,
            step: 0,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, pool: CasePool) -> Result<Self> {
        let model = ckpt.model()?;
        let state = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| TrainError::Optimizer("checkpoint has no optimizer state to resume from".into()))?;
        state.check(model.params())?;
        let mut t = Self::new(model, cfg, pool)?;
        t.state = state;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &SwinUnetr<f32> {
        &self.model
    }

    pub fn into_model(self) -> SwinUnetr<f32> {
        self.model
    }

    pub fn pool(&self) -> &CasePool {
        &self.pool
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, Some(self.state.clone()))
    }

    /// Randomness of step `step` (0-based) depends only on the seed and the
    /// step, so resumed runs replay the same batches. Stream 0 is left to
    /// model initialization.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step + 1);
        rng
    }

    /// Mean soft Dice loss of the batch for step `step` and its gradient
    /// with respect to every parameter. Each sample: draw a case, augment,
    /// cut a patch, and score the available foreground classes only.
    pub fn batch_gradients(&self, step: u64) -> Result<(f64, ParamStore<f32>)> {
        let cfg = &self.cfg;
        let mut rng = self.step_rng(step);
        let mut g = Graph::<f32>::new();
        let p = self.model.bind(&mut g, true);
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let case = self.pool.draw(&mut rng);
            let (img, lab) = augment(&case.image, &case.labels, &mut rng, cfg.rotation_degrees, cfg.translation_voxels);
            let patch = sample_patch(&img, &lab, cfg.patch_size, cfg.pos_sample_prob, &mut rng);
            let s = cfg.patch_size;
            let x = g.constant(Tensor::new(&[1, s[0], s[1], s[2]], patch.image.voxels)?);
            let out = self.model.forward(&mut g, &p, x)?;
            let target = OneHotTarget::<f32>::from_labels(&patch.labels, false)?;
            let loss = soft_dice_loss(&mut g, out.probs, &target)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let loss = g.scale(total.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                what: format!("loss at step {}", step + 1),
            });
        }
        g.backward(loss)?;
        let grads = p
            .iter()
            .map(|(name, &v)| {
                let grad = g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (name.clone(), grad)
            })
            .collect();
        Ok((value, grads))
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let (loss, grads) = self.batch_gradients(self.step)?;
        adamw_step(self.model.params_mut(), &grads, &mut self.state, &self.cfg.optimizer())?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr: self.cfg.lr,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Steps until `cfg.steps` are complete. With a run directory, appends
    /// one JSON line per step to `logs.jsonl` (truncated first unless
    /// `append`), saves numbered checkpoints every `checkpoint_every` steps
    /// and always saves `final.mckp`.
    pub fn run(&mut self, run: Option<&RunDir>, append: bool) -> Result<Checkpoint> {
        let mut log = match run {
            Some(r) => {
                r.create()?;
                let path = r.logs();
                let file = if append {
                    OpenOptions::new().create(true).append(true).open(&path)
                } else {
                    File::create(&path)
                }
                .map_err(io_err(&path))?;
                Some((BufWriter::new(file), path))
            }
            None => None,
        };
        while self.step < self.cfg.steps {
            let rec = self.step()?;
            if rec.step % 10 == 0 || rec.step == self.cfg.steps {
                log::info!("step {} loss {:.4} ({:.2}s)", rec.step, rec.loss, rec.seconds);
            }
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("step record serializes");
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(path))?;
            }
            if let Some(r) = run {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    save_checkpoint(&self.checkpoint(), &r.checkpoint(self.step))?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(r) = run {
            save_checkpoint(&ckpt, &r.final_checkpoint())?;
        }
        Ok(ckpt)
    }
}

/// Pretraining on the labeled split from a freshly initialized model.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: &crate::model::ModelConfig,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<Checkpoint> {
    cfg.validate(model_cfg)?;
    let pool = load_pool(manifest, &[Split::Labeled], cfg.target_spacing)?;
    if pool.is_empty() {
        return Err(TrainError::EmptySplit(vec![Split::Labeled]));
    }
    let model = SwinUnetr::new(model_cfg.clone(), cfg.seed)?;
    Trainer::new(model, cfg.clone(), pool)?.run(run, false)
}

/// Continues training `ckpt` on labeled and pseudo-labeled cases, drawn
/// uniformly from their union, with fresh optimizer state.
pub fn finetune_mixed(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
) -> Result<Checkpoint> {
    let splits = [Split::Labeled, Split::Pseudo];
    let pool = load_pool(manifest, &splits, cfg.target_spacing)?;
    if pool.is_empty() {
        return Err(TrainError::EmptySplit(splits.to_vec()));
    }
    let model = ckpt.model()?;
    Trainer::new(model, cfg.clone(), pool)?.run(run, false)
}
