use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::common::{epoch_plan, reduce_ordered, scale_all, step_lr, View};
use super::config::TrainConfig;
use super::optim::{adamw_step, OptimizerState};
use crate::distill::{sample_loss, DistillConfig, Projector, TeacherTargets};
use crate::error::{Error, Result};
use crate::io::{Dataset, ModelFile};
use crate::tensor::{Tape, Tensor};
use crate::vit::{collect_grads, encode, forward_unchecked, ViTConfig, ViTParams, WeightTree};

/// Trainable half of distillation: student encoder, projector and their
/// shared optimizer.
#[derive(Clone, Debug)]
pub struct StudentState {
    pub config: ViTConfig,
    pub params: ViTParams,
    pub projector: Projector,
    pub optimizer: OptimizerState,
}

impl StudentState {
    pub fn init(config: &ViTConfig, teacher_dim: usize, distill: &DistillConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ViTParams::init(config, &mut rng)?;
        let projector = Projector::init(
            config.embed_dim(),
            teacher_dim,
            distill.projector_depth,
            distill.projector_activation,
            &mut rng,
        )?;
        Ok(StudentState {
            config: config.clone(),
            params,
            projector,
            optimizer: OptimizerState::default(),
        })
    }

    /// Student then projector tensors, in traversal order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.params.visit_mut("student", &mut |n, t| out.push((n, t)));
        self.projector.weights.visit_mut("projector", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile {
            config: self.config.clone(),
            params: self.params.clone(),
            projector: Some(self.projector.clone()),
            head: None,
        }
    }
}

/// Teacher outputs for every sample and every view reachable without
/// cropping (original and mirrored), computed once.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    plain: Vec<TeacherTargets>,
    flipped: Option<Vec<TeacherTargets>>,
}

impl TeacherCache {
    pub fn build(teacher: &ModelFile, data: &Dataset, flips: bool, keep_patches: bool) -> Result<Self> {
        teacher.params.audit(&teacher.config)?;
        let run = |flip: bool| -> Result<Vec<TeacherTargets>> {
            (0..data.len())
                .into_par_iter()
                .map(|i| {
                    let img = data.image_flipped(i, flip);
                    let out = forward_unchecked(&img, &teacher.params, &teacher.config, false)?;
                    Ok(TeacherTargets::from_output(&out, keep_patches))
                })
                .collect()
        };
        Ok(TeacherCache {
            plain: run(false)?,
            flipped: if flips { Some(run(true)?) } else { None },
        })
    }

    pub fn get(&self, i: usize, view: View) -> Option<&TeacherTargets> {
        if view.dx != 0 || view.dy != 0 {
            return None;
        }
        if view.flip {
            self.flipped.as_ref().map(|f| &f[i])
        } else {
            Some(&self.plain[i])
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss_pa: f64,
    pub loss_ag: f64,
    pub loss_total: f64,
    pub wall_time_s: f64,
    /// Samples visited and views rendered this epoch.
    #[serde(skip)]
    pub samples: usize,
    #[serde(skip)]
    pub views: usize,
}

/// Read-only inputs of a distillation run.
#[derive(Clone, Copy, Debug)]
pub struct DistillSetup<'a> {
    pub teacher: &'a ModelFile,
    pub data: &'a Dataset,
    pub distill: &'a DistillConfig,
    pub train: &'a TrainConfig,
}

impl DistillSetup<'_> {
    fn check(&self, student: &StudentState) -> Result<()> {
        self.distill.validate()?;
        self.train.validate()?;
        self.teacher.params.audit(&self.teacher.config)?;
        student.params.audit(&student.config)?;
        if self.data.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        for (who, cfg) in [("teacher", &self.teacher.config), ("student", &student.config)] {
            if cfg.image_size != self.data.height || cfg.image_size != self.data.width || cfg.in_chans != self.data.channels {
                return Err(Error::config(format!(
                    "{who} expects {}x{}x{} images, dataset has {}x{}x{}",
                    cfg.in_chans, cfg.image_size, cfg.image_size, self.data.channels, self.data.height, self.data.width
                )));
            }
        }
        if student.projector.out_dim != self.teacher.config.embed_dim() {
            return Err(Error::config("projector output must equal the teacher width"));
        }
        Ok(())
    }

    /// A cache is used whenever every view is a plain or mirrored image.
    pub fn build_cache(&self) -> Result<Option<TeacherCache>> {
        if self.train.augment.crop_pad > 0 {
            return Ok(None);
        }
        TeacherCache::build(self.teacher, self.data, self.train.augment.flip, self.distill.align_patch_tokens).map(Some)
    }
}

/// One pass over the data: one view per sample, teacher without gradient,
/// student and projector updated once per batch.
pub fn distill_epoch(
    setup: &DistillSetup,
    student: &mut StudentState,
    cache: Option<&TeacherCache>,
    epoch: usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let data = setup.data;
    let n = data.len();
    let (order, views) = epoch_plan(setup.train.seed, epoch, n, &setup.train.augment);
    let batch = setup.train.batch_size;
    let steps = n.div_ceil(batch);
    let rendered = AtomicUsize::new(0);
    let mut sums = [0.0; 3];
    let mut lr = 0.0;
    let grid = student.config.grid_side();
    for (k, chunk) in order.chunks(batch).enumerate() {
        let offset = k * batch;
        let items: Vec<(usize, View)> = chunk
            .iter()
            .enumerate()
            .map(|(j, &i)| (i, views[offset + j]))
            .collect();
        let s = &*student;
        let (mut grads, stats) = reduce_ordered(&items, |&(i, view)| {
            let img = view.apply(data, i);
            rendered.fetch_add(1, Ordering::Relaxed);
            let live;
            let targets = match cache.and_then(|c| c.get(i, view)) {
                Some(t) => t,
                None => {
                    let out = forward_unchecked(&img, &setup.teacher.params, &setup.teacher.config, false)?;
                    live = TeacherTargets::from_output(&out, setup.distill.align_patch_tokens);
                    &live
                }
            };
            let mut tape = Tape::new();
            let s_vars = s.params.to_vars(&mut tape, true);
            let p_vars = s.projector.to_vars(&mut tape, true);
            let enc = encode(&mut tape, &s_vars, &img, &s.config)?;
            let loss = sample_loss(&mut tape, targets, &enc, grid, &s.projector, &p_vars, setup.distill)?;
            let values = [loss.pa, loss.ag, loss.total].map(|v| tape.value(v).data()[0]);
            tape.backward(loss.total)?;
            let mut g = collect_grads(&s_vars, &tape);
            g.extend(collect_grads(&p_vars, &tape));
            Ok((g, values))
        })?;
        scale_all(&mut grads, 1.0 / chunk.len() as f64);
        for (acc, v) in sums.iter_mut().zip(stats) {
            *acc += v;
        }
        lr = step_lr(setup.train, epoch, k, steps)?;
        let mut state = std::mem::take(&mut student.optimizer);
        let res = adamw_step(&mut student.named_params_mut(), &grads, &mut state, lr, setup.train);
        student.optimizer = state;
        res?;
    }
    let nf = n as f64;
    Ok(EpochMetrics {
        epoch: epoch + 1,
        lr,
        loss_pa: sums[0] / nf,
        loss_ag: sums[1] / nf,
        loss_total: sums[2] / nf,
        wall_time_s: start.elapsed().as_secs_f64(),
        samples: n,
        views: rendered.into_inner(),
    })
}

/// Result of [`run_distillation`].
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: StudentState,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fresh student for `train.total_epochs`. With `out_dir`, writes
/// `metrics.jsonl` (one line per epoch), `student_epoch_NNNN.akd` every
/// `checkpoint_every` epochs and `student.akd` at the end.
pub fn run_distillation(setup: &DistillSetup, student_config: &ViTConfig, out_dir: Option<&Path>) -> Result<DistillOutcome> {
    let student = StudentState::init(student_config, setup.teacher.config.embed_dim(), setup.distill, setup.train.seed)?;
    resume_distillation(setup, student, out_dir)
}

/// [`run_distillation`] from an already initialised student.
pub fn resume_distillation(setup: &DistillSetup, mut student: StudentState, out_dir: Option<&Path>) -> Result<DistillOutcome> {
    setup.check(&student)?;
    let cache = setup.build_cache()?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(setup.train.total_epochs);
    for epoch in 0..setup.train.total_epochs {
        let m = distill_epoch(setup, &mut student, cache.as_ref(), epoch)?;
        log::info!(
            "epoch {} lr {:.3e} pa {:.5} ag {:.5} total {:.5} ({:.1}s)",
            m.epoch,
            m.lr,
            m.loss_pa,
            m.loss_ag,
            m.loss_total,
            m.wall_time_s
        );
        if let (Some(f), Some(dir)) = (log.as_mut(), out_dir) {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
            f.flush()?;
            let every = setup.train.checkpoint_every;
            if every > 0 && m.epoch % every == 0 {
                student.to_model().save(dir.join(format!("student_epoch_{:04}.akd", m.epoch)))?;
            }
        }
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        student.to_model().save(dir.join("student.akd"))?;
    }
    Ok(DistillOutcome { student, metrics })
}
