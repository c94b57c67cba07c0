//! Mini-batch training with AdamW, the cyclic schedule and the two-stage
//! instance schedule.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use podseg_core::metrics::semantic_metrics;
use podseg_nn::{
    adamw_step, apply_running_updates, Ctx, ModelParams, OptimState, Tape, Var, BN_MOMENTUM,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{ModelError, Result};
use crate::instance::{
    dual_set_cluster, offset_losses, offset_targets, score_logits, score_loss, score_targets, train_schedule,
    Proposal, Schedule, BACKBONE_PREFIXES,
};
use crate::network::{assemble_batch, augment_patch, forward, init_params, load_checkpoint, save_checkpoint, values_f64, PreparedPatch};
use crate::semantic::{argmax_rows, label_vec};
use crate::window::Phase;

/// Loss values of one step or averaged over an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Losses {
    pub total: f64,
    pub sem: f64,
    pub reg: f64,
    pub dir: f64,
    pub score: f64,
}

impl Losses {
    fn add(&mut self, o: &Losses, w: f64) {
        self.total += o.total * w;
        self.sem += o.sem * w;
        self.reg += o.reg * w;
        self.dir += o.dir * w;
        self.score += o.score * w;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub losses: Losses,
    pub lr: f64,
    /// L2 norm of the gradient reaching backbone parameters.
    pub backbone_grad_norm: f64,
    pub proposals: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: Losses,
    pub backbone_grad_norm: f64,
    pub val_loss: Option<f64>,
    pub val_miou: Option<f64>,
    pub val_oacc: Option<f64>,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub miou: f64,
    pub oacc: f64,
}

pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: OptimState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
}

/// Sum of the listed loss terms, skipping absent ones.
fn total(tape: &Tape<f32>, terms: &[Option<Var>]) -> Result<Option<Var>> {
    let present: Vec<Var> = terms.iter().flatten().copied().collect();
    if present.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.sum_scalars(&present)?))
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let params = init_params(&model, train.seed)?;
        Ok(Self::with_params(model, train, params))
    }

    pub fn with_params(model: ModelConfig, train: TrainConfig, params: ModelParams<f32>) -> Self {
        let mut opt = OptimState::new(train.cycle_len);
        opt.base_lr = train.base_lr;
        opt.max_lr = train.max_lr;
        opt.weight_decay = train.weight_decay;
        Self {
            model,
            train,
            params,
            opt,
            epoch: 0,
            best_val: None,
        }
    }

    pub fn steps_per_epoch(&self, num_patches: usize) -> u64 {
        num_patches.div_ceil(self.train.batch_size) as u64
    }

    /// Resolves an unset cycle length to one cycle over the whole run.
    pub fn fix_cycle(&mut self, num_patches: usize) {
        if self.opt.cycle_len == 0 {
            self.opt.cycle_len = (self.train.epochs as u64 * self.steps_per_epoch(num_patches)).max(2);
        }
    }

    pub fn schedule(&self, epoch: usize) -> Schedule {
        train_schedule(self.train.variant, epoch, self.model.instance.prep_epoch)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// One optimizer step on a batch of patches.
    pub fn step(&mut self, batch: &[&PreparedPatch], schedule: &Schedule, rng: &mut ChaCha8Rng) -> Result<StepReport> {
        let tape = Tape::<f32>::new();
        let ctx = Ctx::new(&tape, &self.params, true).with_frozen(schedule.frozen.iter().copied());
        let data = assemble_batch::<f32, _>(batch, &self.model, Phase::Training, rng)?;
        let fw = forward(&ctx, &self.model, &data, schedule.offset || schedule.score)?;
        let (terms, proposals) = self.losses(&ctx, &data, fw, schedule)?;
        let Some(loss) = total(&tape, &terms)? else {
            return Err(ModelError::Internal("no active loss".into()));
        };
        let grads = tape.backward(loss)?;
        let pg = ctx.param_grads(&grads);
        let updates = ctx.take_running_updates();
        let values: Vec<f64> = terms.iter().map(|t| t.map_or(0.0, |v| tape.item(v) as f64)).collect();
        let total_value = tape.item(loss) as f64;
        drop(ctx);
        let backbone_grad_norm = pg
            .iter()
            .filter(|(n, _)| BACKBONE_PREFIXES.iter().any(|p| n.starts_with(p)))
            .flat_map(|(_, g)| g.iter().map(|v| (*v as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        let lr = adamw_step(&mut self.params, &pg, &mut self.opt)?;
        apply_running_updates(&mut self.params, &updates, BN_MOMENTUM)?;
        Ok(StepReport {
            losses: Losses {
                total: total_value,
                sem: values[0],
                reg: values[1],
                dir: values[2],
                score: values[3],
            },
            lr,
            backbone_grad_norm,
            proposals,
        })
    }

    /// Loss terms `[sem, reg, dir, score]` active under `schedule`.
    fn losses(
        &self,
        ctx: &Ctx<f32>,
        data: &crate::network::PatchBatch<f32>,
        fw: crate::network::Forward,
        schedule: &Schedule,
    ) -> Result<([Option<Var>; 4], usize)> {
        let tape = ctx.tape;
        let mut terms = [None; 4];
        let need_sem = schedule.semantic || schedule.score;
        let sem = match (&data.sem, need_sem) {
            (Some(s), _) => s.clone(),
            (None, true) => return Err(ModelError::Config("training patches need semantic labels".into())),
            (None, false) => Vec::new(),
        };
        if schedule.semantic {
            terms[0] = Some(tape.cross_entropy(fw.logits, label_vec(&sem))?);
        }
        let mut num_proposals = 0;
        if schedule.offset || schedule.score {
            let inst = data
                .inst
                .as_ref()
                .ok_or_else(|| ModelError::Config("instance training needs instance labels".into()))?;
            let os = fw.offsets.expect("requested");
            if schedule.offset {
                let mut target = Vec::with_capacity(data.coords.len() * 3);
                let mut mask = Vec::with_capacity(data.coords.len());
                for r in &data.point_ranges {
                    let (t, m) = offset_targets(&data.coords[r.clone()], &inst[r.clone()]);
                    target.extend(t);
                    mask.extend(m);
                }
                let (reg, dir) = offset_losses(tape, os, &target, &mask)?;
                terms[1] = Some(reg);
                terms[2] = Some(dir);
            }
            if schedule.score {
                let pred = argmax_rows(&values_f64(tape, fw.logits), self.model.num_classes);
                let off = values_f64(tape, os);
                let mut proposals: Vec<Proposal> = Vec::new();
                let mut targets = Vec::new();
                for r in &data.point_ranges {
                    let coords = &data.coords[r.clone()];
                    let shifted: Vec<[f64; 3]> = coords
                        .iter()
                        .enumerate()
                        .map(|(k, p)| {
                            let i = r.start + k;
                            [p[0] + off[i * 3], p[1] + off[i * 3 + 1], p[2] + off[i * 3 + 2]]
                        })
                        .collect();
                    let mut local = dual_set_cluster(coords, &shifted, &pred[r.clone()], &self.model.instance);
                    targets.extend(score_targets(&local, &inst[r.clone()]));
                    for p in &mut local {
                        p.members.iter_mut().for_each(|m| *m += r.start);
                    }
                    proposals.extend(local);
                }
                num_proposals = proposals.len();
                if !proposals.is_empty() {
                    let logits = score_logits(ctx, fw.point, &data.coords, &proposals)?;
                    terms[3] = Some(score_loss(tape, logits, &targets)?);
                }
            }
        }
        Ok((terms, num_proposals))
    }

    /// Trains one epoch over `patches` in a seeded shuffled order.
    pub fn train_epoch(&mut self, patches: &[PreparedPatch]) -> Result<(Losses, f64, f64)> {
        if patches.is_empty() {
            return Err(ModelError::Config("no training patches".into()));
        }
        self.fix_cycle(patches.len());
        let epoch = self.epoch + 1;
        let schedule = self.schedule(epoch);
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = Losses::default();
        let mut lr = 0.0;
        let mut grad_norm: f64 = 0.0;
        let steps = order.chunks(self.train.batch_size).count() as f64;
        for chunk in order.chunks(self.train.batch_size) {
            let augmented: Vec<PreparedPatch> = if self.train.augment {
                chunk.iter().map(|&i| augment_patch(&patches[i], &self.model, &mut rng)).collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&PreparedPatch> = if self.train.augment {
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &patches[i]).collect()
            };
            let r = self.step(&batch, &schedule, &mut rng)?;
            sum.add(&r.losses, 1.0 / steps);
            lr = r.lr;
            grad_norm = grad_norm.max(r.backbone_grad_norm);
        }
        self.epoch = epoch;
        Ok((sum, lr, grad_norm))
    }

    /// Mean per-patch loss under the current schedule's non-score terms, plus
    /// point-level mIoU and accuracy, in inference mode.
    pub fn evaluate(&self, patches: &[PreparedPatch]) -> Result<EvalReport> {
        let schedule = self.schedule(self.epoch.max(1));
        let mut loss = 0.0;
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in patches {
            let tape = Tape::<f32>::new();
            let ctx = Ctx::new(&tape, &self.params, false);
            let data = assemble_batch::<f32, _>(&[p], &self.model, Phase::Inference, &mut rng)?;
            let instance = schedule.offset && p.inst.is_some();
            let fw = forward(&ctx, &self.model, &data, instance)?;
            let sem = p
                .sem
                .as_ref()
                .ok_or_else(|| ModelError::Config("validation patches need semantic labels".into()))?;
            let mut terms = vec![Some(tape.cross_entropy(fw.logits, label_vec(sem))?)];
            if instance {
                let (t, m) = offset_targets(&p.coords, p.inst.as_ref().expect("checked"));
                let (reg, dir) = offset_losses(&tape, fw.offsets.expect("requested"), &t, &m)?;
                terms.push(Some(reg));
                terms.push(Some(dir));
            }
            let l = total(&tape, &terms)?.expect("semantic term");
            loss += tape.item(l) as f64;
            pred.extend(argmax_rows(&values_f64(&tape, fw.logits), self.model.num_classes));
            gt.extend_from_slice(sem);
        }
        if patches.is_empty() {
            return Err(ModelError::Config("no validation patches".into()));
        }
        let report = semantic_metrics(&pred, &gt, self.model.num_classes)?;
        Ok(EvalReport {
            loss: loss / patches.len() as f64,
            miou: report.mean.iou,
            oacc: report.overall_accuracy,
        })
    }

    /// Runs the remaining epochs. Every `eval_every` epochs the validation
    /// set (or the training set when none is given) is evaluated; the
    /// callback sees each record and the trainer after the epoch.
    pub fn fit<F>(&mut self, train: &[PreparedPatch], val: &[PreparedPatch], mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&EpochRecord, &Trainer) -> Result<()>,
    {
        let mut records = Vec::new();
        while self.epoch < self.train.epochs {
            let (losses, lr, grad_norm) = self.train_epoch(train)?;
            let evaluate = self.epoch % self.train.eval_every == 0 || self.epoch == self.train.epochs;
            let mut record = EpochRecord {
                epoch: self.epoch,
                step: self.opt.step,
                lr,
                losses,
                backbone_grad_norm: grad_norm,
                val_loss: None,
                val_miou: None,
                val_oacc: None,
                best: false,
            };
            if evaluate {
                let r = self.evaluate(if val.is_empty() { train } else { val })?;
                record.best = self.best_val.is_none_or(|b| r.loss < b);
                if record.best {
                    self.best_val = Some(r.loss);
                }
                record.val_loss = Some(r.loss);
                record.val_miou = Some(r.miou);
                record.val_oacc = Some(r.oacc);
            }
            on_epoch(&record, self)?;
            records.push(record);
        }
        Ok(records)
    }

    /// Parameters, optimizer moments and a small state file next to them.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, Some(&self.opt))?;
        let state = format!(
            "epoch={}\nstep={}\ncycle_len={}\nbest_val={}\n",
            self.epoch,
            self.opt.step,
            self.opt.cycle_len,
            self.best_val.map_or("none".to_string(), |v| format!("{v:?}")),
        );
        let sp = state_path(path);
        std::fs::write(&sp, state).map_err(|e| ModelError::io(&sp, e))
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn resume(model: ModelConfig, train: TrainConfig, path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, &model, train.seed)?;
        let mut t = Self::with_params(model, train, ck.params);
        if let Some((m, v)) = ck.moments {
            t.opt.m = m;
            t.opt.v = v;
        }
        let sp = state_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| ModelError::io(&sp, e))?;
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let num = |k: &str| -> Result<u64> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ModelError::Config(format!("{}: missing or bad `{k}`", sp.display())))
        };
        t.epoch = num("epoch")? as usize;
        t.opt.step = num("step")?;
        t.opt.cycle_len = num("cycle_len")?;
        t.best_val = kv.get("best_val").and_then(|v| v.parse().ok());
        Ok(t)
    }
}

pub fn state_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state");
    s.into()
}

/// Scalar loss terms reported by a step, keyed by name.
pub fn loss_map(l: &Losses) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([("total", l.total), ("sem", l.sem), ("reg", l.reg), ("dir", l.dir), ("score", l.score)])
}

#[allow(dead_code)]
fn _assert_send(_: Arc<Trainer>) {}
