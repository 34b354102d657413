use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Mode, TrainConfig};
use super::objective::{batch_objective, BatchLabels, ObjectiveInputs};
use super::optim::Sgd;
use crate::data::{augment, episodes_per_epoch, sample_training_batch, stack_images, DatasetSplit, Splits};
use crate::error::{BmlError, Result};
use crate::evaluator::{meta_test, Branch, MetaTestConfig};
use crate::losses::LossReport;
use crate::model::{BmlNetwork, ViewMask};
use crate::rng::{derive_seed, rng_from, stream};

/// One line of `log.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_total_loss: f64,
    pub mean_d_el: f64,
    pub val_accuracy: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs_completed: usize,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub summaries: Vec<EpochSummary>,
}

/// `runs/<name>/` with its fixed layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        Ok(Self { root })
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn epochs_log(&self) -> PathBuf {
        self.root.join("reports").join("epochs.jsonl")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Drops log lines at or after `step`, so a resumed run does not repeat
/// steps logged after its checkpoint.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = std::fs::File::open(path)?;
    let mut kept = String::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        let rec: StepRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => continue,
        };
        if rec.step < step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

fn append_json_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// The branch used for model selection in each mode.
pub fn selection_branch(mode: Mode) -> Branch {
    match mode {
        Mode::Bml => Branch::Fused,
        Mode::BaselineGlobal => Branch::Global,
        Mode::BaselineLocal => Branch::Local,
    }
}

pub struct Trainer {
    config: TrainConfig,
    network: BmlNetwork,
    optimizer: Sgd,
    trainable: Vec<bool>,
    epoch: usize,
    global_step: u64,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
}

fn trainable_mask(network: &BmlNetwork, mode: Mode) -> Vec<bool> {
    let mut mask = vec![true; network.params().len()];
    let (_, global, local) = network.part_indices();
    let (cw, cb) = network.classifier_indices();
    let frozen: Vec<usize> = match mode {
        Mode::Bml => Vec::new(),
        Mode::BaselineGlobal => local,
        Mode::BaselineLocal => global.into_iter().chain([cw, cb]).collect(),
    };
    frozen.into_iter().for_each(|i| mask[i] = false);
    mask
}

impl Trainer {
    pub fn new(config: TrainConfig, splits: &Splits) -> Result<Self> {
        config.validate()?;
        let base = &splits.base;
        base.validate()?;
        if base.num_classes() < config.train_spec.n_way {
            return Err(BmlError::TooFewClasses {
                needed: config.train_spec.n_way,
                available: base.num_classes(),
            });
        }
        if base.image_size != config.model.input_size {
            return Err(BmlError::Config(format!(
                "dataset images are {}px, model expects {}px",
                base.image_size, config.model.input_size
            )));
        }
        let network = BmlNetwork::new(config.model.clone(), base.num_classes(), derive_seed(config.seed, &[stream::INIT]))?;
        Ok(Self::assemble(config, network, None, 0, 0, None, None))
    }

    fn assemble(
        config: TrainConfig,
        network: BmlNetwork,
        velocity: Option<Vec<Vec<f32>>>,
        epoch: usize,
        global_step: u64,
        best_val: Option<f64>,
        best_epoch: Option<usize>,
    ) -> Self {
        let mut optimizer = Sgd::new(network.params(), config.momentum, config.weight_decay);
        if let Some(v) = velocity {
            optimizer.velocity = v;
        }
        let trainable = trainable_mask(&network, config.mode);
        Self {
            config,
            network,
            optimizer,
            trainable,
            epoch,
            global_step,
            best_val,
            best_epoch,
        }
    }

    /// Continues from a checkpoint. A `config` that differs from the stored
    /// one is refused unless `force` is set, in which case it replaces it.
    pub fn resume(checkpoint: Checkpoint, config: Option<TrainConfig>, force: bool) -> Result<Self> {
        let network = checkpoint.network()?;
        let stored_hash = checkpoint.config.hash();
        let config = match config {
            Some(cfg) if cfg.hash() != stored_hash => {
                if !force {
                    return Err(BmlError::Config(format!(
                        "config hash {} differs from checkpoint {stored_hash}; pass --force to resume anyway",
                        cfg.hash()
                    )));
                }
                cfg.validate()?;
                if cfg.model != checkpoint.config.model {
                    return Err(BmlError::Config("architecture changed; cannot resume".into()));
                }
                log::warn!("resuming with a changed config ({stored_hash} -> {})", cfg.hash());
                cfg
            }
            _ => checkpoint.config.clone(),
        };
        let velocity = (!checkpoint.velocity.is_empty()).then(|| checkpoint.velocity.clone());
        Ok(Self::assemble(
            config,
            network,
            velocity,
            checkpoint.epoch,
            checkpoint.global_step,
            checkpoint.best_val,
            checkpoint.best_epoch,
        ))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &BmlNetwork {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut BmlNetwork {
        &mut self.network
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            global_step: self.global_step,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            num_classes: self.network.classifier().num_classes(),
            config: self.config.clone(),
            params: self.network.params().clone(),
            buffers: self.network.buffers().clone(),
            velocity: self.optimizer.velocity.clone(),
        }
    }

    pub fn steps_per_epoch(&self, base: &DatasetSplit) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| episodes_per_epoch(base.num_images(), self.config.train_spec))
    }

    /// One optimization step on a freshly sampled batch.
    pub fn train_step(&mut self, base: &DatasetSplit) -> Result<StepRecord> {
        let cfg = &self.config;
        let step = self.global_step;
        let episode = sample_training_batch(base, cfg.train_spec, derive_seed(cfg.seed, &[stream::TRAIN_EPISODE, step]))?;
        let mut aug_rng = rng_from(cfg.seed, &[stream::AUGMENT, step]);
        let images: Vec<_> = episode.items().map(|it| augment(&it.image, &cfg.augment, &mut aug_rng)).collect();
        let batch = stack_images(&images)?;
        let views = ViewMask {
            global: cfg.mode.uses_global(),
            local: cfg.mode.uses_local(),
        };
        let mut drop_rng = rng_from(cfg.seed, &[stream::DROPBLOCK, step]);
        let forward = self.network.forward_train(batch.view(), views, &mut drop_rng)?;

        let global_labels: Vec<usize> = episode.items().map(|it| it.global_label).collect();
        let (support, query) = (episode.support_labels(), episode.query_labels());
        let mut losses = cfg.losses;
        losses.elastic = losses.elastic.at_epoch(self.epoch + 1, cfg.epochs);
        let weights = cfg.mode.effective_weights(cfg.losses.weights);
        let clf = self.network.classifier();
        let (w64, b64) = (clf.weight.mapv(f64::from), clf.bias.mapv(f64::from));
        let g64 = forward.global_map.as_ref().map(|m| m.mapv(f64::from));
        let l64 = forward.local_map.as_ref().map(|m| m.mapv(f64::from));
        let out = batch_objective(
            ObjectiveInputs {
                global_map: g64.as_ref().map(|m| m.view()),
                local_map: l64.as_ref().map(|m| m.view()),
                classifier_weight: w64.view(),
                classifier_bias: b64.view(),
            },
            BatchLabels {
                global: &global_labels,
                support: &support,
                query: &query,
            },
            &losses,
            weights,
        )?;

        let mut grads = self.network.params().zeros_like();
        let to32 = |a: &ndarray::Array4<f64>| a.mapv(|v| v as f32);
        let gg = out.grad_global_map.as_ref().map(to32);
        let gl = out.grad_local_map.as_ref().map(to32);
        self.network.backward(&forward.cache, gg.as_ref(), gl.as_ref(), &mut grads)?;
        let (cw, cb) = self.network.classifier_indices();
        if let (Some(gw), Some(gb)) = (&out.grad_classifier_weight, &out.grad_classifier_bias) {
            add_into(grads.get_mut(cw), gw.view());
            grads.get_mut(cb).iter_mut().zip(gb).for_each(|(g, v)| *g += *v as f32);
        }
        if !grads.is_all_finite() {
            return Err(BmlError::Diverged(out.report));
        }
        let lr = cfg.lr_at(self.epoch);
        let record = StepRecord {
            epoch: self.epoch,
            step,
            lr,
            report: out.report,
        };
        self.optimizer.step(self.network.params_mut(), &grads, lr, &self.trainable);
        self.global_step += 1;
        Ok(record)
    }

    /// Meta-test accuracy on `val` for this mode's branch, or `None` when
    /// validation is off or the split cannot serve the validation spec.
    pub fn validate(&self, val: &DatasetSplit) -> Result<Option<f64>> {
        let spec = self.config.val_spec;
        let servable = val.num_classes() >= spec.n_way && val.min_images_per_class() >= spec.k_shot + spec.q_query;
        if self.config.val_episodes == 0 || !servable {
            return Ok(None);
        }
        let mut mt = MetaTestConfig::new(spec, self.config.val_episodes, derive_seed(self.config.seed, &[stream::VAL_EPISODE]));
        mt.metric.squared = self.config.losses.metric.squared;
        let report = meta_test(&self.network, val, &mt)?;
        Ok(Some(report.get(selection_branch(self.config.mode)).mean_accuracy))
    }

    /// Trains one epoch, then validates.
    pub fn run_epoch(&mut self, splits: &Splits, sink: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<EpochSummary> {
        let steps = self.steps_per_epoch(&splits.base);
        let lr = self.config.lr_at(self.epoch);
        let (mut total, mut d_el) = (0.0, 0.0);
        for _ in 0..steps {
            let rec = match self.train_step(&splits.base) {
                Ok(r) => r,
                Err(BmlError::Diverged(report)) => {
                    let rec = StepRecord {
                        epoch: self.epoch,
                        step: self.global_step,
                        lr,
                        report,
                    };
                    sink(&rec)?;
                    return Err(BmlError::Diverged(report));
                }
                Err(e) => return Err(e),
            };
            total += rec.report.total_loss;
            d_el += rec.report.mean_d_el;
            sink(&rec)?;
        }
        self.epoch += 1;
        let val_accuracy = self.validate(&splits.val)?;
        let improved = match (val_accuracy, self.best_val) {
            (Some(v), Some(best)) => v > best,
            (Some(_), None) => true,
            (None, _) => self.best_val.is_none(),
        };
        if improved {
            self.best_val = val_accuracy;
            self.best_epoch = Some(self.epoch);
        }
        Ok(EpochSummary {
            epoch: self.epoch,
            lr,
            steps,
            mean_total_loss: total / steps as f64,
            mean_d_el: d_el / steps as f64,
            val_accuracy,
            improved,
        })
    }

    /// Trains until `until_epoch` (capped at the configured epochs). With a
    /// run directory, steps go to `log.jsonl` and checkpoints are written
    /// after every epoch.
    pub fn fit(
        &mut self,
        splits: &Splits,
        until_epoch: usize,
        run: Option<&RunDir>,
        sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        if let Some(run) = run {
            truncate_log(&run.log(), self.global_step)?;
            if self.epoch == 0 && self.global_step == 0 {
                self.checkpoint().save(&run.checkpoint("init"))?;
            }
        }
        let until = until_epoch.min(self.config.epochs);
        let mut summaries = Vec::new();
        while self.epoch < until {
            let started = Instant::now();
            let log_path = run.map(RunDir::log);
            let summary = self.run_epoch(splits, &mut |rec| {
                if let Some(p) = &log_path {
                    append_json_line(p, rec)?;
                }
                sink(rec)
            })?;
            log::info!(
                "epoch {}/{} lr {:.2e} loss {:.4} val {} ({:.1}s)",
                summary.epoch,
                self.config.epochs,
                summary.lr,
                summary.mean_total_loss,
                summary.val_accuracy.map_or("-".into(), |v| format!("{v:.2}")),
                started.elapsed().as_secs_f64()
            );
            if let Some(run) = run {
                let ckpt = self.checkpoint();
                ckpt.save(&run.checkpoint("last"))?;
                if summary.improved {
                    ckpt.save(&run.checkpoint("best"))?;
                }
                append_json_line(&run.epochs_log(), &summary)?;
            }
            summaries.push(summary);
        }
        Ok(TrainOutcome {
            epochs_completed: self.epoch,
            best_val: self.best_val,
            best_epoch: self.best_epoch,
            summaries,
        })
    }
}

fn add_into(dst: &mut [f32], src: ArrayView2<f64>) {
    let src = src.as_standard_layout();
    dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d += *s as f32);
}

/// Trains a fresh model for the configured number of epochs.
pub fn train(config: TrainConfig, splits: &Splits, run: Option<&RunDir>) -> Result<(Trainer, TrainOutcome)> {
    let mut trainer = Trainer::new(config, splits)?;
    let epochs = trainer.config.epochs;
    let outcome = trainer.fit(splits, epochs, run, &mut |_| Ok(()))?;
    Ok((trainer, outcome))
}
