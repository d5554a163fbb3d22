use crate::autodiff::{ParamBind, ParamGroup, ParamSet, Tape, ValId};
use crate::data::NUM_CLASSES;
use crate::error::{CoreError, Result};
use crate::eval::macro_f1_from_pairs;
use crate::exec;
use crate::rng::substream_indexed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::wbce_loss_on_tape;
use super::optim::AdamW;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Baseline,
    FtLc,
    FtCLora,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Baseline => write!(f, "baseline"),
            TrainMode::FtLc => write!(f, "ft-lc"),
            TrainMode::FtCLora => write!(f, "ft-c-lora"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub w_plus: [f64; NUM_CLASSES],
    pub seed: u64,
    pub patience: usize,
    pub mode: TrainMode,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr_head: 3e-3,
            lr_backbone: 3e-4,
            w_plus: [1.0; NUM_CLASSES],
            seed: 0,
            patience: 5,
            mode: TrainMode::Baseline,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Parameter("epochs and batch_size must be positive".into()));
        }
        if self.lr_head < 0.0 || self.lr_backbone < 0.0 {
            return Err(CoreError::Parameter("learning rates must be non-negative".into()));
        }
        if self.mode == TrainMode::FtCLora && self.lr_backbone > self.lr_head {
            return Err(CoreError::Parameter(format!(
                "adapter learning rate {} must not exceed head learning rate {}",
                self.lr_backbone, self.lr_head
            )));
        }
        if self.w_plus.iter().any(|&w| w < 1.0) {
            return Err(CoreError::Parameter("w_plus must be >= 1 elementwise".into()));
        }
        Ok(())
    }
}

/// Anything trainable with the weighted-BCE objective.
pub trait TrainableModel: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Build the `[1 x 4]` probability node for one sample.
    fn probs_on_tape(
        &self,
        tape: &mut Tape,
        bind: &ParamBind,
        input: &Self::Input,
    ) -> Result<ValId>;

    fn predict(&self, input: &Self::Input) -> Result<[f64; NUM_CLASSES]>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_macro_f1: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

/// Per-epoch CSV in the run-directory schema.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,val_macro_f1,lr_head,lr_backbone\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.loss, h.val_macro_f1, h.lr_head, h.lr_backbone
        ));
    }
    out
}

/// Deterministic mini-batch training with per-group learning rates and
/// early stopping on validation macro-F1. Returns with the model holding
/// the parameters of the best validation epoch.
pub fn train<M: TrainableModel>(
    model: &mut M,
    train_set: &[(M::Input, [f64; NUM_CLASSES])],
    val_set: &[(M::Input, [f64; NUM_CLASSES])],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CoreError::Parameter("train and validation sets must be non-empty".into()));
    }

    let mut optimizer = AdamW::new(model.params(), cfg.weight_decay);
    let lr_of = |group: ParamGroup| match group {
        ParamGroup::Head => cfg.lr_head,
        ParamGroup::Backbone | ParamGroup::Adapter => cfg.lr_backbone,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_params = model.params().clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs_since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = substream_indexed(cfg.seed, "batch-order", epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<Option<Vec<f64>>>)>> =
                exec::par_map_ref(batch, |&i| {
                    let (input, target) = &train_set[i];
                    let mut tape = Tape::new();
                    let bind = model.params().bind(&mut tape);
                    let probs = model.probs_on_tape(&mut tape, &bind, input)?;
                    let loss = wbce_loss_on_tape(&mut tape, probs, &[*target], &cfg.w_plus);
                    let loss_value = tape.scalar(loss);
                    let mut grads = tape.backward(loss);
                    let per_param: Vec<Option<Vec<f64>>> =
                        bind.ids.iter().map(|&id| grads.take(id)).collect();
                    Ok((loss_value, per_param))
                });

            let mut mean_grads: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f64;
            for res in results {
                let (loss_value, per_param) = res?;
                if !loss_value.is_finite() {
                    return Err(CoreError::Training(format!(
                        "non-finite loss at epoch {epoch}, batch {batch_idx} \
                         (lr_head {}, lr_backbone {})",
                        cfg.lr_head, cfg.lr_backbone
                    )));
                }
                batch_loss += loss_value * scale;
                for (slot, grad) in mean_grads.iter_mut().zip(per_param) {
                    if let Some(g) = grad {
                        match slot {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&g) {
                                    *a += v * scale;
                                }
                            }
                            None => {
                                *slot = Some(g.iter().map(|v| v * scale).collect());
                            }
                        }
                    }
                }
            }
            optimizer.step(model.params_mut(), &mean_grads, lr_of);
            epoch_loss += batch_loss;
            n_batches += 1;
        }

        let val_pairs: Vec<([f64; NUM_CLASSES], [bool; NUM_CLASSES])> =
            exec::par_map_ref(val_set, |(input, target)| {
                let probs = model.predict(input).unwrap_or([0.5; NUM_CLASSES]);
                (probs, target.map(|t| t >= 0.5))
            });
        let val_f1 = macro_f1_from_pairs(&val_pairs, 0.5);

        history.push(EpochStats {
            epoch,
            loss: epoch_loss / n_batches as f64,
            val_macro_f1: val_f1,
            lr_head: cfg.lr_head,
            lr_backbone: cfg.lr_backbone,
        });

        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best_params = model.params().clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    Ok(TrainOutcome { history, best_epoch, best_val_macro_f1: best_f1 })
}

/// Episode-grouped validation carve-out (default 10% of the training set).
pub fn carve_validation<T>(
    items: Vec<(T, [f64; NUM_CLASSES], String)>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<(T, [f64; NUM_CLASSES])>, Vec<(T, [f64; NUM_CLASSES])>)> {
    let pairs: Vec<(String, String)> = items
        .iter()
        .enumerate()
        .map(|(i, (_, _, ep))| (i.to_string(), ep.clone()))
        .collect();
    let episodes: std::collections::HashSet<&String> =
        items.iter().map(|(_, _, ep)| ep).collect();
    // Fall back to an ungrouped carve-out when everything is one episode.
    let grouped = episodes.len() >= 2;
    let split = crate::data::split_dataset(&pairs, fraction, grouped, seed)?;
    let val_ids: std::collections::HashSet<usize> =
        split.test.iter().map(|s| s.parse().unwrap()).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, (input, target, _)) in items.into_iter().enumerate() {
        if val_ids.contains(&i) {
            val.push((input, target));
        } else {
            train.push((input, target));
        }
    }
    Ok((train, val))
}

impl TrainableModel for crate::model::SpaceTimeModel {
    type Input = crate::autodiff::Tensor;

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn probs_on_tape(
        &self,
        tape: &mut Tape,
        bind: &ParamBind,
        input: &Self::Input,
    ) -> Result<ValId> {
        self.forward_on_tape(tape, bind, input)
    }

    fn predict(&self, input: &Self::Input) -> Result<[f64; NUM_CLASSES]> {
        crate::model::SpaceTimeModel::predict(self, input)
    }
}
