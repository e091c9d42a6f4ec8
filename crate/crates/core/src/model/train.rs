use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{Batch, LossParts, StepNoise, StepSettings};
use super::pretrain::{pretrain_features, PretrainRecord};
use super::{encode_ratings, Vbae};
use crate::error::{Error, Result};
use crate::eval::{dense_features, evaluate, EvalSet};
use crate::ingest::{InteractionMatrix, SplitSpec, UserFeatureMatrix};
use crate::stochastic::{NoiseSource, NoiseStream};
use crate::tensor::{AdamState, BatchStats, ParamStore};

/// Everything the trainer reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    /// Full interaction matrix (training users' rows are used whole).
    pub interactions: &'a InteractionMatrix,
    pub split: &'a SplitSpec,
    pub features: Option<&'a UserFeatureMatrix>,
}

/// Per-epoch training summary, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// β at the last b-step update of the epoch.
    pub beta: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub b_step: LossParts,
    pub t_step: Option<LossParts>,
    pub alpha_mean: Option<f64>,
    pub alpha_std: Option<f64>,
    pub val_recall_20: Option<f64>,
    pub val_recall_40: Option<f64>,
    pub val_ndcg_100: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation NDCG@100 (the final ones if there
    /// are no validation users).
    pub model: Vbae,
    pub history: Vec<EpochRecord>,
    pub pretrain: Vec<PretrainRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_ndcg: Option<f64>,
}

fn accumulate(total: &mut LossParts, part: &LossParts, weight: f64) {
    total.total += weight * part.total;
    total.rating_nll += weight * part.rating_nll;
    total.feature_nll += weight * part.feature_nll;
    total.kl_b += weight * part.kl_b;
    total.kl_channel += weight * part.kl_channel;
    total.kl_t += weight * part.kl_t;
    total.penalty += weight * part.penalty;
}

/// Mini-batches of `size`; a trailing batch of one user joins the previous one
/// so batch norm always sees at least two samples.
fn batches(users: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = users.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("batch") = &users[start..];
    }
    out
}

struct Trainer<'a> {
    data: TrainData<'a>,
    train_users: Vec<usize>,
    observed: Vec<Vec<usize>>,
    source: NoiseSource,
    anneal_steps: u64,
}

impl Trainer<'_> {
    fn features(&self, model: &Vbae, users: &[usize]) -> ndarray::Array2<f64> {
        dense_features(self.data.features, users, model.n_features())
    }

    /// Input rows after dropout; `pass` separates the draws of the two steps.
    fn dropped_rows(&self, model: &Vbae, users: &[usize], epoch: u64, pass: u64) -> (Vec<Vec<usize>>, f64) {
        let p = model.config().input_dropout;
        let rows: Vec<Vec<usize>> = users.iter().map(|&u| self.data.interactions.row(u).to_vec()).collect();
        if p == 0.0 {
            return (rows, 1.0);
        }
        let dropped = users
            .iter()
            .zip(rows)
            .map(|(&u, row)| {
                let mut rng = self.source.rng(NoiseStream::Dropout, 2 * epoch + pass, u as u64);
                let kept: Vec<usize> = row.iter().copied().filter(|_| rng.random::<f64>() >= p).collect();
                if kept.is_empty() {
                    vec![row[rng.random_range(0..row.len())]]
                } else {
                    kept
                }
            })
            .collect();
        (dropped, 1.0 / (1.0 - p))
    }

    fn b_epoch(&self, model: &mut Vbae, adam: &mut AdamState, epoch: usize) -> Result<(LossParts, f64, Vec<f64>)> {
        let config = model.config().clone();
        let mut order = self.train_users.clone();
        order.shuffle(&mut self.source.rng(NoiseStream::Shuffle, epoch as u64, 0));
        let temperature = config.temperature.at(epoch, config.epochs);
        let mut totals = LossParts::default();
        let mut beta = 0.0;
        let mut alphas = Vec::new();
        let mut bn = model.layout().batch_norm(model.params(), &config);
        for chunk in batches(&order, config.batch_size) {
            let (inputs, scale) = self.dropped_rows(model, chunk, epoch as u64, 0);
            let batch = Batch {
                users: chunk.to_vec(),
                inputs,
                input_scale: scale,
                targets: chunk.iter().map(|&u| self.data.interactions.row(u).to_vec()).collect(),
                features: self.features(model, chunk),
            };
            let noise = StepNoise::draw(&self.source, NoiseStream::Collaborative, epoch as u64, chunk, config.latent_dim, config.channel);
            beta = config.beta_max * (adam.steps_taken() as f64 / self.anneal_steps as f64).min(1.0);
            let out = model.b_step_loss(&batch, &noise, StepSettings::new(beta, temperature))?;
            adam.step(model.params_mut(), &out.grads)?;
            if let Some(stats) = out.bn_stats {
                bn.update_running(stats);
                model.layout().clone().store_batch_norm(model.params_mut(), &bn);
            }
            accumulate(&mut totals, &out.parts, chunk.len() as f64 / order.len() as f64);
            alphas.extend(out.alpha);
        }
        Ok((totals, beta, alphas))
    }

    /// Sets the running statistics to the exact mean and variance of the norm
    /// over all training users.
    fn recalibrate(&self, model: &mut Vbae) -> Result<()> {
        let config = model.config().clone();
        let mut norms = Vec::with_capacity(self.train_users.len());
        for chunk in self.train_users.chunks(config.batch_size.max(1)) {
            let rows: Vec<&[usize]> = chunk.iter().map(|&u| self.data.interactions.row(u)).collect();
            let enc = encode_ratings(&config, model.layout(), model.params(), &rows, 1.0, None)?;
            norms.extend(enc.norm);
        }
        let stats = BatchStats::of(&norms)?;
        let mut bn = model.layout().batch_norm(model.params(), &config);
        bn.running_mean = stats.mean;
        bn.running_var = stats.var;
        let layout = model.layout().clone();
        layout.store_batch_norm(model.params_mut(), &bn);
        Ok(())
    }

    fn t_epoch(&self, model: &mut Vbae, adam: &mut AdamState, epoch: usize) -> Result<LossParts> {
        let config = model.config().clone();
        let mut order = self.train_users.clone();
        order.shuffle(&mut self.source.rng(NoiseStream::Shuffle, epoch as u64, 1));
        let temperature = config.temperature.at(epoch, config.epochs);
        let mut totals = LossParts::default();
        for chunk in batches(&order, config.batch_size) {
            let (inputs, scale) = self.dropped_rows(model, chunk, epoch as u64, 1);
            let batch = Batch {
                users: chunk.to_vec(),
                inputs,
                input_scale: scale,
                targets: chunk.iter().map(|&u| self.data.interactions.row(u).to_vec()).collect(),
                features: self.features(model, chunk),
            };
            let noise = StepNoise::draw(&self.source, NoiseStream::Feature, epoch as u64, chunk, config.latent_dim, config.channel);
            let out = model.t_step_loss(&batch, &noise, StepSettings::new(0.0, temperature))?;
            adam.step(model.params_mut(), &out.grads)?;
            accumulate(&mut totals, &out.parts, chunk.len() as f64 / order.len() as f64);
        }
        Ok(totals)
    }
}

fn mean_std(x: &[f64]) -> (Option<f64>, Option<f64>) {
    if x.is_empty() {
        return (None, None);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
    (Some(m), Some(v.sqrt()))
}

/// Alternates one b-step epoch and one t-step epoch, keeping the parameters
/// with the best validation NDCG@100. A non-finite loss or gradient restores
/// the epoch's starting state and retries it once at half the learning rate;
/// a second divergence aborts.
pub fn train(mut model: Vbae, data: TrainData<'_>, history_path: Option<&Path>) -> Result<TrainOutcome> {
    let config = model.config().clone();
    data.split.validate(data.interactions)?;
    if data.interactions.n_items() != model.n_items() {
        return Err(Error::dimension("model items", model.n_items(), data.interactions.n_items()));
    }
    if let Some(f) = data.features {
        if f.n_users() != data.interactions.n_users() || f.dim() != model.n_features() {
            return Err(Error::dimension(
                "feature matrix",
                format!("{} × {}", data.interactions.n_users(), model.n_features()),
                format!("{} × {}", f.n_users(), f.dim()),
            ));
        }
    } else if config.channel.trains_feature_tower() || config.channel == super::ChannelKind::ConcatBaseline {
        return Err(Error::Config(format!("channel `{}` needs user features", config.channel)));
    }
    let train_users: Vec<usize> = data
        .split
        .train_users
        .iter()
        .copied()
        .filter(|&u| !data.interactions.row(u).is_empty())
        .collect();
    if train_users.len() < 2 {
        return Err(Error::EmptyDataset("need at least two training users with interactions".into()));
    }
    let per_epoch = batches(&train_users, config.batch_size).len() as u64;
    let trainer = Trainer {
        data,
        observed: data.split.observed_rows(data.interactions),
        anneal_steps: config
            .beta_anneal_steps
            .unwrap_or(per_epoch * config.epochs as u64 / 2)
            .max(1),
        train_users,
        source: NoiseSource::new(config.seed),
    };
    let mut outcome = TrainOutcome {
        model: model.clone(),
        history: Vec::new(),
        pretrain: Vec::new(),
        best_epoch: None,
        best_val_ndcg: None,
    };
    if config.epochs == 0 {
        return Ok(outcome);
    }
    let mut history_file = match history_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };

    if config.channel.trains_feature_tower() && config.pretrain_epochs > 0 {
        let x = trainer.features(&model, &trainer.train_users);
        let layout = model.layout().clone();
        outcome.pretrain = pretrain_features(&config, &layout, model.params_mut(), &x, config.pretrain_epochs)?;
    }

    let layout = model.layout().clone();
    let mut adam_b = AdamState::new(config.adam, model.params(), layout.collaborative_blocks());
    let mut adam_t = AdamState::new(config.adam, model.params(), layout.feature_blocks());
    let mut best: Option<ParamStore> = None;
    let mut halved = false;
    let mut epoch = 0;
    while epoch < config.epochs {
        let snapshot = (model.params().clone(), adam_b.clone(), adam_t.clone());
        let result = (|| -> Result<EpochRecord> {
            let (b_parts, beta, alphas) = trainer.b_epoch(&mut model, &mut adam_b, epoch)?;
            if config.recalibrate_bn && config.channel.is_fused() {
                trainer.recalibrate(&mut model)?;
            }
            let t_parts = if config.channel.trains_feature_tower() {
                Some(trainer.t_epoch(&mut model, &mut adam_t, epoch)?)
            } else {
                None
            };
            let (alpha_mean, alpha_std) = mean_std(&alphas);
            let mut record = EpochRecord {
                epoch,
                beta,
                temperature: config.temperature.at(epoch, config.epochs),
                learning_rate: adam_b.config.learning_rate,
                b_step: b_parts,
                t_step: t_parts,
                alpha_mean,
                alpha_std,
                val_recall_20: None,
                val_recall_40: None,
                val_ndcg_100: None,
            };
            let val_users = &trainer.data.split.val_users;
            if !val_users.is_empty() {
                let set = EvalSet {
                    users: val_users,
                    observed: &trainer.observed,
                    heldout: &trainer.data.split.heldout,
                    features: trainer.data.features,
                };
                let (report, _) = evaluate(&model, set, config.batch_size)?;
                record.val_recall_20 = Some(report.recall_20);
                record.val_recall_40 = Some(report.recall_40);
                record.val_ndcg_100 = Some(report.ndcg_100);
            }
            Ok(record)
        })();
        match result {
            Ok(record) => {
                info!(
                    "epoch {epoch}: b-loss {:.4}, val NDCG@100 {}",
                    record.b_step.total,
                    record.val_ndcg_100.map_or("-".into(), |v| format!("{v:.4}"))
                );
                if let Some(f) = history_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&record)?)?;
                }
                if let Some(v) = record.val_ndcg_100 {
                    if outcome.best_val_ndcg.is_none_or(|b| v > b) {
                        outcome.best_val_ndcg = Some(v);
                        outcome.best_epoch = Some(epoch);
                        best = Some(model.params().clone());
                    }
                }
                outcome.history.push(record);
                epoch += 1;
            }
            Err(Error::Divergence(msg)) if !halved => {
                warn!("epoch {epoch} diverged ({msg}); retrying at half the learning rate");
                halved = true;
                *model.params_mut() = snapshot.0;
                adam_b = snapshot.1;
                adam_t = snapshot.2;
                adam_b.config.learning_rate *= 0.5;
                adam_t.config.learning_rate *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(f) = history_file.as_mut() {
        f.flush()?;
    }
    if let Some(params) = best {
        *model.params_mut() = params;
    }
    outcome.model = model;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let users: Vec<usize> = (0..7).collect();
        let b = batches(&users, 3);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[3, 4, 5, 6]);
        assert_eq!(batches(&users, 7).len(), 1);
        assert_eq!(batches(&users[..6], 3).len(), 2);
    }
}
