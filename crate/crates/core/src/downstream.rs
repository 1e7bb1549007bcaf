//! Layer combination and the frame-classification probe.
//!
//! The probe is a per-frame linear softmax classifier fed by a trainable
//! softmax-weighted sum of encoder layers. It is deliberately tiny: its
//! accuracy under noise measures how useful the (possibly enhanced)
//! features are, standing in for heavyweight downstream tasks. Training
//! touches only the task weights and the probe; encoder and enhancer stay
//! frozen.

use std::sync::Arc;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::datasim::{Corpus, LoadedItem, Split};
use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::semodel::SEParams;
use crate::signal::Waveform;
use crate::sslenc::{EncoderParams, FeatureStack};
use crate::tensor::Tensor;

/// Trainable layer-combination weights, parameterized through a softmax so
/// optimization is unconstrained while the effective weights stay
/// nonnegative and normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub logits: Tensor, // [n]
}

impl TaskWeights {
    pub fn uniform(n: usize) -> Self {
        TaskWeights {
            logits: Tensor::zeros(&[n]),
        }
    }

    /// Logits so extreme the softmax is an exact indicator on layer `k`.
    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut logits = Tensor::zeros(&[n]);
        logits.data_mut()[k] = 2000.0;
        TaskWeights { logits }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(self.logits.data())
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-frame linear classifier: D features to C class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub w: Tensor, // [c, d]
    pub b: Tensor, // [c]
}

impl ProbeParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ProbeParams {
            w: Tensor::zeros(&[classes, dim]),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn random(seed: u64, classes: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        ProbeParams {
            w: Tensor::from_vec(
                &[classes, dim],
                (0..classes * dim)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
            ),
            b: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[0]
    }
}

/// F = sum_n softmax(logits)_n * layer_n.
pub fn weighted_features(stack: &FeatureStack, tw: &TaskWeights) -> Result<Tensor> {
    stack.combine(&tw.weights())
}

/// Which signal feeds the probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeInput {
    Clean,
    Noisy,
}

/// Probe training regime: clean inputs (the default) or noisy inputs
/// without enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTrainMode {
    Official,
    NoiseRobust,
}

impl ProbeTrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTrainMode::Official => "official",
            ProbeTrainMode::NoiseRobust => "noise_robust",
        }
    }

    fn input(self) -> ProbeInput {
        match self {
            ProbeTrainMode::Official => ProbeInput::Clean,
            ProbeTrainMode::NoiseRobust => ProbeInput::Noisy,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 20,
            lr: 1e-2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedProbe {
    pub task_weights: TaskWeights,
    pub probe: ProbeParams,
    pub dev_accuracy: f64,
}

/// The full pipeline up to features: optional enhancement, then encoding.
pub fn extract_features(
    encoder: &EncoderParams,
    frontend: Option<&SEParams>,
    wave: &Waveform,
) -> Result<FeatureStack> {
    match frontend {
        Some(se) => encoder.encode(&se.enhance(wave)?),
        None => encoder.encode(wave),
    }
}

/// Feature stack plus frame labels truncated to the feature frame count.
fn item_features(
    encoder: &EncoderParams,
    frontend: Option<&SEParams>,
    item: &LoadedItem,
    input: ProbeInput,
) -> Result<(FeatureStack, Arc<Vec<u16>>)> {
    let wave = match input {
        ProbeInput::Clean => &item.source,
        ProbeInput::Noisy => &item.mixture,
    };
    let stack = extract_features(encoder, frontend, wave)?;
    let (_, _, frames) = stack.dims();
    if item.labels.len() < frames {
        return Err(Error::MisalignedLabels {
            labels: item.labels.len(),
            frames,
        });
    }
    Ok((stack, Arc::new(item.labels[..frames].to_vec())))
}

/// Train (task weights, probe) by cross entropy over frames; everything
/// upstream is frozen. Deterministic in the config seed.
pub fn train_probe(
    corpus: &Corpus,
    encoder: &EncoderParams,
    frontend: Option<&SEParams>,
    mode: ProbeTrainMode,
    cfg: &ProbeTrainConfig,
) -> Result<TrainedProbe> {
    let train_items = corpus.load_split(Split::Train)?;
    let dev_items = corpus.load_split(Split::Dev)?;
    let (n_layers, dim, _) = encoder.layer_dims();
    let classes = train_items
        .iter()
        .flat_map(|i| i.labels.iter())
        .map(|&l| l as usize + 1)
        .max()
        .ok_or(Error::EmptyCorpus)?;

    let feats: Result<Vec<_>> = train_items
        .par_iter()
        .map(|item| item_features(encoder, frontend, item, mode.input()))
        .collect();
    let feats = feats?;

    let mut tw = TaskWeights::uniform(n_layers);
    let mut probe = ProbeParams::zeros(classes, dim);

    let mut order: Vec<usize> = (0..feats.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "probe-order", epoch as u64));
        order.shuffle(&mut rng);
        for &idx in &order {
            let (stack, labels) = &feats[idx];
            sgd_step(&mut tw, &mut probe, stack, labels.clone(), cfg.lr);
        }
    }

    let dev_refs: Vec<(FeatureStack, Arc<Vec<u16>>)> = dev_items
        .par_iter()
        .map(|item| item_features(encoder, frontend, item, mode.input()))
        .collect::<Result<_>>()?;
    let dev_accuracy = accuracy_on_features(&dev_refs, &tw, &probe);

    Ok(TrainedProbe {
        task_weights: tw,
        probe,
        dev_accuracy,
    })
}

fn sgd_step(
    tw: &mut TaskWeights,
    probe: &mut ProbeParams,
    stack: &FeatureStack,
    labels: Arc<Vec<u16>>,
    lr: f64,
) {
    let mut tape = Tape::new();
    let theta = tape.leaf(tw.logits.clone(), true);
    let w = tape.leaf(probe.w.clone(), true);
    let b = tape.leaf(probe.b.clone(), true);

    let s = tape.softmax1d(theta);
    let layer_ids: Vec<_> = stack
        .layers()
        .iter()
        .map(|l| tape.constant(l.clone()))
        .collect();
    let combined = tape.lin_comb(s, &layer_ids);
    let logits = tape.matmul(w, combined);
    let logits = tape.add_col_vec(logits, b);
    let loss = tape.cross_entropy_frames(logits, labels);

    let mut grads = tape.backward(loss);
    if let Some(g) = grads.take(theta) {
        tw.logits.axpy(-lr, &g);
        tw.logits.round_to_f32();
    }
    if let Some(g) = grads.take(w) {
        probe.w.axpy(-lr, &g);
        probe.w.round_to_f32();
    }
    if let Some(g) = grads.take(b) {
        probe.b.axpy(-lr, &g);
        probe.b.round_to_f32();
    }
}

/// Frame accuracy of a trained probe over one corpus split.
pub fn eval_probe(
    corpus: &Corpus,
    split: Split,
    encoder: &EncoderParams,
    frontend: Option<&SEParams>,
    tw: &TaskWeights,
    probe: &ProbeParams,
    input: ProbeInput,
) -> Result<f64> {
    let items = corpus.load_split(split)?;
    let feats: Result<Vec<_>> = items
        .par_iter()
        .map(|item| item_features(encoder, frontend, item, input))
        .collect();
    Ok(accuracy_on_features(&feats?, tw, probe))
}

/// Accuracy from already-extracted features; shared by every evaluation
/// path so "evaluate through the frontend" and "evaluate pre-enhanced
/// audio" are the same computation.
pub fn accuracy_on_features(
    feats: &[(FeatureStack, Arc<Vec<u16>>)],
    tw: &TaskWeights,
    probe: &ProbeParams,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (stack, labels) in feats {
        let combined = stack.combine(&tw.weights()).expect("validated stack");
        let (d, frames) = (combined.shape()[0], combined.shape()[1]);
        let c = probe.classes();
        for t in 0..frames {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ci in 0..c {
                let mut v = probe.b.data()[ci];
                for di in 0..d {
                    v += probe.w.data()[ci * d + di] * combined.data()[di * frames + t];
                }
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            if best == labels[t] as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{build_corpus, CorpusConfig};
    use crate::semodel::{init_se_model, SEConfig};
    use crate::sslenc::{init_frozen_encoder, EncoderConfig};
    use rand::Rng;

    fn rand_layer(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Tensor {
        Tensor::from_vec(
            &[d, t],
            (0..d * t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn one_hot_selects_a_layer_verbatim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![
            rand_layer(&mut rng, 3, 4),
            rand_layer(&mut rng, 3, 4),
            rand_layer(&mut rng, 3, 4),
        ];
        let stack = FeatureStack::new(layers.clone(), 80).unwrap();
        let tw = TaskWeights::one_hot(3, 1);
        let got = weighted_features(&stack, &tw).unwrap();
        assert_eq!(got, layers[1]);
    }

    #[test]
    fn uniform_weights_on_identical_layers_return_that_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = rand_layer(&mut rng, 4, 5);
        let stack = FeatureStack::new(vec![layer.clone(); 4], 80).unwrap();
        let tw = TaskWeights::uniform(4);
        let got = weighted_features(&stack, &tw).unwrap();
        for (a, b) in got.data().iter().zip(layer.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_case_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l0 = rand_layer(&mut rng, 3, 7);
        let l1 = rand_layer(&mut rng, 3, 7);
        let stack = FeatureStack::new(vec![l0.clone(), l1.clone()], 80).unwrap();
        let mut tw = TaskWeights::uniform(2);
        tw.logits.data_mut()[0] = 0.3;
        tw.logits.data_mut()[1] = -0.9;
        let w = tw.weights();
        let got = weighted_features(&stack, &tw).unwrap();
        for i in 0..got.numel() {
            let want = w[0] * l0.data()[i] + w[1] * l1.data()[i];
            assert!((got.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_features_is_linear_in_the_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f: Vec<Tensor> = (0..3).map(|_| rand_layer(&mut rng, 2, 5)).collect();
        let g: Vec<Tensor> = (0..3).map(|_| rand_layer(&mut rng, 2, 5)).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<Tensor> = f
            .iter()
            .zip(&g)
            .map(|(x, y)| {
                let mut t = Tensor::zeros(x.shape());
                t.axpy(a, x);
                t.axpy(b, y);
                t
            })
            .collect();
        let tw = TaskWeights::uniform(3);
        let ws_f = weighted_features(&FeatureStack::new(f, 80).unwrap(), &tw).unwrap();
        let ws_g = weighted_features(&FeatureStack::new(g, 80).unwrap(), &tw).unwrap();
        let ws_combo = weighted_features(&FeatureStack::new(combo, 80).unwrap(), &tw).unwrap();
        for i in 0..ws_combo.numel() {
            let want = a * ws_f.data()[i] + b * ws_g.data()[i];
            assert!((ws_combo.data()[i] - want).abs() < 1e-9);
        }
    }

    fn tiny_corpus(master_seed: u64) -> (tempfile::TempDir, Corpus) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_train: 12,
            n_dev: 4,
            n_eval: 4,
            master_seed,
            ..CorpusConfig::default()
        };
        let corpus = build_corpus(&cfg, dir.path()).unwrap();
        (dir, corpus)
    }

    #[test]
    fn random_probe_sits_at_chance_level() {
        let (_dir, corpus) = tiny_corpus(5);
        let encoder = init_frozen_encoder(&EncoderConfig::default()).unwrap();
        let tw = TaskWeights::uniform(8);
        // Average over several random probes; each one is biased by which
        // tokens its random weights happen to favor.
        let mut acc_sum = 0.0;
        for seed in 0..8 {
            let probe = ProbeParams::random(seed, 8, 64);
            acc_sum += eval_probe(
                &corpus,
                Split::Train,
                &encoder,
                None,
                &tw,
                &probe,
                ProbeInput::Clean,
            )
            .unwrap();
        }
        let acc = acc_sum / 8.0;
        assert!(
            (acc - 0.125).abs() < 0.05,
            "chance-level accuracy expected, got {acc}"
        );
    }

    #[test]
    fn clean_training_reaches_usable_accuracy_and_freezes_upstream() {
        let (_dir, corpus) = tiny_corpus(6);
        let encoder = init_frozen_encoder(&EncoderConfig::default()).unwrap();
        let before = encoder.checksum();
        let cfg = ProbeTrainConfig::default();
        let trained = train_probe(&corpus, &encoder, None, ProbeTrainMode::Official, &cfg).unwrap();
        assert!(
            trained.dev_accuracy >= 0.85,
            "dev accuracy {}",
            trained.dev_accuracy
        );
        assert_eq!(encoder.checksum(), before);

        // Deterministic: a rerun lands on the identical accuracy.
        let again = train_probe(&corpus, &encoder, None, ProbeTrainMode::Official, &cfg).unwrap();
        assert_eq!(trained.dev_accuracy, again.dev_accuracy);
        assert_eq!(trained.probe, again.probe);

        // Accuracy is a proportion.
        for split in [Split::Dev, Split::Eval] {
            let acc = eval_probe(
                &corpus,
                split,
                &encoder,
                None,
                &trained.task_weights,
                &trained.probe,
                ProbeInput::Noisy,
            )
            .unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn clean_eval_beats_noisy_eval() {
        for seed in [11u64, 12, 13] {
            // A larger eval split keeps frame-sampling noise below the
            // clean/noisy separation being asserted.
            let dir = tempfile::tempdir().unwrap();
            let cfg = CorpusConfig {
                n_train: 16,
                n_dev: 4,
                n_eval: 16,
                master_seed: seed,
                ..CorpusConfig::default()
            };
            let corpus = build_corpus(&cfg, dir.path()).unwrap();
            let encoder = init_frozen_encoder(&EncoderConfig::default()).unwrap();
            let trained = train_probe(
                &corpus,
                &encoder,
                None,
                ProbeTrainMode::Official,
                &ProbeTrainConfig::default(),
            )
            .unwrap();
            let clean = eval_probe(
                &corpus,
                Split::Eval,
                &encoder,
                None,
                &trained.task_weights,
                &trained.probe,
                ProbeInput::Clean,
            )
            .unwrap();
            let noisy = eval_probe(
                &corpus,
                Split::Eval,
                &encoder,
                None,
                &trained.task_weights,
                &trained.probe,
                ProbeInput::Noisy,
            )
            .unwrap();
            assert!(clean >= noisy, "seed {seed}: clean {clean} < noisy {noisy}");
        }
    }

    #[test]
    fn eval_through_frontend_equals_eval_on_pre_enhanced_audio() {
        let (_dir, corpus) = tiny_corpus(7);
        let encoder = init_frozen_encoder(&EncoderConfig::default()).unwrap();
        let se = init_se_model(&SEConfig::default(), 9).unwrap();
        let se_before: Vec<Tensor> = se
            .named_tensors()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect();
        let trained = train_probe(
            &corpus,
            &encoder,
            Some(&se),
            ProbeTrainMode::Official,
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        // Frontend untouched by probe training.
        for ((_, now), was) in se.named_tensors().iter().zip(&se_before) {
            assert_eq!(*now, was);
        }

        let with_frontend = eval_probe(
            &corpus,
            Split::Eval,
            &encoder,
            Some(&se),
            &trained.task_weights,
            &trained.probe,
            ProbeInput::Noisy,
        )
        .unwrap();

        // Pre-enhance by hand, then evaluate without a frontend.
        let items = corpus.load_split(Split::Eval).unwrap();
        let feats: Vec<(FeatureStack, Arc<Vec<u16>>)> = items
            .iter()
            .map(|item| {
                let enhanced = se.enhance(&item.mixture).unwrap();
                let stack = encoder.encode(&enhanced).unwrap();
                let (_, _, frames) = stack.dims();
                (stack, Arc::new(item.labels[..frames].to_vec()))
            })
            .collect();
        let direct = accuracy_on_features(&feats, &trained.task_weights, &trained.probe);
        assert!((with_frontend - direct).abs() < 1e-6);
    }
}
