//! Training objectives.
//!
//! The feature-domain loss first combines encoder layers with a fixed
//! weight vector (one of three schemes), then takes the normalized
//! Frobenius distance between the combined maps of the enhanced and clean
//! signals. The waveform term is the negated scale-dependent SNR, so
//! minimizing the multitask total improves SNR. The gradient path runs
//! through the enhanced branch only: clean features are constants.

use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::semodel::{SEParams, SeVars};
use crate::signal::{self, Waveform};
use crate::sslenc::{EncoderParams, FeatureStack};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerScheme {
    /// Only the deepest layer.
    Last,
    /// Every layer, equally.
    All,
    /// The deeper half of the layers, equally.
    LatterHalf,
}

impl LayerScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerScheme::Last => "last",
            LayerScheme::All => "all",
            LayerScheme::LatterHalf => "latter_half",
        }
    }

    pub const ALL_SCHEMES: [LayerScheme; 3] =
        [LayerScheme::Last, LayerScheme::All, LayerScheme::LatterHalf];
}

impl FromStr for LayerScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LayerScheme::Last),
            "all" => Ok(LayerScheme::All),
            "latter_half" | "latter-half" => Ok(LayerScheme::LatterHalf),
            other => Err(Error::UnknownScheme(other.to_string())),
        }
    }
}

/// A normalized nonnegative layer-weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    weights: Vec<f64>,
}

impl LayerWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Build the weight vector for a scheme over `n` layers. Weights are
/// normalized to sum to one so loss magnitudes stay comparable across
/// schemes.
pub fn make_layer_weights(scheme: LayerScheme, n: usize) -> Result<LayerWeights> {
    if n < 1 {
        return Err(Error::InvalidConfig("need at least one layer".into()));
    }
    let weights = match scheme {
        LayerScheme::Last => {
            let mut w = vec![0.0; n];
            w[n - 1] = 1.0;
            w
        }
        LayerScheme::All => vec![1.0 / n as f64; n],
        LayerScheme::LatterHalf => {
            // Layers floor(n/2)+1 ..= n in 1-based terms.
            let start = n / 2;
            let share = 1.0 / (n - start) as f64;
            (0..n)
                .map(|i| if i >= start { share } else { 0.0 })
                .collect()
        }
    };
    Ok(LayerWeights { weights })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Multitask weight on the SNR term.
    pub alpha: f64,
    pub scheme: LayerScheme,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            scheme: LayerScheme::Last,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be a finite nonnegative value, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// The three reported loss components of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ssl_mse: f64,
    pub snr_term: f64,
    pub total: f64,
}

/// Feature-domain distance: combine each stack with the layer weights,
/// then mean squared difference over all D*T' entries.
pub fn ssl_mse(
    f_enh: &FeatureStack,
    f_clean: &FeatureStack,
    weights: &LayerWeights,
) -> Result<f64> {
    let (n, d, t) = f_enh.dims();
    if f_clean.dims() != (n, d, t) {
        return Err(Error::ShapeMismatch(format!(
            "feature stacks disagree: {:?} vs {:?}",
            f_enh.dims(),
            f_clean.dims()
        )));
    }
    if weights.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} layer weights for {} layers",
            weights.len(),
            n
        )));
    }
    let a = f_enh.combine(weights.as_slice())?;
    let b = f_clean.combine(weights.as_slice())?;
    Ok(a.sub(&b).sq_sum() / (d * t) as f64)
}

/// Waveform training term: the negated scale-dependent SNR, so that
/// smaller is better.
pub fn snr_training_loss(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    Ok(-signal::sd_snr(estimate, reference)?)
}

/// total = ssl_mse + alpha * snr_term.
pub fn multitask_loss(ssl_mse_val: f64, snr_loss_val: f64, alpha: f64) -> Result<LossBreakdown> {
    if alpha < 0.0 {
        return Err(Error::InvalidConfig("alpha must be nonnegative".into()));
    }
    Ok(LossBreakdown {
        ssl_mse: ssl_mse_val,
        snr_term: snr_loss_val,
        total: ssl_mse_val + alpha * snr_loss_val,
    })
}

/// One (noisy, clean) training pair.
pub type TrainPair<'a> = (&'a Waveform, &'a Waveform);

fn wave_tensor(w: &Waveform) -> Tensor {
    Tensor::from_vec(&[w.len()], w.samples.clone())
}

/// Gradients of the mean multitask loss over a batch with respect to every
/// SE parameter, in `SEParams::named_tensors` order. The encoder is frozen:
/// its parameters are no-grad leaves on the tape.
pub fn loss_gradients(
    se: &SEParams,
    batch: &[TrainPair<'_>],
    encoder: &EncoderParams,
    cfg: &LossConfig,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (n, _, _) = encoder.layer_dims();
    let weights = make_layer_weights(cfg.scheme, n)?;

    let per_item: Result<Vec<(Vec<Tensor>, f64, f64)>> = batch
        .par_iter()
        .map(|(noisy, clean)| item_gradients(se, noisy, clean, Some((encoder, &weights)), cfg))
        .collect();
    let per_item = per_item?;

    let (grads, ssl_mean, snr_mean) = reduce_items(per_item);
    let breakdown = multitask_loss(ssl_mean, snr_mean, cfg.alpha)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("batch loss"));
    }
    Ok((grads, breakdown))
}

/// Gradients of the mean SNR-only loss; the pretraining objective.
pub fn snr_loss_gradients(
    se: &SEParams,
    batch: &[TrainPair<'_>],
    eps: f64,
) -> Result<(Vec<Tensor>, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = LossConfig {
        alpha: 1.0,
        eps,
        ..LossConfig::default()
    };
    let per_item: Result<Vec<(Vec<Tensor>, f64, f64)>> = batch
        .par_iter()
        .map(|(noisy, clean)| item_gradients(se, noisy, clean, None, &cfg))
        .collect();
    let (grads, _, snr_mean) = reduce_items(per_item?);
    if !snr_mean.is_finite() {
        return Err(Error::NonFinite("batch loss"));
    }
    Ok((grads, snr_mean))
}

/// Deterministic ordered reduction over per-item gradients; items were
/// computed in parallel but are summed in batch order.
fn reduce_items(per_item: Vec<(Vec<Tensor>, f64, f64)>) -> (Vec<Tensor>, f64, f64) {
    let n = per_item.len() as f64;
    let mut iter = per_item.into_iter();
    let (mut grads, mut ssl_sum, mut snr_sum) = iter.next().expect("nonempty batch");
    for (g, ssl, snr) in iter {
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
        ssl_sum += ssl;
        snr_sum += snr;
    }
    for t in grads.iter_mut() {
        t.scale_assign(1.0 / n);
    }
    (grads, ssl_sum / n, snr_sum / n)
}

/// Build one item's tape, run backward, return per-parameter gradients plus
/// the (ssl_mse, snr) components. With `feature_loss` set, the total is the
/// multitask loss; otherwise the SNR term alone.
fn item_gradients(
    se: &SEParams,
    noisy: &Waveform,
    clean: &Waveform,
    feature_loss: Option<(&EncoderParams, &LayerWeights)>,
    cfg: &LossConfig,
) -> Result<(Vec<Tensor>, f64, f64)> {
    let mut tape = Tape::new();
    let vars = SeVars::build(&mut tape, se, true);
    let x = tape.constant(wave_tensor(noisy));
    let xhat = se.enhance_on_tape(&mut tape, &vars, x)?;
    let clean_const = tape.constant(wave_tensor(clean));
    let snr = tape.snr_loss(xhat, clean_const, cfg.eps);

    let (total, ssl_val) = match feature_loss {
        None => (snr, 0.0),
        Some((encoder, weights)) => {
            let layers = encoder.encode_on_tape(&mut tape, xhat)?;
            let active: Vec<_> = layers
                .iter()
                .zip(weights.as_slice())
                .filter(|(_, &w)| w != 0.0)
                .map(|(&l, &w)| (l, w))
                .collect();
            let ids: Vec<_> = active.iter().map(|(l, _)| *l).collect();
            let coeffs: Vec<_> = active.iter().map(|(_, w)| *w).collect();
            let f_enh = tape.weighted_sum(&ids, &coeffs);

            let clean_stack = encoder.encode(clean)?;
            let f_clean = clean_stack.combine(weights.as_slice())?;
            let (_, d, t) = clean_stack.dims();
            let f_clean = tape.constant(f_clean);
            let mse = tape.mse_loss(f_enh, f_clean, (d * t) as f64);
            let total = tape.weighted_sum(&[mse, snr], &[1.0, cfg.alpha]);
            (total, tape.value(mse).item())
        }
    };

    let snr_val = tape.value(snr).item();
    if !tape.value(total).item().is_finite() {
        return Err(Error::NonFinite("item loss"));
    }
    let mut grads = tape.backward(total);
    let out: Vec<Tensor> = vars
        .ids
        .iter()
        .zip(se.named_tensors())
        .map(|(&id, (_, t))| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((out, ssl_val, snr_val))
}

/// Mean multitask loss over a batch from the plain (tape-free) forward
/// paths. This is the function finite differences probe; it must agree
/// with the tape construction used by `loss_gradients`.
pub fn batch_loss(
    se: &SEParams,
    batch: &[TrainPair<'_>],
    encoder: &EncoderParams,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (n, _, _) = encoder.layer_dims();
    let weights = make_layer_weights(cfg.scheme, n)?;
    let mut ssl_sum = 0.0;
    let mut snr_sum = 0.0;
    for (noisy, clean) in batch {
        let xhat = se.enhance(noisy)?;
        snr_sum += snr_training_loss(&xhat, clean)?;
        let f_enh = encoder.encode(&xhat)?;
        let f_clean = encoder.encode(clean)?;
        ssl_sum += ssl_mse(&f_enh, &f_clean, &weights)?;
    }
    let n = batch.len() as f64;
    multitask_loss(ssl_sum / n, snr_sum / n, cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sslenc::{init_frozen_encoder, EncoderConfig};
    use crate::{semodel, SEConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_from(layers: Vec<Tensor>) -> FeatureStack {
        FeatureStack::new(layers, 80).unwrap()
    }

    fn rand_layer(rng: &mut ChaCha8Rng, d: usize, t: usize) -> Tensor {
        Tensor::from_vec(
            &[d, t],
            (0..d * t).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn scheme_vectors() {
        assert_eq!(
            make_layer_weights(LayerScheme::Last, 4).unwrap().as_slice(),
            &[0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            make_layer_weights(LayerScheme::All, 4).unwrap().as_slice(),
            &[0.25, 0.25, 0.25, 0.25]
        );
        let lh = make_layer_weights(LayerScheme::LatterHalf, 12).unwrap();
        for i in 0..6 {
            assert_eq!(lh.as_slice()[i], 0.0);
        }
        for i in 6..12 {
            assert!((lh.as_slice()[i] - 1.0 / 6.0).abs() < 1e-15);
        }
        // Degenerate single-layer case: every scheme selects that layer.
        for scheme in LayerScheme::ALL_SCHEMES {
            assert_eq!(make_layer_weights(scheme, 1).unwrap().as_slice(), &[1.0]);
        }
    }

    #[test]
    fn unknown_scheme_is_an_error() {
        assert!(matches!(
            "lastt".parse::<LayerScheme>(),
            Err(Error::UnknownScheme(_))
        ));
        assert_eq!(
            "latter_half".parse::<LayerScheme>().unwrap(),
            LayerScheme::LatterHalf
        );
    }

    #[test]
    fn ssl_mse_trivial_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_layer(&mut rng, 3, 5);
        let s1 = stack_from(vec![a.clone()]);
        let s2 = stack_from(vec![a.clone()]);
        let w = make_layer_weights(LayerScheme::Last, 1).unwrap();
        assert_eq!(ssl_mse(&s1, &s2, &w).unwrap(), 0.0);

        // All-ones difference over a single layer: exactly 1.
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += 1.0;
        }
        let s3 = stack_from(vec![b]);
        assert!((ssl_mse(&s3, &s1, &w).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssl_mse_two_layer_weighted_difference() {
        // Layer diffs of all-ones and all-twos under weights [0.5, 0.5]
        // combine to 1.5 per entry, squared 2.25.
        let d = 4;
        let t = 6;
        let zeros = Tensor::zeros(&[d, t]);
        let ones = Tensor::from_vec(&[d, t], vec![1.0; d * t]);
        let twos = Tensor::from_vec(&[d, t], vec![2.0; d * t]);
        let clean = stack_from(vec![zeros.clone(), zeros]);
        let enh = stack_from(vec![ones, twos]);
        let w = make_layer_weights(LayerScheme::All, 2).unwrap();
        assert!((ssl_mse(&enh, &clean, &w).unwrap() - 2.25).abs() < 1e-12);
    }

    #[test]
    fn ssl_mse_matches_brute_force_on_random_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..20 {
            let (d, t) = (rng.random_range(2..6), rng.random_range(3..9));
            let enh = stack_from(vec![rand_layer(&mut rng, d, t), rand_layer(&mut rng, d, t)]);
            let clean = stack_from(vec![rand_layer(&mut rng, d, t), rand_layer(&mut rng, d, t)]);
            let w = make_layer_weights(LayerScheme::All, 2).unwrap();
            let got = ssl_mse(&enh, &clean, &w).unwrap();

            // Brute force: weighted sum first, then Frobenius.
            let mut acc = 0.0;
            for di in 0..d {
                for ti in 0..t {
                    let idx = di * t + ti;
                    let e = 0.5 * enh.layers()[0].data()[idx] + 0.5 * enh.layers()[1].data()[idx];
                    let c =
                        0.5 * clean.layers()[0].data()[idx] + 0.5 * clean.layers()[1].data()[idx];
                    acc += (e - c) * (e - c);
                }
            }
            let want = acc / (d * t) as f64;
            assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn ssl_mse_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = stack_from(vec![rand_layer(&mut rng, 3, 5)]);
        let b = stack_from(vec![rand_layer(&mut rng, 3, 6)]);
        let w = make_layer_weights(LayerScheme::Last, 1).unwrap();
        assert!(matches!(ssl_mse(&a, &b, &w), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn snr_training_loss_values() {
        let x = Waveform::new(vec![1.0; 100], 8000).unwrap();
        assert!((snr_training_loss(&x, &x).unwrap() + 80.0).abs() < 1e-6);

        let mut xhat = x.clone();
        xhat.samples[0] = 0.0;
        assert!((snr_training_loss(&xhat, &x).unwrap() + 20.0).abs() < 1e-4);

        let zero = Waveform::new(vec![0.0; 100], 8000).unwrap();
        assert!(snr_training_loss(&zero, &x).unwrap().abs() < 1e-6);
    }

    #[test]
    fn multitask_arithmetic() {
        let b = multitask_loss(0.5, -10.0, 0.1).unwrap();
        assert_eq!(b.total, -0.5);
        assert_eq!(b.ssl_mse, 0.5);
        assert_eq!(b.snr_term, -10.0);

        // alpha = 0 keeps the feature term alone.
        let b0 = multitask_loss(0.37, -25.0, 0.0).unwrap();
        assert_eq!(b0.total, 0.37);

        assert_eq!(LossConfig::default().alpha, 0.1);
        assert!(multitask_loss(0.1, 1.0, -0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_scheme_weights_sum_to_one(n in 1usize..40, which in 0usize..3) {
            let w = make_layer_weights(LayerScheme::ALL_SCHEMES[which], n).unwrap();
            let sum: f64 = w.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn prop_total_is_linear_in_alpha(
            ssl in 0.0f64..10.0,
            snr in -80.0f64..10.0,
            a1 in 0.0f64..1.0,
            a2 in 0.0f64..1.0,
        ) {
            let t1 = multitask_loss(ssl, snr, a1).unwrap().total;
            let t2 = multitask_loss(ssl, snr, a2).unwrap().total;
            let want = (a1 - a2) * snr;
            prop_assert!(((t1 - t2) - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn gradients_cover_every_parameter_and_leave_encoder_alone() {
        let se = semodel::init_se_model(
            &SEConfig {
                n_basis: 12,
                window: 8,
                bottleneck: 6,
                repeats: 1,
                blocks_per_repeat: 2,
                hidden: 8,
                kernel: 3,
            },
            41,
        )
        .unwrap();
        let encoder = init_frozen_encoder(&EncoderConfig {
            n_layers: 2,
            dim: 4,
            hop: 8,
            frontend_kernel: 16,
            seed: 42,
        })
        .unwrap();
        let before = encoder.checksum();

        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mk = |rng: &mut ChaCha8Rng| {
            Waveform::new((0..96).map(|_| rng.random_range(-0.5..0.5)).collect(), 8000).unwrap()
        };
        let waves: Vec<Waveform> = (0..4).map(|_| mk(&mut rng)).collect();
        let batch = vec![(&waves[0], &waves[1]), (&waves[2], &waves[3])];

        for scheme in LayerScheme::ALL_SCHEMES {
            let cfg = LossConfig {
                scheme,
                ..LossConfig::default()
            };
            let (grads, breakdown) = loss_gradients(&se, &batch, &encoder, &cfg).unwrap();
            assert_eq!(grads.len(), se.named_tensors().len());
            assert!(grads.iter().all(|g| g.is_finite()));
            assert!(breakdown.total.is_finite());
            assert!(breakdown.ssl_mse >= 0.0);

            // Plain-path loss agrees with the tape-path loss.
            let plain = batch_loss(&se, &batch, &encoder, &cfg).unwrap();
            assert!((plain.total - breakdown.total).abs() < 1e-9);
        }
        assert_eq!(encoder.checksum(), before);
    }
}
