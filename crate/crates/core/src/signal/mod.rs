//! Waveforms, SNR-controlled mixing and waveform-domain metrics.
//!
//! All metrics use a relative floor `EPS` inside the log ratio so that a
//! perfect reconstruction reads as a finite value (about 80 dB) instead of
//! infinity.

pub mod wav;

pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

/// Relative floor added to error powers inside log ratios.
pub const EPS: f64 = 1e-8;

/// A mono sampled signal. Samples are dimensionless amplitudes, nominally
/// in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// How a mixture is produced: target SNR plus the seed the noise was
/// drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureSpec {
    pub snr_db: f64,
    pub seed: u64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyWaveform);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        assert!(sample_rate > 0, "sample rate must be positive");
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Total energy: sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Mean power.
    pub fn power(&self) -> f64 {
        self.energy() / self.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch(
                self.sample_rate,
                other.sample_rate,
            ));
        }
        Ok(())
    }
}

/// Gain to apply to `noise` so that source/noise mix at `snr_db`:
/// solves 10*log10(E_source / (g^2 * E_noise)) = snr_db.
pub fn snr_gain(source_energy: f64, noise_energy: f64, snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0) * (source_energy / noise_energy).sqrt()
}

/// Mix `noise` into `source` at the requested SNR. Returns the mixture and
/// the scaled noise that was added.
pub fn mix_at_snr(
    source: &Waveform,
    noise: &Waveform,
    snr_db: f64,
) -> Result<(Waveform, Waveform)> {
    source.check_compatible(noise)?;
    assert!(snr_db.is_finite(), "target SNR must be finite");
    let es = source.energy();
    let en = noise.energy();
    if es <= 0.0 {
        return Err(Error::ZeroPower("source"));
    }
    if en <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    let g = snr_gain(es, en, snr_db);
    let scaled: Vec<f64> = noise.samples.iter().map(|s| g * s).collect();
    let mixture: Vec<f64> = source
        .samples
        .iter()
        .zip(&scaled)
        .map(|(s, n)| s + n)
        .collect();
    Ok((
        Waveform {
            samples: mixture,
            sample_rate: source.sample_rate,
        },
        Waveform {
            samples: scaled,
            sample_rate: source.sample_rate,
        },
    ))
}

/// Scale-dependent SNR in dB:
/// 10*log10(||ref||^2 / (||ref - est||^2 + EPS*||ref||^2)).
pub fn sd_snr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    reference.check_compatible(estimate)?;
    let er = reference.energy();
    if er <= 0.0 {
        return Err(Error::ZeroPower("reference"));
    }
    let ee: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    Ok(10.0 * (er / (ee + EPS * er)).log10())
}

/// Scale-invariant SDR in dB: the estimate is first projected onto the
/// reference, so any positive rescaling of the estimate reads identically.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    reference.check_compatible(estimate)?;
    let er = reference.energy();
    if er <= 0.0 {
        return Err(Error::ZeroPower("reference"));
    }
    let dot: f64 = estimate
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(e, r)| e * r)
        .sum();
    let scale = dot / er;
    let mut et = 0.0; // ||target||^2 with target = scale * ref
    let mut ed = 0.0; // ||estimate - target||^2
    for (e, r) in estimate.samples.iter().zip(&reference.samples) {
        let t = scale * r;
        et += t * t;
        ed += (e - t) * (e - t);
    }
    Ok(10.0 * (et / (ed + EPS * et)).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 8000).unwrap()
    }

    fn random_wave(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
        wave((0..n).map(|_| rng.random_range(-0.8..0.8)).collect())
    }

    #[test]
    fn unit_powers_at_zero_db_gain_is_one() {
        let s = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let n = wave(vec![-1.0, 1.0, 1.0, 1.0]);
        let (_, scaled) = mix_at_snr(&s, &n, 0.0).unwrap();
        for (a, b) in scaled.samples.iter().zip(&n.samples) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_power_noise_at_ten_db() {
        // P_source = 1, P_noise = 0.25 -> g = sqrt(0.4)
        let s = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let n = wave(vec![0.5, 0.5, -0.5, -0.5]);
        let (_, scaled) = mix_at_snr(&s, &n, 10.0).unwrap();
        let g = scaled.samples[0] / n.samples[0];
        assert!((g - 0.4f64.sqrt()).abs() < 1e-9);
        assert!((g - 0.63246).abs() < 1e-5);
    }

    #[test]
    fn sixty_db_mixture_is_nearly_the_source() {
        let s = wave(vec![1.0, -1.0, 1.0, -1.0]);
        let n = wave(vec![1.0, 1.0, -1.0, -1.0]);
        let (mix, scaled) = mix_at_snr(&s, &n, 60.0).unwrap();
        let g = scaled.samples[0] / n.samples[0];
        assert!((g - 1e-3).abs() < 1e-15);
        for (m, sv) in mix.samples.iter().zip(&s.samples) {
            assert!((m - sv).abs() / sv.abs() <= 1e-3 + 1e-12);
        }
    }

    #[test]
    fn mix_rejects_degenerate_inputs() {
        let s = wave(vec![1.0, 2.0]);
        let short = wave(vec![1.0]);
        assert!(matches!(
            mix_at_snr(&s, &short, 0.0),
            Err(Error::LengthMismatch { .. })
        ));
        let z = wave(vec![0.0, 0.0]);
        assert!(matches!(
            mix_at_snr(&z, &s, 0.0),
            Err(Error::ZeroPower("source"))
        ));
        assert!(matches!(
            mix_at_snr(&s, &z, 0.0),
            Err(Error::ZeroPower("noise"))
        ));
    }

    #[test]
    fn measured_snr_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = random_wave(&mut rng, 256);
            let n = random_wave(&mut rng, 256);
            let snr = rng.random_range(-10.0..30.0);
            let (_, scaled) = mix_at_snr(&s, &n, snr).unwrap();
            let measured = 10.0 * (s.energy() / scaled.energy()).log10();
            assert!((measured - snr).abs() < 1e-6);
        }
    }

    #[test]
    fn sd_snr_examples() {
        let r = wave(vec![1.0; 100]); // energy 100
        assert!((sd_snr(&r, &r).unwrap() - 80.0).abs() < 1e-6);

        let mut est = r.clone();
        est.samples[0] = 0.0; // error energy 1
        let got = sd_snr(&est, &r).unwrap();
        // The relative floor nudges the ratio by about 4e-6 dB.
        assert!((got - 20.0).abs() < 1e-4, "got {got}");

        let zero = wave(vec![0.0; 100]);
        assert!(sd_snr(&zero, &r).unwrap().abs() < 1e-6);
    }

    #[test]
    fn sd_snr_decreases_with_added_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_wave(&mut rng, 512);
        let noise = random_wave(&mut rng, 512);
        let mut last = f64::INFINITY;
        for level in [0.01, 0.05, 0.2, 0.8] {
            let est = wave(
                r.samples
                    .iter()
                    .zip(&noise.samples)
                    .map(|(a, b)| a + level * b)
                    .collect(),
            );
            let snr = sd_snr(&est, &r).unwrap();
            assert!(snr < last, "snr {snr} should drop below {last}");
            last = snr;
        }
    }

    #[test]
    fn si_sdr_orthogonal_noise_example() {
        // reference [2, 0], estimate = ref + orthogonal noise of energy 1.
        let r = wave(vec![2.0, 0.0]);
        let e = wave(vec![2.0, 1.0]);
        let got = si_sdr(&e, &r).unwrap();
        assert!((got - 6.0206).abs() < 1e-4, "got {got}");
    }

    #[test]
    fn si_sdr_equals_for_scaled_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_wave(&mut rng, 300);
        let e = random_wave(&mut rng, 300);
        let base = si_sdr(&e, &r).unwrap();
        for a in [0.1, 3.7] {
            let scaled = wave(e.samples.iter().map(|v| a * v).collect());
            assert!((si_sdr(&scaled, &r).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn si_sdr_perfect_estimate_hits_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_wave(&mut rng, 64);
        let got = si_sdr(&r, &r).unwrap();
        assert!((got - 80.0).abs() < 1e-6);
        let twice = wave(r.samples.iter().map(|v| 2.0 * v).collect());
        assert!((si_sdr(&twice, &r).unwrap() - 80.0).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_mix_roundtrip(seed in 0u64..1000, snr in -20.0f64..40.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_wave(&mut rng, 128);
            let n = random_wave(&mut rng, 128);
            let (_, scaled) = mix_at_snr(&s, &n, snr).unwrap();
            let measured = 10.0 * (s.energy() / scaled.energy()).log10();
            prop_assert!((measured - snr).abs() < 1e-6);
        }

        #[test]
        fn prop_si_sdr_scale_invariant(seed in 0u64..1000, a in 0.05f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_wave(&mut rng, 128);
            let e = random_wave(&mut rng, 128);
            let base = si_sdr(&e, &r).unwrap();
            let scaled = wave(e.samples.iter().map(|v| a * v).collect());
            prop_assert!((si_sdr(&scaled, &r).unwrap() - base).abs() < 1e-6);
        }
    }
}
