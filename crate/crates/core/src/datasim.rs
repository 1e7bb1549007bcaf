//! Deterministic synthetic corpus generation.
//!
//! Sources are token-structured harmonic stacks carrying per-frame class
//! labels; interferers are band-filtered noise. Together they stand in for
//! real speech/noise corpora at desk scale while keeping every byte
//! reproducible from a master seed.
//!
//! Token segments are aligned to the label hop and every token f0 is a
//! multiple of the frame rate, so all frames of one token see the same
//! waveform shape. That keeps the frame-classification probe learnable
//! while noise still corrupts it.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::signal::{self, wav, Waveform};
use crate::util::fmt_metric;

/// A labelled source signal: the waveform plus one token id per label hop.
#[derive(Clone, Debug)]
pub struct TokenSource {
    pub waveform: Waveform,
    /// One id in `0..token_count` per hop of the configured frame rate.
    pub labels: Vec<u16>,
    pub token_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Corpus(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_eval: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Label hop in samples; must match the encoder hop.
    pub hop: usize,
    pub token_count: usize,
    pub snr_range_train: (f64, f64),
    pub snr_range_eval: (f64, f64),
    pub master_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_train: 32,
            n_dev: 8,
            n_eval: 8,
            duration_s: 1.0,
            sample_rate: 8000,
            hop: 80,
            token_count: 8,
            snr_range_train: (-3.0, 20.0),
            snr_range_eval: (0.0, 10.0),
            master_seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_dev < 1 || self.n_eval < 1 {
            return Err(Error::InvalidConfig("split counts must be >= 1".into()));
        }
        if self.duration_s < 0.25 {
            return Err(Error::InvalidConfig("duration must be >= 0.25 s".into()));
        }
        if self.token_count < 2 {
            return Err(Error::InvalidConfig("token count must be >= 2".into()));
        }
        for (lo, hi) in [self.snr_range_train, self.snr_range_eval] {
            // NaN bounds must fail this check too.
            let well_ordered = lo <= hi;
            if !well_ordered {
                return Err(Error::InvalidConfig(format!(
                    "SNR range [{lo}, {hi}] is not well-ordered"
                )));
            }
        }
        Ok(())
    }

    fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Eval => self.n_eval,
        }
    }

    fn split_snr_range(&self, split: Split) -> (f64, f64) {
        match split {
            Split::Train | Split::Dev => self.snr_range_train,
            Split::Eval => self.snr_range_eval,
        }
    }
}

/// Per-token rendering recipe: fundamental on the frame-rate grid plus a
/// spectral tilt, both unique to the token id.
fn token_recipe(token: usize, frame_rate: f64) -> (f64, f64) {
    let f0 = frame_rate * (1 + token % 3) as f64;
    let tilt = 0.6 + 0.7 * (token / 3) as f64;
    (f0, tilt)
}

/// Render a token-structured harmonic source with per-frame labels.
pub fn gen_source(seed: u64, duration_s: f64, token_count: usize) -> Result<TokenSource> {
    gen_source_at(seed, duration_s, token_count, 8000, 80)
}

pub fn gen_source_at(
    seed: u64,
    duration_s: f64,
    token_count: usize,
    sample_rate: u32,
    hop: usize,
) -> Result<TokenSource> {
    if token_count < 2 {
        return Err(Error::InvalidConfig("token count must be >= 2".into()));
    }
    if duration_s < 0.25 {
        return Err(Error::InvalidConfig("duration must be >= 0.25 s".into()));
    }
    let sr = sample_rate as f64;
    let t = (duration_s * sr).round() as usize;
    let n_hops = t / hop;
    let frame_rate = sr / hop as f64;

    // Segment lengths in hops, 80..400 ms.
    let hops_min = ((0.08 * sr) / hop as f64).ceil().max(1.0) as usize;
    let hops_max = ((0.40 * sr) / hop as f64).floor().max(1.0) as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0f64; t];
    let mut labels = Vec::with_capacity(n_hops);

    let ramp = ((0.005 * sr) as usize).max(1);
    let mut hop_pos = 0usize;
    while hop_pos < n_hops {
        let token = rng.random_range(0..token_count);
        let len_hops = rng.random_range(hops_min..=hops_max).min(n_hops - hop_pos);
        let amp = rng.random_range(0.7..1.0);
        let (f0, tilt) = token_recipe(token, frame_rate);

        let start = hop_pos * hop;
        let end_hop = hop_pos + len_hops;
        // The final segment also fills the partial-hop tail of the signal.
        let end = if end_hop == n_hops { t } else { end_hop * hop };
        render_segment(&mut samples[start..end], token, f0, tilt, amp, sr, ramp);
        for _ in 0..len_hops {
            labels.push(token as u16);
        }
        hop_pos = end_hop;
    }

    // Peak-normalize to 0.9.
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = 0.9 / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }

    Ok(TokenSource {
        waveform: Waveform::new(samples, sample_rate)?,
        labels,
        token_count,
    })
}

fn render_segment(
    out: &mut [f64],
    token: usize,
    f0: f64,
    tilt: f64,
    amp: f64,
    sr: f64,
    ramp: usize,
) {
    let nyquist_margin = 0.45 * sr;
    let mut amps = Vec::new();
    let mut k = 1usize;
    while (k as f64) * f0 < nyquist_margin {
        amps.push((k as f64).powf(-tilt));
        k += 1;
    }
    let norm: f64 = amps.iter().sum();
    let n = out.len();
    let r = ramp.min(n / 4).max(1);
    for (i, o) in out.iter_mut().enumerate() {
        let mut v = 0.0;
        for (kk, a) in amps.iter().enumerate() {
            let h = (kk + 1) as f64;
            // Fixed per-token harmonic phases keep the waveform shape
            // identical in every frame of the token.
            let phase =
                2.0 * std::f64::consts::PI * ((0.618_033_9 * (h + 7.0 * token as f64)).fract());
            v += a * (2.0 * std::f64::consts::PI * h * f0 * i as f64 / sr + phase).sin();
        }
        v *= amp / norm;
        // Raised-cosine edges.
        if i < r {
            v *= 0.5 - 0.5 * (std::f64::consts::PI * (i as f64 / r as f64 + 1.0)).cos();
        }
        if n - 1 - i < r {
            let j = (n - 1 - i) as f64 / r as f64;
            v *= 0.5 - 0.5 * (std::f64::consts::PI * (j + 1.0)).cos();
        }
        *o = v;
    }
}

/// Band-filtered Gaussian noise with randomly drawn band edges, plus an
/// occasional amplitude-modulated tone.
pub fn gen_noise(seed: u64, duration_s: f64) -> Result<Waveform> {
    gen_noise_at(seed, duration_s, 8000)
}

pub fn gen_noise_at(seed: u64, duration_s: f64, sample_rate: u32) -> Result<Waveform> {
    if duration_s < 0.25 {
        return Err(Error::InvalidConfig("duration must be >= 0.25 s".into()));
    }
    let sr = sample_rate as f64;
    let t = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let centre = 200.0 * (rng.random_range(0.0..1.0f64) * 4.0).exp2().min(16.0);
    let q = rng.random_range(0.5..3.0);
    let mut samples: Vec<f64> = (0..t)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    biquad_bandpass(&mut samples, centre.min(0.45 * sr), q, sr);

    if rng.random_range(0.0..1.0) < 0.5 {
        let tone = rng.random_range(300.0..2000.0f64).min(0.4 * sr);
        let mod_hz = rng.random_range(1.0..8.0);
        for (i, s) in samples.iter_mut().enumerate() {
            let ti = i as f64 / sr;
            let env = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * mod_hz * ti).sin();
            *s += 0.3 * env * (2.0 * std::f64::consts::PI * tone * ti).sin();
        }
    }

    // Normalize mean power into (0, 1], then guard the peak.
    let target_power = rng.random_range(0.04..0.3);
    let power: f64 = samples.iter().map(|s| s * s).sum::<f64>() / t as f64;
    let scale = (target_power / power).sqrt();
    for s in &mut samples {
        *s *= scale;
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.99 {
        let fix = 0.99 / peak;
        for s in &mut samples {
            *s *= fix;
        }
    }
    Waveform::new(samples, sample_rate)
}

/// RBJ constant-skirt bandpass, direct form I.
fn biquad_bandpass(x: &mut [f64], centre_hz: f64, q: f64, sr: f64) {
    let w = 2.0 * std::f64::consts::PI * centre_hz / sr;
    let alpha = w.sin() / (2.0 * q);
    let b0 = alpha;
    let b2 = -alpha;
    let a0 = 1.0 + alpha;
    let a1 = -2.0 * w.cos();
    let a2 = 1.0 - alpha;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let x0 = *v;
        let y0 = (b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0;
    }
}

/// One manifest row.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub id: String,
    pub split: Split,
    pub snr_db: f64,
    pub path_mixture: String,
    pub path_source: String,
    pub path_labels: String,
}

/// A persisted corpus: the manifest plus the directory it lives in.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub items: Vec<CorpusItem>,
}

/// Fully loaded item: waveforms plus frame labels.
#[derive(Clone, Debug)]
pub struct LoadedItem {
    pub id: String,
    pub snr_db: f64,
    pub mixture: Waveform,
    pub source: Waveform,
    pub labels: Vec<u16>,
}

/// Margin (dB) kept between drawn SNR targets and the range edges so that
/// 16-bit quantization cannot push a stored item outside its range.
const SNR_EDGE_MARGIN_DB: f64 = 0.01;

/// Generate and persist a corpus under `out_dir`. Returns the manifest.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<Corpus> {
    config.validate()?;
    let items_dir = out_dir.join("items");
    fs::create_dir_all(&items_dir)?;

    let mut specs = Vec::new();
    for split in [Split::Train, Split::Dev, Split::Eval] {
        for idx in 0..config.split_count(split) {
            specs.push((split, idx));
        }
    }

    let items: Result<Vec<CorpusItem>> = specs
        .par_iter()
        .map(|&(split, idx)| build_item(config, split, idx, out_dir))
        .collect();
    let items = items?;

    let mut manifest = String::from("id,split,snr_db,path_mixture,path_source,path_labels\n");
    for it in &items {
        manifest.push_str(&format!(
            "{},{},{},{},{},{}\n",
            it.id,
            it.split.as_str(),
            fmt_metric(it.snr_db),
            it.path_mixture,
            it.path_source,
            it.path_labels
        ));
    }
    fs::write(out_dir.join("manifest.csv"), manifest)?;

    Ok(Corpus {
        root: out_dir.to_path_buf(),
        items,
    })
}

fn build_item(
    config: &CorpusConfig,
    split: Split,
    idx: usize,
    out_dir: &Path,
) -> Result<CorpusItem> {
    let tag_src = format!("{}:source", split.as_str());
    let tag_noise = format!("{}:noise", split.as_str());
    let tag_mix = format!("{}:mix", split.as_str());
    let seed_src = derive_seed(config.master_seed, &tag_src, idx as u64);
    let seed_noise = derive_seed(config.master_seed, &tag_noise, idx as u64);
    let seed_mix = derive_seed(config.master_seed, &tag_mix, idx as u64);

    let source = gen_source_at(
        seed_src,
        config.duration_s,
        config.token_count,
        config.sample_rate,
        config.hop,
    )?;
    let noise = gen_noise_at(seed_noise, config.duration_s, config.sample_rate)?;

    let (lo, hi) = config.split_snr_range(split);
    let mut rng = ChaCha8Rng::seed_from_u64(seed_mix);
    let margin = SNR_EDGE_MARGIN_DB.min((hi - lo) / 2.0);
    let spec = signal::MixtureSpec {
        snr_db: if hi > lo {
            rng.random_range(lo + margin..hi - margin)
        } else {
            lo
        },
        seed: seed_noise,
    };

    let (_, scaled_noise) = signal::mix_at_snr(&source.waveform, &noise, spec.snr_db)?;

    // Scale everything by a common factor so the mixture cannot clip, then
    // quantize source and noise separately. The stored mixture is their
    // integer-domain sum, so source and noise can be recovered exactly.
    let mix_peak: f64 = source
        .waveform
        .samples
        .iter()
        .zip(&scaled_noise.samples)
        .fold(0.0f64, |m, (s, n)| m.max((s + n).abs()));
    let headroom = 0.97;
    let common = if mix_peak > headroom {
        headroom / mix_peak
    } else {
        1.0
    };

    let src_words: Vec<i16> = source
        .waveform
        .samples
        .iter()
        .map(|s| wav::quantize(s * common))
        .collect();
    let noise_words: Vec<i16> = scaled_noise
        .samples
        .iter()
        .map(|s| wav::quantize(s * common))
        .collect();
    let mix_words: Vec<i16> = src_words
        .iter()
        .zip(&noise_words)
        .map(|(&s, &n)| s + n)
        .collect();

    let e_src: f64 = src_words.iter().map(|&w| (w as f64) * (w as f64)).sum();
    let e_noise: f64 = noise_words.iter().map(|&w| (w as f64) * (w as f64)).sum();
    if e_src <= 0.0 || e_noise <= 0.0 {
        return Err(Error::Corpus(format!(
            "item {}:{idx} quantized to silence",
            split.as_str()
        )));
    }
    let measured_snr = 10.0 * (e_src / e_noise).log10();

    let id = format!("{}_{idx:05}", split.as_str());
    let rel_mix = format!("items/{id}.mix.wav");
    let rel_src = format!("items/{id}.src.wav");
    let rel_lab = format!("items/{id}.labels");

    let to_wave = |words: &[i16]| -> Result<Waveform> {
        Waveform::new(
            words.iter().map(|&w| wav::dequantize(w)).collect(),
            config.sample_rate,
        )
    };
    wav::write_wav(&out_dir.join(&rel_mix), &to_wave(&mix_words)?)?;
    wav::write_wav(&out_dir.join(&rel_src), &to_wave(&src_words)?)?;

    let mut label_bytes = Vec::with_capacity(source.labels.len() * 2);
    for &l in &source.labels {
        label_bytes.extend_from_slice(&l.to_le_bytes());
    }
    let mut f = fs::File::create(out_dir.join(&rel_lab))?;
    f.write_all(&label_bytes)?;

    Ok(CorpusItem {
        id,
        split,
        snr_db: measured_snr,
        path_mixture: rel_mix,
        path_source: rel_src,
        path_labels: rel_lab,
    })
}

impl Corpus {
    /// Read a manifest back from disk.
    pub fn load(root: &Path) -> Result<Corpus> {
        let text = fs::read_to_string(root.join("manifest.csv")).map_err(|e| {
            Error::Corpus(format!("cannot read manifest in {}: {e}", root.display()))
        })?;
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Corpus(format!("manifest line {} malformed", ln + 1)));
            }
            items.push(CorpusItem {
                id: f[0].to_string(),
                split: Split::parse(f[1])?,
                snr_db: f[2]
                    .parse()
                    .map_err(|e| Error::Corpus(format!("bad snr on line {}: {e}", ln + 1)))?,
                path_mixture: f[3].to_string(),
                path_source: f[4].to_string(),
                path_labels: f[5].to_string(),
            });
        }
        if items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            items,
        })
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &CorpusItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn load_item(&self, item: &CorpusItem) -> Result<LoadedItem> {
        let mixture = wav::read_wav(&self.root.join(&item.path_mixture))?;
        let source = wav::read_wav(&self.root.join(&item.path_source))?;
        let bytes = fs::read(self.root.join(&item.path_labels))?;
        let labels: Vec<u16> = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(LoadedItem {
            id: item.id.clone(),
            snr_db: item.snr_db,
            mixture,
            source,
            labels,
        })
    }

    /// Load every item of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedItem>> {
        let items: Vec<&CorpusItem> = self.split_items(split).collect();
        if items.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        items.into_iter().map(|i| self.load_item(i)).collect()
    }
}
