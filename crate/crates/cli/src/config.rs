//! Experiment configuration: a flat set of dotted keys with defaults,
//! loaded from a plain-text file and overridden from the command line.
//!
//! Every key is declared in `DEFAULTS`; anything else fails fast with the
//! offending key named. Section seeds default to `auto`, meaning they are
//! derived from the top-level `seed`, so one value controls the whole run
//! while any stream can still be pinned individually. The resolved map
//! (after derivation) is what gets hashed into run summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sealign_core::datasim::CorpusConfig;
use sealign_core::downstream::{ProbeTrainConfig, ProbeTrainMode};
use sealign_core::losses::{LayerScheme, LossConfig};
use sealign_core::seeding::derive_seed;
use sealign_core::semodel::SEConfig;
use sealign_core::sslenc::EncoderConfig;
use sealign_core::training::{TrainConfig, GRAD_CHECK_SEED};
use sealign_core::util::sha256_hex;

const AUTO: &str = "auto";

/// (key, default value) for every recognized configuration key.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "17"),
    ("out", "runs/default"),
    ("corpus.n_train", "32"),
    ("corpus.n_dev", "8"),
    ("corpus.n_eval", "8"),
    ("corpus.duration_s", "1.0"),
    ("corpus.sample_rate", "8000"),
    ("corpus.token_count", "8"),
    ("corpus.snr_train_lo", "-3"),
    ("corpus.snr_train_hi", "20"),
    ("corpus.snr_eval_lo", "0"),
    ("corpus.snr_eval_hi", "10"),
    ("corpus.master_seed", AUTO),
    ("encoder.n_layers", "8"),
    ("encoder.dim", "64"),
    ("encoder.hop", "80"),
    ("encoder.frontend_kernel", "160"),
    ("encoder.seed", AUTO),
    ("encoder.checkpoint", ""),
    ("se.n_basis", "128"),
    ("se.window", "32"),
    ("se.bottleneck", "32"),
    ("se.repeats", "2"),
    ("se.blocks_per_repeat", "4"),
    ("se.hidden", "64"),
    ("se.kernel", "3"),
    ("se.seed", AUTO),
    ("loss.alpha", "0.1"),
    ("loss.scheme", "last"),
    ("loss.eps", "1e-8"),
    ("train.lr_pretrain", "5e-4"),
    ("train.lr_finetune", "1e-4"),
    ("train.plateau_factor", "0.75"),
    ("train.plateau_patience", "2"),
    ("train.epochs_pretrain", "30"),
    ("train.epochs_finetune", "15"),
    ("train.batch_size", "8"),
    ("train.clip_norm", "5"),
    ("train.seed", AUTO),
    ("probe.epochs", "20"),
    ("probe.lr", "1e-2"),
    ("probe.mode", "official"),
    ("probe.seed", AUTO),
    ("sweep.alphas", "0,0.0001,0.001,0.01,0.1,1"),
    ("gradcheck.seed", AUTO),
];

/// A fully resolved configuration: raw key map plus typed views.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
    pub out: PathBuf,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub encoder_checkpoint: Option<PathBuf>,
    pub se: SEConfig,
    pub se_seed: u64,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub probe: ProbeTrainConfig,
    pub probe_mode: ProbeTrainMode,
    pub sweep_alphas: Vec<f64>,
    pub gradcheck_seed: u64,
}

impl ExperimentConfig {
    /// Build from an optional file plus command-line overrides.
    pub fn load(
        config_path: Option<&Path>,
        sets: &[String],
        out_flag: Option<&Path>,
        seed_flag: Option<u64>,
    ) -> Result<ExperimentConfig> {
        let mut entries: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();

        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    anyhow!(
                        "{}:{}: expected `key = value`, got {line:?}",
                        path.display(),
                        ln + 1
                    )
                })?;
                set_entry(&mut entries, key.trim(), value.trim())
                    .with_context(|| format!("{}:{}", path.display(), ln + 1))?;
            }
        }
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set wants KEY=VALUE, got {s:?}"))?;
            set_entry(&mut entries, key.trim(), value.trim())?;
        }
        if let Some(seed) = seed_flag {
            entries.insert("seed".into(), seed.to_string());
        }
        if let Some(out) = out_flag {
            entries.insert("out".into(), out.display().to_string());
        }

        // Resolve derived seeds from the top-level seed.
        let master: u64 = parse_key(&entries, "seed")?;
        for key in [
            "corpus.master_seed",
            "encoder.seed",
            "se.seed",
            "train.seed",
            "probe.seed",
        ] {
            if entries[key] == AUTO {
                let derived = derive_seed(master, key, 0);
                entries.insert(key.to_string(), derived.to_string());
            }
        }
        if entries["gradcheck.seed"] == AUTO {
            entries.insert("gradcheck.seed".to_string(), GRAD_CHECK_SEED.to_string());
        }

        Self::from_entries(entries)
    }

    fn from_entries(entries: BTreeMap<String, String>) -> Result<ExperimentConfig> {
        let hop: usize = parse_key(&entries, "encoder.hop")?;
        let corpus = CorpusConfig {
            n_train: parse_key(&entries, "corpus.n_train")?,
            n_dev: parse_key(&entries, "corpus.n_dev")?,
            n_eval: parse_key(&entries, "corpus.n_eval")?,
            duration_s: parse_key(&entries, "corpus.duration_s")?,
            sample_rate: parse_key(&entries, "corpus.sample_rate")?,
            hop,
            token_count: parse_key(&entries, "corpus.token_count")?,
            snr_range_train: (
                parse_key(&entries, "corpus.snr_train_lo")?,
                parse_key(&entries, "corpus.snr_train_hi")?,
            ),
            snr_range_eval: (
                parse_key(&entries, "corpus.snr_eval_lo")?,
                parse_key(&entries, "corpus.snr_eval_hi")?,
            ),
            master_seed: parse_key(&entries, "corpus.master_seed")?,
        };
        corpus.validate().map_err(|e| anyhow!("corpus.*: {e}"))?;

        let encoder = EncoderConfig {
            n_layers: parse_key(&entries, "encoder.n_layers")?,
            dim: parse_key(&entries, "encoder.dim")?,
            hop,
            frontend_kernel: parse_key(&entries, "encoder.frontend_kernel")?,
            seed: parse_key(&entries, "encoder.seed")?,
        };
        encoder.validate().map_err(|e| anyhow!("encoder.*: {e}"))?;

        let se = SEConfig {
            n_basis: parse_key(&entries, "se.n_basis")?,
            window: parse_key(&entries, "se.window")?,
            bottleneck: parse_key(&entries, "se.bottleneck")?,
            repeats: parse_key(&entries, "se.repeats")?,
            blocks_per_repeat: parse_key(&entries, "se.blocks_per_repeat")?,
            hidden: parse_key(&entries, "se.hidden")?,
            kernel: parse_key(&entries, "se.kernel")?,
        };
        se.validate().map_err(|e| anyhow!("se.*: {e}"))?;

        let loss = LossConfig {
            alpha: parse_key(&entries, "loss.alpha")?,
            scheme: LayerScheme::from_str(&entries["loss.scheme"])
                .map_err(|e| anyhow!("loss.scheme: {e}"))?,
            eps: parse_key(&entries, "loss.eps")?,
        };
        loss.validate().map_err(|e| anyhow!("loss.*: {e}"))?;

        let train = TrainConfig {
            lr_pretrain: parse_key(&entries, "train.lr_pretrain")?,
            lr_finetune: parse_key(&entries, "train.lr_finetune")?,
            plateau_factor: parse_key(&entries, "train.plateau_factor")?,
            plateau_patience: parse_key(&entries, "train.plateau_patience")?,
            epochs_pretrain: parse_key(&entries, "train.epochs_pretrain")?,
            epochs_finetune: parse_key(&entries, "train.epochs_finetune")?,
            batch_size: parse_key(&entries, "train.batch_size")?,
            clip_norm: parse_key(&entries, "train.clip_norm")?,
            seed: parse_key(&entries, "train.seed")?,
        };
        train.validate().map_err(|e| anyhow!("train.*: {e}"))?;

        let probe_mode = match entries["probe.mode"].as_str() {
            "official" => ProbeTrainMode::Official,
            "noise_robust" => ProbeTrainMode::NoiseRobust,
            other => bail!("probe.mode: expected official or noise_robust, got {other:?}"),
        };
        let probe = ProbeTrainConfig {
            epochs: parse_key(&entries, "probe.epochs")?,
            lr: parse_key(&entries, "probe.lr")?,
            seed: parse_key(&entries, "probe.seed")?,
        };

        let sweep_alphas: Vec<f64> = entries["sweep.alphas"]
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| anyhow!("sweep.alphas: bad value {v:?}: {e}"))
            })
            .collect::<Result<_>>()?;
        if sweep_alphas.is_empty() {
            bail!("sweep.alphas: the list of alpha values is empty");
        }

        let encoder_checkpoint = match entries["encoder.checkpoint"].as_str() {
            "" => None,
            p => Some(PathBuf::from(p)),
        };

        Ok(ExperimentConfig {
            out: PathBuf::from(&entries["out"]),
            corpus,
            encoder,
            encoder_checkpoint,
            se,
            se_seed: parse_key(&entries, "se.seed")?,
            loss,
            train,
            probe,
            probe_mode,
            sweep_alphas,
            gradcheck_seed: parse_key(&entries, "gradcheck.seed")?,
            entries,
        })
    }

    /// The resolved key map.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hash of the canonical form; changes iff any config value changes.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())[..16].to_string()
    }

    /// Rebuild with some keys replaced (used by sweeps).
    pub fn with_overrides(&self, sets: &[(&str, String)]) -> Result<ExperimentConfig> {
        let mut entries = self.entries.clone();
        for (k, v) in sets {
            set_entry(&mut entries, k, v)?;
        }
        Self::from_entries(entries)
    }
}

fn set_entry(entries: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<()> {
    if !entries.contains_key(key) {
        bail!("unknown config key {key:?}");
    }
    entries.insert(key.to_string(), value.to_string());
    Ok(())
}

fn parse_key<T: FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entries[key]
        .parse::<T>()
        .map_err(|e| anyhow!("{key}: cannot parse {:?}: {e}", entries[key]))
}
