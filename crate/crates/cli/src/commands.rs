//! Subcommand implementations. Each writes its artifacts under the output
//! directory plus a JSON run summary; reruns with identical configuration
//! produce byte-identical CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use sealign_core::datasim::{self, Corpus, Split};
use sealign_core::downstream::{self, ProbeInput, ProbeParams, TaskWeights, TrainedProbe};
use sealign_core::losses::{LayerScheme, LossConfig};
use sealign_core::semodel::{init_se_model, SEParams};
use sealign_core::signal::{read_wav, write_wav};
use sealign_core::sslenc::{init_frozen_encoder, EncoderParams};
use sealign_core::training::{
    self, breakdown_csv, checkpoint::Checkpoint, train_log_csv, TrainOutcome,
};
use sealign_core::util::fmt_metric;
use sealign_core::Tensor;

use crate::config::ExperimentConfig;
use crate::summary::write_summary;

fn corpus_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("corpus")
}

fn pretrain_ckpt(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("pretrain").join("best.ckpt")
}

fn finetune_ckpt(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join("finetune").join("best.ckpt")
}

fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing prerequisite artifact {}; run `sealign {produced_by}` first",
            path.display()
        );
    }
    Ok(())
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = corpus_dir(cfg);
    require_artifact(&dir.join("manifest.csv"), "simulate")?;
    Ok(Corpus::load(&dir)?)
}

/// Materialize the frozen encoder: from the configured checkpoint when
/// given, otherwise deterministically from the config seed.
fn load_encoder(cfg: &ExperimentConfig) -> Result<EncoderParams> {
    match &cfg.encoder_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Ok(EncoderParams::from_checkpoint(&ckpt, path)?)
        }
        None => Ok(init_frozen_encoder(&cfg.encoder)?),
    }
}

fn load_se_ckpt(path: &Path) -> Result<SEParams> {
    let ckpt = Checkpoint::load(path)?;
    Ok(SEParams::from_checkpoint(&ckpt, path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<()> {
    let dir = corpus_dir(cfg);
    fs::create_dir_all(&dir)?;
    let corpus = datasim::build_corpus(&cfg.corpus, &dir)?;

    // Materialize the frozen encoder next to the corpus for inspection.
    let encoder = load_encoder(cfg)?;
    encoder
        .to_checkpoint()
        .save(&cfg.out.join("encoder.ckpt"))?;

    let mut metrics = BTreeMap::new();
    metrics.insert("n_items".into(), json!(corpus.items.len()));
    metrics.insert("encoder_checksum".into(), json!(encoder.checksum()));
    write_summary(&dir, "simulate", cfg, metrics)?;
    println!(
        "simulate: {} items under {}",
        corpus.items.len(),
        dir.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let encoder = load_encoder(cfg)?;
    let checksum_before = encoder.checksum();
    let se = init_se_model(&cfg.se, cfg.se_seed)?;
    let dir = cfg.out.join("pretrain");
    fs::create_dir_all(&dir)?;

    let out = training::pretrain_se(
        &corpus,
        se,
        &cfg.train,
        Some(&encoder),
        Some(&dir.join("best.ckpt")),
    )?;
    write_text(&dir.join("train_log.csv"), &train_log_csv(&out.log))?;

    let mut metrics = BTreeMap::new();
    summarize_training(&mut metrics, &out);
    metrics.insert("encoder_checksum_before".into(), json!(checksum_before));
    metrics.insert("encoder_checksum_after".into(), json!(encoder.checksum()));
    write_summary(&dir, "pretrain", cfg, metrics)?;
    println!(
        "pretrain: best dev loss {} at epoch {} -> {}",
        fmt_metric(out.best_dev_loss),
        out.best_epoch,
        dir.join("best.ckpt").display()
    );
    Ok(())
}

pub fn finetune(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let encoder = load_encoder(cfg)?;
    let checksum_before = encoder.checksum();
    let pre_path = pretrain_ckpt(cfg);
    require_artifact(&pre_path, "pretrain")?;
    let se = load_se_ckpt(&pre_path)?;
    let dir = cfg.out.join("finetune");
    fs::create_dir_all(&dir)?;

    let out = training::finetune_sslmse(
        &corpus,
        se,
        &encoder,
        &cfg.loss,
        &cfg.train,
        Some(&dir.join("best.ckpt")),
    )?;
    write_text(&dir.join("train_log.csv"), &train_log_csv(&out.log))?;
    write_text(
        &dir.join("loss_breakdown.csv"),
        &breakdown_csv(&out.breakdown),
    )?;

    let mut metrics = BTreeMap::new();
    summarize_training(&mut metrics, &out);
    metrics.insert("alpha".into(), json!(cfg.loss.alpha));
    metrics.insert("scheme".into(), json!(cfg.loss.scheme.as_str()));
    metrics.insert("encoder_checksum_before".into(), json!(checksum_before));
    metrics.insert("encoder_checksum_after".into(), json!(encoder.checksum()));
    write_summary(&dir, "finetune", cfg, metrics)?;
    println!(
        "finetune: best dev loss {} at epoch {} -> {}",
        fmt_metric(out.best_dev_loss),
        out.best_epoch,
        dir.join("best.ckpt").display()
    );
    Ok(())
}

fn summarize_training(metrics: &mut BTreeMap<String, Value>, out: &TrainOutcome) {
    metrics.insert("best_dev_loss".into(), json!(out.best_dev_loss));
    metrics.insert("best_epoch".into(), json!(out.best_epoch));
    if let Some(last) = out.log.last() {
        metrics.insert("final_dev_si_sdr".into(), json!(last.dev_si_sdr));
        if let Some(v) = last.dev_ssl_mse {
            metrics.insert("final_dev_ssl_mse".into(), json!(v));
        }
    }
}

/// The enhancement frontends available in an output directory, in report
/// order. `None` stands for unprocessed audio.
fn available_frontends(cfg: &ExperimentConfig) -> Result<Vec<(String, Option<SEParams>)>> {
    let mut out: Vec<(String, Option<SEParams>)> = vec![("none".into(), None)];
    let pre = pretrain_ckpt(cfg);
    if pre.exists() {
        out.push(("pretrain".into(), Some(load_se_ckpt(&pre)?)));
    }
    let fine = finetune_ckpt(cfg);
    if fine.exists() {
        out.push(("finetune".into(), Some(load_se_ckpt(&fine)?)));
    }
    Ok(out)
}

pub fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let encoder = load_encoder(cfg)?;
    let frontends = available_frontends(cfg)?;
    let dir = cfg.out.join("evaluate");
    fs::create_dir_all(&dir)?;

    let mut csv = String::from("frontend,split,si_sdr,ssl_mse_last\n");
    let mut metrics = BTreeMap::new();
    for (tag, params) in &frontends {
        for split in [Split::Dev, Split::Eval] {
            let m = training::eval_enhancement(&corpus, split, params.as_ref(), Some(&encoder))?;
            let _ = writeln!(
                csv,
                "{tag},{},{},{}",
                split.as_str(),
                fmt_metric(m.si_sdr),
                fmt_metric(m.ssl_mse_last.unwrap_or(f64::NAN)),
            );
            metrics.insert(
                format!("{}_{}_si_sdr", tag, split.as_str()),
                json!(m.si_sdr),
            );
            if let Some(v) = m.ssl_mse_last {
                metrics.insert(format!("{}_{}_ssl_mse", tag, split.as_str()), json!(v));
            }
        }
    }
    write_text(&dir.join("metrics.csv"), &csv)?;
    write_summary(&dir, "evaluate", cfg, metrics)?;
    print!("{csv}");
    Ok(())
}

fn probe_ckpt(trained: &TrainedProbe) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.push_tensor("task_weights", trained.task_weights.logits.clone())
        .expect("unique names");
    ckpt.push_tensor("probe.w", trained.probe.w.clone())
        .expect("unique names");
    ckpt.push_tensor("probe.b", trained.probe.b.clone())
        .expect("unique names");
    ckpt.push_scalar("dev_accuracy", trained.dev_accuracy);
    ckpt
}

pub fn probe_from_ckpt(path: &Path) -> Result<(TaskWeights, ProbeParams)> {
    let ckpt = Checkpoint::load(path)?;
    let get = |name: &str| -> Result<Tensor> {
        ckpt.tensor(name)
            .cloned()
            .ok_or_else(|| anyhow!("{}: missing tensor {name:?}", path.display()))
    };
    Ok((
        TaskWeights {
            logits: get("task_weights")?,
        },
        ProbeParams {
            w: get("probe.w")?,
            b: get("probe.b")?,
        },
    ))
}

pub fn train_probe(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let encoder = load_encoder(cfg)?;
    let checksum_before = encoder.checksum();
    let dir = cfg.out.join("probe");
    fs::create_dir_all(&dir)?;

    // The probe trains without any enhancement frontend in both regimes.
    let trained = downstream::train_probe(&corpus, &encoder, None, cfg.probe_mode, &cfg.probe)?;
    probe_ckpt(&trained).save(&dir.join("probe.ckpt"))?;

    let csv = probe_results_csv(cfg, &corpus, &encoder, &trained)?;
    write_text(&dir.join("results.csv"), &csv)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("dev_accuracy".into(), json!(trained.dev_accuracy));
    metrics.insert("train_mode".into(), json!(cfg.probe_mode.as_str()));
    metrics.insert("encoder_checksum_before".into(), json!(checksum_before));
    metrics.insert("encoder_checksum_after".into(), json!(encoder.checksum()));
    write_summary(&dir, "train-probe", cfg, metrics)?;
    print!("{csv}");
    Ok(())
}

/// Accuracy rows over every (input, frontend, split) pipeline. The
/// frontend tag spells out the pipeline: e.g. `noisy>finetune` means noisy
/// input passed through the fine-tuned enhancer.
fn probe_results_csv(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    encoder: &EncoderParams,
    trained: &TrainedProbe,
) -> Result<String> {
    let frontends = available_frontends(cfg)?;
    let mut csv = String::from("frontend_tag,train_mode,split,accuracy\n");
    for (input, input_tag) in [(ProbeInput::Clean, "clean"), (ProbeInput::Noisy, "noisy")] {
        for (fe_tag, params) in &frontends {
            let tag = if params.is_none() {
                input_tag.to_string()
            } else {
                format!("{input_tag}>{fe_tag}")
            };
            for split in [Split::Dev, Split::Eval] {
                let acc = downstream::eval_probe(
                    corpus,
                    split,
                    encoder,
                    params.as_ref(),
                    &trained.task_weights,
                    &trained.probe,
                    input,
                )?;
                let _ = writeln!(
                    csv,
                    "{tag},{},{},{}",
                    cfg.probe_mode.as_str(),
                    split.as_str(),
                    fmt_metric(acc)
                );
            }
        }
    }
    Ok(csv)
}

pub fn sweep_alpha(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let encoder = load_encoder(cfg)?;
    let pre_path = pretrain_ckpt(cfg);
    require_artifact(&pre_path, "pretrain")?;
    let pretrained = load_se_ckpt(&pre_path)?;
    let dir = cfg.out.join("sweep");
    fs::create_dir_all(&dir)?;

    // One probe, trained once on clean features without any frontend,
    // scores every alpha point.
    let probe = downstream::train_probe(&corpus, &encoder, None, cfg.probe_mode, &cfg.probe)?;

    let mut rows = Vec::new();
    for &alpha in &cfg.sweep_alphas {
        let point_dir = dir.join(format!("alpha_{alpha}"));
        fs::create_dir_all(&point_dir)?;
        let lcfg = LossConfig { alpha, ..cfg.loss };
        let out = training::finetune_sslmse(
            &corpus,
            pretrained.clone(),
            &encoder,
            &lcfg,
            &cfg.train,
            Some(&point_dir.join("best.ckpt")),
        )?;
        write_text(&point_dir.join("train_log.csv"), &train_log_csv(&out.log))?;
        write_text(
            &point_dir.join("loss_breakdown.csv"),
            &breakdown_csv(&out.breakdown),
        )?;

        let m = training::eval_enhancement(&corpus, Split::Dev, Some(&out.params), Some(&encoder))?;
        let acc_noisy = downstream::eval_probe(
            &corpus,
            Split::Dev,
            &encoder,
            Some(&out.params),
            &probe.task_weights,
            &probe.probe,
            ProbeInput::Noisy,
        )?;
        let acc_clean = downstream::eval_probe(
            &corpus,
            Split::Dev,
            &encoder,
            Some(&out.params),
            &probe.task_weights,
            &probe.probe,
            ProbeInput::Clean,
        )?;
        println!(
            "alpha {alpha}: dev si-sdr {:.2}, dev feature-mse {:.5}, probe noisy {:.3}",
            m.si_sdr,
            m.ssl_mse_last.unwrap_or(f64::NAN),
            acc_noisy
        );
        rows.push((
            alpha,
            m.si_sdr,
            m.ssl_mse_last.unwrap_or(f64::NAN),
            acc_noisy,
            acc_clean,
        ));
    }

    let mut csv =
        String::from("alpha,dev_si_sdr,dev_ssl_mse_last,probe_acc_noisy,probe_acc_clean\n");
    for (alpha, si, mse, accn, accc) in &rows {
        let _ = writeln!(
            csv,
            "{alpha},{},{},{},{}",
            fmt_metric(*si),
            fmt_metric(*mse),
            fmt_metric(*accn),
            fmt_metric(*accc)
        );
    }
    write_text(&dir.join("sweep.csv"), &csv)?;

    // Plot data on a log-like axis: alpha = 0 sits one decade below the
    // smallest nonzero alpha.
    let min_nonzero = cfg
        .sweep_alphas
        .iter()
        .copied()
        .filter(|a| *a > 0.0)
        .fold(f64::INFINITY, f64::min);
    let zero_pos = if min_nonzero.is_finite() {
        min_nonzero.log10() - 1.0
    } else {
        -1.0
    };
    let mut plot = String::from("alpha,axis_pos,dev_si_sdr,probe_acc_noisy\n");
    for (alpha, si, _, accn, _) in &rows {
        let pos = if *alpha > 0.0 {
            alpha.log10()
        } else {
            zero_pos
        };
        let _ = writeln!(
            plot,
            "{alpha},{},{},{}",
            fmt_metric(pos),
            fmt_metric(*si),
            fmt_metric(*accn)
        );
    }
    write_text(&dir.join("plot_data.csv"), &plot)?;

    let mut metrics = BTreeMap::new();
    metrics.insert("n_alphas".into(), json!(rows.len()));
    write_summary(&dir, "sweep-alpha", cfg, metrics)?;
    Ok(())
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    let (se_cfg, enc_cfg) = training::grad_check_presets();
    let dir = cfg.out.join("gradcheck");
    fs::create_dir_all(&dir)?;

    let mut csv = String::from("scheme,alpha,max_rel_error\n");
    let mut worst = 0.0f64;
    let mut failed = false;
    for scheme in LayerScheme::ALL_SCHEMES {
        for alpha in [0.0, 0.1, 1.0] {
            let lcfg = LossConfig {
                alpha,
                scheme,
                eps: cfg.loss.eps,
            };
            let err = training::grad_check(&se_cfg, &enc_cfg, &lcfg, cfg.gradcheck_seed)?;
            let ok = err < 1e-3;
            failed |= !ok;
            worst = worst.max(err);
            println!(
                "[{}] scheme {:<11} alpha {:<6}: max relative error {}",
                if ok { "PASS" } else { "FAIL" },
                scheme.as_str(),
                alpha,
                fmt_metric(err)
            );
            let _ = writeln!(csv, "{},{alpha},{}", scheme.as_str(), fmt_metric(err));
        }
    }
    write_text(&dir.join("gradcheck.csv"), &csv)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("worst_rel_error".into(), json!(worst));
    write_summary(&dir, "gradcheck", cfg, metrics)?;
    if failed {
        bail!("gradient check failed: worst relative error {worst}");
    }
    Ok(())
}

pub fn report(cfg: &ExperimentConfig) -> Result<()> {
    let eval_csv = read_csv(&cfg.out.join("evaluate").join("metrics.csv"));
    let probe_csv = read_csv(&cfg.out.join("probe").join("results.csv"));
    let sweep_csv = read_csv(&cfg.out.join("sweep").join("sweep.csv"));
    if eval_csv.is_none() && probe_csv.is_none() && sweep_csv.is_none() {
        bail!(
            "no runs found under {}: expected evaluate/metrics.csv, probe/results.csv or sweep/sweep.csv",
            cfg.out.display()
        );
    }

    // Rows keyed by frontend, in the comparison order: unprocessed audio,
    // the SNR-only enhancer, then every feature-loss variant.
    #[derive(Default, Clone)]
    struct Row {
        si_sdr: Option<(String, String)>,
        ssl_mse: Option<(String, String)>,
        acc_noisy: Option<(String, String)>,
        acc_clean: Option<(String, String)>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Row> = BTreeMap::new();
    let touch = |name: &str, order: &mut Vec<String>, rows: &mut BTreeMap<String, Row>| {
        if !rows.contains_key(name) {
            order.push(name.to_string());
            rows.insert(name.to_string(), Row::default());
        }
    };

    let label_of = |tag: &str| -> Option<String> {
        match tag {
            "none" => Some("no-SE".into()),
            "pretrain" => Some("snr-only".into()),
            "finetune" => Some(format!("ssl-mse(alpha={})", cfg.loss.alpha)),
            _ => None,
        }
    };

    // Seed the canonical ordering.
    for name in ["no-SE", "snr-only"] {
        touch(name, &mut order, &mut rows);
    }

    if let Some((path, lines)) = &eval_csv {
        for (i, line) in lines.iter().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[1] != "eval" {
                continue;
            }
            let Some(label) = label_of(f[0]) else {
                continue;
            };
            touch(&label, &mut order, &mut rows);
            let provenance = format!("{path}:{}", i + 2);
            let row = rows.get_mut(&label).unwrap();
            row.si_sdr = Some((f[2].into(), provenance.clone()));
            row.ssl_mse = Some((f[3].into(), provenance));
        }
    }
    if let Some((path, lines)) = &probe_csv {
        for (i, line) in lines.iter().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[2] != "eval" {
                continue;
            }
            let provenance = format!("{path}:{}", i + 2);
            let (input, fe_tag) = match f[0].split_once('>') {
                Some((i, fe)) => (i, fe),
                None => (f[0], "none"),
            };
            let Some(label) = label_of(fe_tag) else {
                continue;
            };
            touch(&label, &mut order, &mut rows);
            let row = rows.get_mut(&label).unwrap();
            match input {
                "noisy" => row.acc_noisy = Some((f[3].into(), provenance)),
                "clean" => row.acc_clean = Some((f[3].into(), provenance)),
                _ => {}
            }
        }
    }
    if let Some((path, lines)) = &sweep_csv {
        for (i, line) in lines.iter().enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                continue;
            }
            let label = format!("ssl-mse(alpha={})", f[0]);
            touch(&label, &mut order, &mut rows);
            let provenance = format!("{path}:{}", i + 2);
            let row = rows.get_mut(&label).unwrap();
            row.si_sdr = Some((f[1].into(), provenance.clone()));
            row.ssl_mse = Some((f[2].into(), provenance.clone()));
            row.acc_noisy = Some((f[3].into(), provenance.clone()));
            row.acc_clean = Some((f[4].into(), provenance));
        }
    }

    let cell = |v: &Option<(String, String)>| {
        v.as_ref()
            .map(|(x, _)| x.clone())
            .unwrap_or_else(|| "-".into())
    };
    let prov = |row: &Row| -> String {
        [&row.si_sdr, &row.ssl_mse, &row.acc_noisy, &row.acc_clean]
            .into_iter()
            .flatten()
            .next()
            .map(|(_, p)| p.split(':').next().unwrap_or("").to_string())
            .unwrap_or_else(|| "-".into())
    };

    let mut csv = String::from("frontend,si_sdr,ssl_mse,probe_acc_noisy,probe_acc_clean,source\n");
    let mut table = format!(
        "{:<22} {:>16} {:>16} {:>16} {:>16}  {}\n",
        "frontend", "si_sdr", "ssl_mse", "probe_acc_noisy", "probe_acc_clean", "source"
    );
    for name in &order {
        let row = &rows[name];
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{}",
            cell(&row.si_sdr),
            cell(&row.ssl_mse),
            cell(&row.acc_noisy),
            cell(&row.acc_clean),
            prov(row)
        );
        let _ = writeln!(
            table,
            "{:<22} {:>16} {:>16} {:>16} {:>16}  {}",
            name,
            cell(&row.si_sdr),
            cell(&row.ssl_mse),
            cell(&row.acc_noisy),
            cell(&row.acc_clean),
            prov(row)
        );
    }

    let dir = cfg.out.join("report");
    write_text(&dir.join("report.csv"), &csv)?;
    write_text(&dir.join("report.txt"), &table)?;
    print!("{table}");

    let mut metrics = BTreeMap::new();
    metrics.insert("n_rows".into(), json!(order.len()));
    write_summary(&dir, "report", cfg, metrics)?;
    Ok(())
}

/// Read a CSV, returning (display path, data lines without the header).
fn read_csv(path: &Path) -> Option<(String, Vec<String>)> {
    let text = fs::read_to_string(path).ok()?;
    let lines: Vec<String> = text.lines().skip(1).map(str::to_string).collect();
    // Display path relative to the run dir: the last two components.
    let display: Vec<String> = path
        .iter()
        .rev()
        .take(2)
        .map(|c| c.to_string_lossy().into_owned())
        .collect();
    Some((format!("{}/{}", display[1], display[0]), lines))
}

pub fn enhance(input: &Path, out: &Path, ckpt: &Path) -> Result<()> {
    let noisy = read_wav(input)?;
    let se = load_se_ckpt(ckpt)?;
    let enhanced = se.enhance(&noisy)?;
    write_wav(out, &enhanced)?;
    println!(
        "enhanced {} samples at {} Hz -> {}",
        enhanced.len(),
        enhanced.sample_rate,
        out.display()
    );
    Ok(())
}
