use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Settings;
use crate::benchmark::score_split;
use crate::dataprep::{
    ingest, load_windows, manifest_path, preprocess as run_preprocess, save_windows, synth_generate, corpus_hash,
    FilterSpec, PreprocessConfig, Split, SplitRatios, SynthSpec, WindowSet, WindowSpec,
};
use crate::error::{Error, Result};
use crate::masking::{MaskSpec, MaskStrategy};
use crate::model::{check_model_gradients, ModelConfig};
use crate::scoring::{evaluate as run_evaluate, score_windows, ScoreSet, ThresholdPolicy};
use crate::training::{load_checkpoint, save_checkpoint, train as run_train, AdamConfig, RunManifest, TrainConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    manifest_path(path)
}

fn mask_spec(s: &Settings, seed_key: &str) -> Result<MaskSpec> {
    let spec = MaskSpec {
        strategy: s.get("mask-strategy")?,
        ratio: s.get("mask-ratio")?,
        mean_masked_len: s.get("mask-len")?,
        seed: s.get(seed_key)?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn synth(s: &Settings) -> Result<()> {
    let out = s.path("output")?;
    let spec = SynthSpec {
        n_normal: s.get("n-normal")?,
        n_anomalous: s.get("n-anomalous")?,
        segment_len: s.get("segment-len")?,
        channels: s.get("channels")?,
        rate_hz: s.get("rate-hz")?,
        seed: s.get("seed")?,
    };
    let recs = synth_generate(&spec)?;
    crate::dataprep::export(&out, &recs)?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        recordings: usize,
        n_normal: usize,
        n_anomalous: usize,
        corpus_sha256: String,
        config: &'a BTreeMap<String, String>,
    }
    let echo = s.echo();
    write_json(
        &out.join("synth.json"),
        &Manifest {
            recordings: recs.len(),
            n_normal: spec.n_normal,
            n_anomalous: spec.n_anomalous,
            corpus_sha256: corpus_hash(&recs),
            config: &echo,
        },
    )?;
    println!(
        "wrote {} recordings ({} normal, {} anomalous) to {}",
        recs.len(),
        spec.n_normal,
        spec.n_anomalous,
        out.display()
    );
    Ok(())
}

pub fn preprocess(s: &Settings) -> Result<()> {
    let input = s.path("input")?;
    let output = s.path("output")?;
    let filter = if s.flag("no-filter")? {
        None
    } else {
        Some(FilterSpec {
            order: s.get("order")?,
            low_hz: s.get("low")?,
            high_hz: s.get("high")?,
            zero_phase: s.get("zero-phase")?,
        })
    };
    let cfg = PreprocessConfig {
        window: WindowSpec {
            len: s.get("window-len")?,
            overlap: s.get("overlap")?,
            label_fraction: s.get("label-fraction")?,
        },
        target_hz: s.opt("target-hz")?,
        filter,
        channels: s.opt("channels")?,
        ratios: SplitRatios {
            train: s.get("train-ratio")?,
            val: s.get("val-ratio")?,
            test: s.get("test-ratio")?,
        },
        unsupervised: true,
        norm_scope: s.get("norm-scope")?,
        seed: s.get("seed")?,
    };
    let recs = ingest(&input)?;
    let ws = run_preprocess(&recs, &cfg)?;
    let manifest = save_windows(&ws, &output, &s.echo())?;
    println!("{} windows of {}x{} from {} recordings", ws.len(), ws.window_len(), ws.channels(), recs.len());
    println!("{:<6} {:>8} {:>10}", "split", "normal", "anomalous");
    for split in Split::ALL {
        let c = &manifest.counts[split.name()];
        println!("{:<6} {:>8} {:>10}", split.name(), c.normal, c.anomalous);
    }
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    let windows = s.path("windows")?;
    let output = s.path("output")?;
    let manifest = s.opt::<PathBuf>("manifest")?.unwrap_or_else(|| sidecar(&output));
    let seed: u64 = s.get("seed")?;
    let ws = load_windows(&windows)?;
    let model = ModelConfig {
        window_len: ws.window_len(),
        channels: ws.channels(),
        d_model: s.get("d-model")?,
        heads: s.get("heads")?,
        d_qk: s.get("d-qk")?,
        d_v: s.get("d-v")?,
        layers: s.get("layers")?,
        ffn_width: s.get("ffn-width")?,
        dropout: s.get("dropout")?,
        seed,
    };
    let cfg = TrainConfig {
        mask: mask_spec(s, "mask-seed")?,
        batch_size: s.get("batch-size")?,
        max_epochs: s.get("epochs")?,
        learning_rate: s.get("lr")?,
        adam: AdamConfig {
            beta1: s.get("beta1")?,
            beta2: s.get("beta2")?,
            eps: s.get("adam-eps")?,
        },
        patience: s.get("patience")?,
        seed,
        precision: s.get("precision")?,
    };
    let (params, report) = run_train(&ws, &model, &cfg)?;
    let bytes = save_checkpoint(&params, &output)?;
    RunManifest::new(&model, &cfg, &report, &output, &bytes, s.echo()).save(&manifest)?;
    println!(
        "{} epochs, best epoch {} with validation loss {:.6}{}",
        report.epochs_run(),
        report.best_epoch,
        report.best_val_loss,
        if report.stopped_early { " (stopped early)" } else { "" }
    );
    println!("checkpoint {} sha256 {}", output.display(), crate::sha256_hex(&bytes));
    Ok(())
}

fn load_model_for(checkpoint: &Path, ws: &WindowSet) -> Result<crate::model::ModelParams<f32>> {
    let params = load_checkpoint(checkpoint)?;
    let c = &params.config;
    if c.window_len != ws.window_len() || c.channels != ws.channels() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {}x{} windows, container holds {}x{}",
            c.window_len,
            c.channels,
            ws.window_len(),
            ws.channels()
        )));
    }
    Ok(params)
}

pub fn score(s: &Settings) -> Result<()> {
    let checkpoint = s.path("checkpoint")?;
    let windows = s.path("windows")?;
    let output = s.path("output")?;
    let ws = load_windows(&windows)?;
    let params = load_model_for(&checkpoint, &ws)?;
    let set = match s.raw("split") {
        Some("all") | None => {
            let scores = score_windows(&params, &ws.windows)?;
            ScoreSet::new((0..ws.len()).collect(), scores, ws.labels.clone())?
        }
        Some(name) => score_split(&params, &ws, name.parse()?)?,
    };
    set.save_csv(&output)?;
    #[derive(Serialize)]
    struct Manifest {
        windows: usize,
        checkpoint_sha256: String,
        windows_sha256: String,
        scores_sha256: String,
        config: BTreeMap<String, String>,
    }
    write_json(
        &sidecar(&output),
        &Manifest {
            windows: set.len(),
            checkpoint_sha256: crate::sha256_hex(&fs::read(&checkpoint)?),
            windows_sha256: crate::sha256_hex(&fs::read(&windows)?),
            scores_sha256: crate::sha256_hex(set.to_csv().as_bytes()),
            config: s.echo(),
        },
    )?;
    let mean = |label: bool| {
        let v: Vec<f64> = set.scores.iter().zip(&set.labels).filter(|(_, &l)| l == label).map(|(&x, _)| x).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    println!(
        "scored {} windows; mean score normal {:.4}, anomalous {:.4}",
        set.len(),
        mean(false),
        mean(true)
    );
    Ok(())
}

pub fn evaluate(s: &Settings) -> Result<()> {
    let scores_path = s.path("scores")?;
    let output = s.path("output")?;
    let policy: ThresholdPolicy = s.get("threshold-policy")?;
    let all = ScoreSet::load_csv(&scores_path)?;
    let (test, calibration) = match s.opt::<PathBuf>("windows")? {
        Some(path) => {
            let ws = load_windows(&path)?;
            let cal_split: Split = s.get("calibration-split")?;
            if let Some(&bad) = all.ids.iter().find(|&&i| i >= ws.len()) {
                return Err(Error::input(&scores_path, format!("window id {bad} not in {}", path.display())));
            }
            let in_split = |split: Split| all.filter(|i| ws.splits[i] == split);
            (in_split(Split::Test), in_split(cal_split))
        }
        None if policy == ThresholdPolicy::Test => (all.clone(), all.clone()),
        None => {
            return Err(Error::Config(
                "calibration thresholding needs `windows` to locate the calibration split".into(),
            ))
        }
    };
    let mut report = run_evaluate(&test, &calibration, policy)?;
    report.config = s.echo();
    write_json(&output, &report)?;
    println!(
        "AUC {:.4} ± {:.4}  balanced accuracy {:.4} ± {:.4}  threshold {} ({:?})",
        report.auc.value,
        report.auc.ci95,
        report.balanced_accuracy.value,
        report.balanced_accuracy.ci95,
        report.threshold,
        policy
    );
    println!(
        "precision {:.4} ± {:.4}  recall {:.4} ± {:.4}  on {} anomalous / {} normal windows",
        report.precision.value, report.precision.ci95, report.recall.value, report.recall.ci95, report.m, report.n
    );
    Ok(())
}

pub fn maskdemo(s: &Settings) -> Result<()> {
    let t: usize = s.get("window-len")?;
    let m: usize = s.get("channels")?;
    let spec = mask_spec(s, "seed")?;
    let mask = spec.generate(t, m, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
    let mut csv = String::new();
    for ti in 0..t {
        let row: Vec<&str> = (0..m).map(|mi| if mask.get(ti, mi) { "1" } else { "0" }).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let st = mask.stats();
    let expected_unmasked = match spec.strategy {
        MaskStrategy::Geometric => spec.unmasked_mean_len(),
        MaskStrategy::Bernoulli => 1.0 / spec.ratio,
    };
    let line = format!(
        "fraction={:.4} mean_masked_run={:.3} mean_unmasked_run={:.3} expected_unmasked_run={:.3}",
        st.fraction, st.mean_masked_run, st.mean_unmasked_run, expected_unmasked
    );
    match s.opt::<PathBuf>("output")? {
        Some(path) => {
            fs::write(&path, &csv)?;
            #[derive(Serialize)]
            struct Manifest<'a> {
                stats: &'a crate::masking::MaskStats,
                config: BTreeMap<String, String>,
            }
            write_json(&sidecar(&path), &Manifest { stats: &st, config: s.echo() })?;
        }
        None => print!("{csv}"),
    }
    println!("# {line}");
    Ok(())
}

pub fn gradcheck(s: &Settings) -> Result<()> {
    let cfg = ModelConfig {
        window_len: s.get("window-len")?,
        channels: s.get("channels")?,
        d_model: s.get("d-model")?,
        heads: s.get("heads")?,
        d_qk: s.get("d-qk")?,
        d_v: s.get("d-v")?,
        layers: s.get("layers")?,
        ffn_width: s.get("ffn-width")?,
        dropout: s.get("dropout")?,
        seed: s.get("seed")?,
    };
    cfg.validate()?;
    let tolerance: f64 = s.get("tolerance")?;
    let report = check_model_gradients(&cfg, s.get("batch")?, cfg.seed)?;
    for e in &report.entries {
        println!("{:<28} max relative error {:.3e}", e.name, e.max_rel_error);
    }
    report.ensure(tolerance)?;
    println!("all {} parameter gradients within {tolerance:e}", report.entries.len());
    Ok(())
}

fn render_ppm(matrix: &[f32], t: usize) -> Vec<u8> {
    let max = matrix.iter().copied().fold(f32::MIN_POSITIVE, f32::max);
    let mut out = format!("P6\n{t} {t}\n255\n").into_bytes();
    for &v in matrix {
        let g = (v / max * 255.0).round().clamp(0.0, 255.0) as u8;
        out.extend([g, g, g]);
    }
    out
}

pub fn attn(s: &Settings) -> Result<()> {
    let checkpoint = s.path("checkpoint")?;
    let windows = s.path("windows")?;
    let out_dir = s.path("output")?;
    let index: usize = s.get("window")?;
    let ppm = s.flag("ppm")?;
    let ws = load_windows(&windows)?;
    if index >= ws.len() {
        return Err(Error::Config(format!("window {index} out of range (container holds {})", ws.len())));
    }
    let params = load_model_for(&checkpoint, &ws)?;
    let (t, m) = (ws.window_len(), ws.channels());
    let x = ws.gather(&[index]);
    let out = params.forward(&x, true)?;
    fs::create_dir_all(&out_dir)?;

    let mut files = Vec::new();
    let mut worst_row_error: f64 = 0.0;
    for (layer, a) in out.attentions.iter().enumerate() {
        let heads = a.shape()[1];
        for h in 0..heads {
            let block = &a.data()[h * t * t..(h + 1) * t * t];
            let mut csv = String::new();
            for row in block.chunks(t) {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                worst_row_error = worst_row_error.max((sum - 1.0).abs());
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(csv, "{}", cells.join(","));
            }
            let name = format!("attn_layer{layer}_head{h}");
            fs::write(out_dir.join(format!("{name}.csv")), csv)?;
            files.push(format!("{name}.csv"));
            if ppm {
                fs::write(out_dir.join(format!("{name}.ppm")), render_ppm(block, t))?;
                files.push(format!("{name}.ppm"));
            }
        }
    }

    let mut channel_errors = vec![0.0f64; m];
    for (i, (a, b)) in x.data().iter().zip(out.recon.data()).enumerate() {
        channel_errors[i % m] += ((a - b).abs() as f64) / t as f64;
    }
    let worst_channel = channel_errors
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(c, _)| c)
        .unwrap_or(0);

    #[derive(Serialize)]
    struct Summary {
        window: usize,
        label: bool,
        split: &'static str,
        layers: usize,
        heads: usize,
        window_len: usize,
        worst_channel: usize,
        channel_errors: Vec<f64>,
        max_row_sum_error: f64,
        files: Vec<String>,
        config: BTreeMap<String, String>,
    }
    write_json(
        &out_dir.join("attention.json"),
        &Summary {
            window: index,
            label: ws.labels[index],
            split: ws.splits[index].name(),
            layers: out.attentions.len(),
            heads: params.config.heads,
            window_len: t,
            worst_channel,
            channel_errors,
            max_row_sum_error: worst_row_error,
            files,
            config: s.echo(),
        },
    )?;
    println!(
        "wrote {} heatmaps of {t}x{t} to {}; channel with largest reconstruction error: {worst_channel}",
        out.attentions.len() * params.config.heads,
        out_dir.display()
    );
    Ok(())
}

