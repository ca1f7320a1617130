//! Command-line front end. Every setting can be given as a `--flag` or as a
//! `key = value` line in a `--config` file; flags win.

mod commands;
mod settings;

use std::ffi::OsString;

use clap::{Arg, ArgMatches, Command};

use crate::error::{Error, Result};
pub use settings::{parse_config_file, Key, Settings};
use settings::{switch, value};

const SYNTH: &[Key] = &[
    value("output", None, "directory for recordings"),
    value("n-normal", Some("100"), "normal recordings"),
    value("n-anomalous", Some("20"), "recordings containing a seizure-like discharge"),
    value("segment-len", Some("1024"), "samples per recording"),
    value("channels", Some("4"), "channels per recording"),
    value("rate-hz", Some("256"), "sampling rate"),
    value("seed", None, "random seed (required)"),
];

const PREPROCESS: &[Key] = &[
    value("input", None, "dataset directory of CSV recordings with .meta.json sidecars"),
    value("output", None, "windows container to write"),
    value("window-len", Some("128"), "time points per window"),
    value("overlap", Some("0.5"), "fraction shared by consecutive windows"),
    value("label-fraction", Some("0.5"), "anomalous-overlap fraction that labels a window"),
    value("target-hz", None, "common sampling rate [default: lowest in corpus]"),
    value("channels", None, "channel count after alignment [default: largest in corpus]"),
    value("low", Some("0.5"), "bandpass lower edge, Hz"),
    value("high", Some("50"), "bandpass upper edge, Hz"),
    value("order", Some("4"), "bandpass order"),
    value("zero-phase", Some("true"), "forward-backward filtering"),
    switch("no-filter", "skip the bandpass"),
    value("train-ratio", Some("0.6"), "share of windows in the training split"),
    value("val-ratio", Some("0.2"), "share of windows in the validation split"),
    value("test-ratio", Some("0.2"), "share of windows in the test split"),
    value("norm-scope", Some("train-only"), "normalization statistics from train-only or all-windows"),
    value("seed", Some("0"), "split seed"),
];

const MODEL: &[Key] = &[
    value("d-model", Some("64"), "latent width"),
    value("heads", Some("8"), "attention heads"),
    value("d-qk", Some("8"), "query/key width per head"),
    value("d-v", Some("8"), "value width per head"),
    value("layers", Some("3"), "transformer layers"),
    value("ffn-width", Some("256"), "feed-forward hidden width"),
    value("dropout", Some("0.1"), "dropout probability"),
];

const MASK: &[Key] = &[
    value("mask-strategy", Some("geometric"), "geometric or bernoulli"),
    value("mask-ratio", Some("0.15"), "expected masked fraction"),
    value("mask-len", Some("3"), "mean masked run length (geometric)"),
    value("mask-seed", Some("0"), "mask seed"),
];

const TRAIN: &[Key] = &[
    value("windows", None, "windows container"),
    value("output", None, "checkpoint to write"),
    value("manifest", None, "run manifest [default: <output>.json]"),
    value("batch-size", Some("32"), "windows per step"),
    value("epochs", Some("200"), "maximum epochs"),
    value("lr", Some("0.001"), "Adam learning rate; 0 freezes the model"),
    value("beta1", Some("0.9"), "Adam first-moment decay"),
    value("beta2", Some("0.999"), "Adam second-moment decay"),
    value("adam-eps", Some("1e-8"), "Adam epsilon"),
    value("patience", Some("10"), "epochs without validation improvement before stopping"),
    value("precision", Some("f32"), "f32 or f64 arithmetic"),
    value("seed", None, "initialization, shuffling and dropout seed (required)"),
];

const SCORE: &[Key] = &[
    value("checkpoint", None, "trained checkpoint"),
    value("windows", None, "windows container"),
    value("output", None, "scores CSV to write"),
    value("split", Some("all"), "all, train, val or test"),
];

const EVALUATE: &[Key] = &[
    value("scores", None, "scores CSV"),
    value("windows", None, "windows container giving each window's split"),
    value("output", None, "report JSON to write"),
    value("threshold-policy", Some("calibration"), "fit the threshold on the calibration split or on test"),
    value("calibration-split", Some("val"), "split used for calibration"),
];

const MASKDEMO: &[Key] = &[
    value("window-len", Some("128"), "time points"),
    value("channels", Some("4"), "channels"),
    value("output", None, "CSV to write [default: stdout]"),
];

const GRADCHECK: &[Key] = &[
    value("window-len", Some("8"), "time points"),
    value("channels", Some("2"), "channels"),
    value("d-model", Some("8"), "latent width"),
    value("heads", Some("2"), "attention heads"),
    value("d-qk", Some("4"), "query/key width per head"),
    value("d-v", Some("4"), "value width per head"),
    value("layers", Some("1"), "transformer layers"),
    value("ffn-width", Some("16"), "feed-forward hidden width"),
    value("dropout", Some("0"), "dropout probability"),
    value("batch", Some("2"), "windows in the probe batch"),
    value("tolerance", Some("1e-4"), "largest accepted relative error"),
    value("seed", Some("0"), "seed for parameters, input and mask"),
];

const ATTN: &[Key] = &[
    value("checkpoint", None, "trained checkpoint"),
    value("windows", None, "windows container"),
    value("window", Some("0"), "window index"),
    value("output", None, "directory for heatmaps"),
    switch("ppm", "also render grayscale PPM images"),
];

struct Sub {
    name: &'static str,
    about: &'static str,
    keys: Vec<Key>,
}

fn subcommands() -> Vec<Sub> {
    let cat = |parts: &[&[Key]]| parts.concat();
    vec![
        Sub { name: "synth", about: "Generate a synthetic EEG-like corpus", keys: SYNTH.to_vec() },
        Sub { name: "preprocess", about: "Filter, resample, window, split and normalize a corpus", keys: PREPROCESS.to_vec() },
        Sub { name: "train", about: "Train the autoencoder on normal training windows", keys: cat(&[TRAIN, MODEL, MASK]) },
        Sub { name: "score", about: "Anomaly score per window", keys: SCORE.to_vec() },
        Sub { name: "evaluate", about: "Threshold selection and metrics with 95% intervals", keys: EVALUATE.to_vec() },
        Sub {
            name: "maskdemo",
            about: "Emit one training mask as CSV plus its statistics",
            keys: cat(&[MASKDEMO, &MASK[..3], &[value("seed", Some("0"), "mask seed")]]),
        },
        Sub { name: "gradcheck", about: "Finite-difference check of every parameter gradient", keys: GRADCHECK.to_vec() },
        Sub { name: "attn", about: "Export attention heatmaps for one window", keys: ATTN.to_vec() },
    ]
}

pub fn command() -> Command {
    let mut cmd = Command::new("mvts")
        .about("Transformer autoencoder for unsupervised seizure identification in multichannel EEG")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in subcommands() {
        let mut c = Command::new(sub.name).about(sub.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat key = value file; command-line flags take precedence"),
        );
        for key in &sub.keys {
            c = c.arg(key.arg());
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MVTS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("MVTS_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(name: &str, matches: &ArgMatches) -> Result<()> {
    let keys = subcommands().into_iter().find(|s| s.name == name).map(|s| s.keys).unwrap_or_default();
    let s = Settings::resolve(matches, &keys)?;
    match name {
        "synth" => commands::synth(&s),
        "preprocess" => commands::preprocess(&s),
        "train" => commands::train(&s),
        "score" => commands::score(&s),
        "evaluate" => commands::evaluate(&s),
        "maskdemo" => commands::maskdemo(&s),
        "gradcheck" => commands::gradcheck(&s),
        "attn" => commands::attn(&s),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

/// Parse `args`, run the command and return the process exit code. Errors
/// are reported on stderr as `error[category]: message`.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            eprintln!("error[config]: invalid command line");
            return 3;
        }
    };
    let result = configure_threads().and_then(|()| {
        let (name, sub) = matches.subcommand().expect("subcommand is required");
        dispatch(name, sub)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.tag());
            cat.exit_code()
        }
    }
}
