//! Zero-phase Butterworth bandpass: measured steady-state gain of pure tones
//! next to the analytic response.

use mvts::dataprep::{filter_series, FilterSpec};

fn main() -> mvts::Result<()> {
    let fs = 256.0;
    let spec = FilterSpec::default();
    println!("{:>6} {:>12} {:>12}", "Hz", "measured dB", "analytic dB");
    for f in [0.1, 0.5, 2.0, 10.0, 30.0, 50.0, 60.0, 100.0] {
        let n = 8192;
        let mut x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect();
        filter_series(&spec, fs, &mut x)?;
        // Amplitude from the RMS over the middle, away from the edges.
        let mid = &x[n / 4..3 * n / 4];
        let amp = (2.0 * mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt();
        let analytic = spec.power_gain(f, fs).sqrt();
        println!("{f:>6} {:>12.2} {:>12.2}", 20.0 * amp.log10(), 20.0 * analytic.log10());
    }
    Ok(())
}
