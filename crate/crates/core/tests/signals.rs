use std::f64::consts::PI;

use emgpinn::signals::{
    central_difference, gaussian_kernel, gaussian_smooth, linear_envelope, EnvelopeConfig, FilterSpec, SosFilter,
    UniformSeries,
};
use proptest::prelude::*;

/// Digital Butterworth magnitude from the prewarped analog prototype.
fn lowpass_oracle(f: f64, cutoff: f64, order: i32, rate: f64) -> f64 {
    let r = (PI * f / rate).tan() / (PI * cutoff / rate).tan();
    1.0 / (1.0 + r.powi(2 * order)).sqrt()
}

fn bandpass_oracle(f: f64, low: f64, high: f64, order: i32, rate: f64) -> f64 {
    let w = |x: f64| (PI * x / rate).tan();
    let (w0, w1, w2) = (w(f), w(low), w(high));
    let x = (w0 * w0 - w1 * w2) / (w0 * (w2 - w1));
    1.0 / (1.0 + x.abs().powi(2 * order)).sqrt()
}

fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lowpass_matches_oracle(cutoff in 1.0f64..400.0, order in 1usize..7, frac in 0.001f64..0.49) {
        let rate = 1000.0;
        let filt = SosFilter::design(&FilterSpec::lowpass(cutoff, order), rate).unwrap();
        let f = frac * rate;
        let got = filt.response(f, rate).norm();
        prop_assert!((got - lowpass_oracle(f, cutoff, order as i32, rate)).abs() < 1e-9);
    }

    #[test]
    fn bandpass_matches_oracle(low in 5.0f64..100.0, width in 20.0f64..800.0, order in 1usize..6, frac in 0.0005f64..0.49) {
        let rate = 4000.0;
        let high = low + width;
        let filt = SosFilter::design(&FilterSpec::bandpass(low, high, order), rate).unwrap();
        let f = frac * rate;
        let got = filt.response(f, rate).norm();
        prop_assert!((got - bandpass_oracle(f, low, high, order as i32, rate)).abs() < 1e-9);
    }

    #[test]
    fn filtfilt_is_linear(
        a in prop::collection::vec(-1.0f64..1.0, 200),
        b in prop::collection::vec(-1.0f64..1.0, 200),
        k in -3.0f64..3.0,
    ) {
        let filt = SosFilter::design(&FilterSpec::lowpass(40.0, 4), 1000.0).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + k * y).collect();
        let (fa, fb, fc) = (filt.filtfilt(&a), filt.filtfilt(&b), filt.filtfilt(&combo));
        for i in 0..a.len() {
            prop_assert!((fc[i] - (fa[i] + k * fb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_preserves_affine_signals(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        // Symmetric kernel: linear signals are reproduced away from the edges.
        let x = UniformSeries::single(125.0, 0.0, (0..200).map(|i| a + b * i as f64 / 125.0).collect()).unwrap();
        let y = gaussian_smooth(&x, 10.0, 30).unwrap();
        for i in 30..170 {
            prop_assert!((y.channel(0)[i] - x.channel(0)[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn filtfilt_squares_the_magnitude_on_sinusoids() {
    let rate = 4000.0;
    let filt = SosFilter::design(&FilterSpec::bandpass(10.0, 450.0, 4), rate).unwrap();
    for f in [20.0, 100.0, 400.0, 600.0] {
        let x = sine(f, rate, 16_000);
        let y = filt.filtfilt(&x);
        let gain = rms(&y[4000..12_000]) / rms(&x[4000..12_000]);
        let oracle = bandpass_oracle(f, 10.0, 450.0, 4, rate).powi(2);
        assert!((gain - oracle).abs() < 2e-3, "{f} Hz: {gain} vs {oracle}");
    }
}

#[test]
fn filtfilt_has_zero_phase() {
    let rate = 1000.0;
    let filt = SosFilter::design(&FilterSpec::lowpass(50.0, 4), rate).unwrap();
    let x = sine(5.0, rate, 4000);
    let y = filt.filtfilt(&x);
    // Peak positions agree: no lag.
    let peak = |s: &[f64]| (1000..1200).max_by(|&i, &j| s[i].total_cmp(&s[j])).unwrap();
    assert_eq!(peak(&x), peak(&y));
}

#[test]
fn envelope_tracks_amplitude_modulation() {
    let rate = 2000.0;
    let n = 8000;
    let modulation: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * (2.0 * PI * 1.0 * i as f64 / rate).sin()).collect();
    let raw: Vec<f64> = (0..n).map(|i| modulation[i] * (2.0 * PI * 120.0 * i as f64 / rate).sin()).collect();
    let series = UniformSeries::single(rate, 0.0, raw).unwrap();
    let env = linear_envelope(&series, &EnvelopeConfig::default()).unwrap();
    // Rectified sine averages 2/π of its amplitude.
    let scale = 2.0 / PI;
    for i in (1000..7000).step_by(97) {
        let expected = scale * modulation[i];
        assert!((env.channel(0)[i] - expected).abs() < 0.02, "sample {i}: {} vs {expected}", env.channel(0)[i]);
    }
}

#[test]
fn gaussian_kernel_is_normalized_and_symmetric() {
    let k = gaussian_kernel(10.0, 30);
    assert_eq!(k.len(), 61);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..30 {
        assert_eq!(k[i], k[60 - i]);
    }
}

#[test]
fn differences_exact_on_quadratics() {
    let rate = 125.0;
    let x = UniformSeries::single(rate, 0.0, (0..50).map(|i| {
        let t = i as f64 / rate;
        3.0 * t * t - 2.0 * t + 1.0
    }).collect()).unwrap();
    let d1 = central_difference(&x, 1).unwrap();
    let d2 = central_difference(&x, 2).unwrap();
    for i in 0..50 {
        let t = i as f64 / rate;
        assert!((d1.channel(0)[i] - (6.0 * t - 2.0)).abs() < 1e-9);
        assert!((d2.channel(0)[i] - 6.0).abs() < 1e-6);
    }
}

#[test]
fn designs_reject_bad_corners() {
    assert!(SosFilter::design(&FilterSpec::lowpass(600.0, 4), 1000.0).is_err());
    assert!(SosFilter::design(&FilterSpec::bandpass(100.0, 50.0, 2), 1000.0).is_err());
    assert!(SosFilter::design(&FilterSpec::lowpass(10.0, 0), 1000.0).is_err());
}
