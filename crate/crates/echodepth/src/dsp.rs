//! Source-signal generation, band limiting, and spectrogram features.
//!
//! The emitted signal is a linear chirp. Band limiting is an even-symmetric
//! windowed-sinc FIR high-pass (Hann window, 1023 taps) applied to the
//! source signal with zero-phase compensation, so arrival-time structure is
//! preserved. Echoes become 2-channel log-magnitude STFT spectrograms.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::acoustics::{fft_convolve, Waveform};
use crate::error::{Error, Result};

/// STFT analysis window length in samples.
pub const STFT_WINDOW: usize = 512;
/// STFT hop length in samples.
pub const STFT_HOP: usize = 128;
/// High-pass kernel length; odd so the group delay is an integer.
pub const FILTER_TAPS: usize = 1023;

/// Linear frequency sweep emitted by the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChirpSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
    pub sample_rate: f64,
    pub amplitude: f64,
}

impl Default for ChirpSpec {
    fn default() -> Self {
        Self {
            f_start: 1.0,
            f_end: 22_050.0,
            duration: 0.05,
            sample_rate: 44_100.0,
            amplitude: 1.0,
        }
    }
}

impl ChirpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_start > 0.0 && self.f_start < self.f_end) {
            return Err(Error::InvalidConfig(format!(
                "chirp frequencies must satisfy 0 < f_start < f_end, got {} and {}",
                self.f_start, self.f_end
            )));
        }
        if self.f_end > self.sample_rate / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "chirp end frequency {} exceeds Nyquist {}",
                self.f_end,
                self.sample_rate / 2.0
            )));
        }
        if !(self.duration > 0.0) || !(self.sample_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "chirp duration and sample rate must be positive".into(),
            ));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidConfig("chirp amplitude must be finite".into()));
        }
        Ok(())
    }
}

/// High-pass band selection. `cutoff_hz = 0` means no filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandLimit {
    pub cutoff_hz: u32,
    pub nyquist_hz: u32,
}

impl BandLimit {
    pub fn new(cutoff_hz: u32, nyquist_hz: u32) -> Result<Self> {
        if cutoff_hz >= nyquist_hz {
            return Err(Error::InvalidConfig(format!(
                "cutoff {cutoff_hz} Hz must lie below Nyquist {nyquist_hz} Hz"
            )));
        }
        Ok(Self {
            cutoff_hz,
            nyquist_hz,
        })
    }
}

/// Provenance of a spectrogram's band limiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutoffTag {
    /// Echo of a source high-passed at this cutoff.
    Band(u32),
    /// Convex blend of two band-limited echoes of the same scene.
    Mixed { ultrasonic: u32, auxiliary: u32 },
}

/// Linear-phase FIR kernel produced by `design_highpass`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    taps: Vec<f64>,
    cutoff_hz: u32,
    sample_rate: f64,
}

impl FilterKernel {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn cutoff_hz(&self) -> u32 {
        self.cutoff_hz
    }

    /// Discrete-time Fourier transform magnitude at `freq_hz`.
    pub fn response_at(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq_hz / self.sample_rate;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &t) in self.taps.iter().enumerate() {
            re += t * (w * n as f64).cos();
            im -= t * (w * n as f64).sin();
        }
        (re * re + im * im).sqrt()
    }
}

/// Multi-channel magnitude (or log-magnitude) time-frequency grid.
///
/// Layout is channel-major: `value(c, f, t)` lives at `(c*bins + f)*frames + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f64>,
    channels: usize,
    bins: usize,
    frames: usize,
    window_size: usize,
    hop: usize,
    sample_rate: f64,
    cutoff_tag: Option<CutoffTag>,
}

impl Spectrogram {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        data: Vec<f64>,
        channels: usize,
        bins: usize,
        frames: usize,
        window_size: usize,
        hop: usize,
        sample_rate: f64,
        cutoff_tag: Option<CutoffTag>,
    ) -> Result<Self> {
        if data.len() != channels * bins * frames {
            return Err(Error::ShapeMismatch {
                expected: format!("{channels}x{bins}x{frames}"),
                actual: format!("{} values", data.len()),
            });
        }
        if bins != window_size / 2 + 1 {
            return Err(Error::InvalidConfig(format!(
                "bin count {bins} inconsistent with window {window_size}"
            )));
        }
        if data.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidSignal(
                "spectrogram values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            data,
            channels,
            bins,
            frames,
            window_size,
            hop,
            sample_rate,
            cutoff_tag,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn cutoff_tag(&self) -> Option<CutoffTag> {
        self.cutoff_tag
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, bin: usize, frame: usize) -> f64 {
        self.data[(channel * self.bins + bin) * self.frames + frame]
    }

    /// Center frequency of a bin in Hz.
    pub fn bin_center_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate / self.window_size as f64
    }
}

/// How far a spectrogram's energy below a cutoff sits beneath the energy
/// above it. Negative dB means suppression.
#[derive(Debug, Clone, Copy)]
pub struct BandSeparation {
    pub magnitude_db: f64,
    pub energy_db: f64,
    pub bins_below: usize,
    pub bins_above: usize,
}

/// Generate the source chirp. Instantaneous frequency runs linearly from
/// `f_start` at t=0 to `f_end` at t=duration; length = round(duration·fs).
pub fn generate_chirp(spec: &ChirpSpec) -> Result<Waveform> {
    spec.validate()?;
    let n = (spec.duration * spec.sample_rate).round() as usize;
    let rate = (spec.f_end - spec.f_start) / spec.duration;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / spec.sample_rate;
            let phase = 2.0 * std::f64::consts::PI * (spec.f_start * t + 0.5 * rate * t * t);
            spec.amplitude * phase.sin()
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Design the high-pass kernel for `band`: a Hann-windowed sinc low-pass,
/// normalized to unit sum, spectrally inverted so the DC null is exact.
/// A zero cutoff returns the identity kernel.
pub fn design_highpass(band: &BandLimit, sample_rate: f64) -> Result<FilterKernel> {
    if (sample_rate - 2.0 * band.nyquist_hz as f64).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "sample rate {sample_rate} does not match band Nyquist {}",
            band.nyquist_hz
        )));
    }
    if band.cutoff_hz == 0 {
        return Ok(FilterKernel {
            taps: vec![1.0],
            cutoff_hz: 0,
            sample_rate,
        });
    }
    let taps = FILTER_TAPS;
    let m = (taps - 1) / 2;
    let fc = band.cutoff_hz as f64 / sample_rate;
    let mut lp: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as isize - m as isize;
            if n == 0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * n as f64).sin()
                    / (std::f64::consts::PI * n as f64)
            }
        })
        .collect();
    for (i, v) in lp.iter_mut().enumerate() {
        *v *= hann_symmetric(i, taps);
    }
    let sum: f64 = lp.iter().sum();
    let mut hp: Vec<f64> = lp.iter().map(|v| -v / sum).collect();
    hp[m] += 1.0;
    Ok(FilterKernel {
        taps: hp,
        cutoff_hz: band.cutoff_hz,
        sample_rate,
    })
}

/// Apply the kernel with zero-phase compensation: full convolution, then a
/// slice offset by the group delay, so the output aligns with and has the
/// same length as the input.
pub fn apply_filter(kernel: &FilterKernel, signal: &Waveform) -> Result<Waveform> {
    if kernel.taps.len().is_multiple_of(2) {
        return Err(Error::InvalidConfig("kernel length must be odd".into()));
    }
    if kernel.taps.len() > signal.len() {
        return Err(Error::InvalidSignal(format!(
            "kernel ({} taps) longer than signal ({} samples)",
            kernel.taps.len(),
            signal.len()
        )));
    }
    if (kernel.sample_rate - signal.sample_rate).abs() > 1e-9 {
        return Err(Error::SampleRateMismatch {
            left: kernel.sample_rate,
            right: signal.sample_rate,
        });
    }
    if kernel.taps.len() == 1 {
        // Identity/gain kernel: keep exact (the zero-cutoff path must be a
        // true no-op, not an FFT round trip).
        let g = kernel.taps[0];
        return Waveform::new(
            signal.samples.iter().map(|&s| g * s).collect(),
            signal.sample_rate,
        );
    }
    let full = fft_convolve(&kernel.taps, &signal.samples);
    let delay = (kernel.taps.len() - 1) / 2;
    Waveform::new(
        full[delay..delay + signal.len()].to_vec(),
        signal.sample_rate,
    )
}

fn hann_symmetric(i: usize, n: usize) -> f64 {
    0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
}

fn hann_periodic(i: usize, n: usize) -> f64 {
    0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()
}

/// Single-channel magnitude STFT with a periodic Hann window. Frames cover
/// the whole signal; the tail frame is zero-padded.
pub fn stft(signal: &Waveform, window_size: usize, hop: usize) -> Result<Spectrogram> {
    if !window_size.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "window size must be a power of two, got {window_size}"
        )));
    }
    if hop == 0 || hop > window_size {
        return Err(Error::InvalidConfig(format!(
            "hop must lie in (0, window], got {hop}"
        )));
    }
    if signal.len() < window_size {
        return Err(Error::InvalidSignal(format!(
            "signal ({} samples) shorter than one window ({window_size})",
            signal.len()
        )));
    }
    let frames = (signal.len() - window_size).div_ceil(hop) + 1;
    let bins = window_size / 2 + 1;
    let window: Vec<f64> = (0..window_size)
        .map(|i| hann_periodic(i, window_size))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_size);
    let mut data = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); window_size];
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let s = signal.samples.get(start + i).copied().unwrap_or(0.0);
            *b = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (f, b) in buf.iter().take(bins).enumerate() {
            data[f * frames + t] = b.norm();
        }
    }
    Spectrogram::from_parts(
        data,
        1,
        bins,
        frames,
        window_size,
        hop,
        signal.sample_rate,
        None,
    )
}

/// Binaural feature extraction: per-channel STFT, log(1+magnitude), stacked
/// as 2 channels and tagged with the band's cutoff.
///
/// Values are quantized through f32 so the on-disk 32-bit artifact format
/// round-trips bit-exactly.
pub fn make_features(left: &Waveform, right: &Waveform, band: &BandLimit) -> Result<Spectrogram> {
    if left.len() != right.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", left.len()),
            actual: format!("{} samples", right.len()),
        });
    }
    if (left.sample_rate - right.sample_rate).abs() > 1e-9 {
        return Err(Error::SampleRateMismatch {
            left: left.sample_rate,
            right: right.sample_rate,
        });
    }
    if (left.sample_rate - 2.0 * band.nyquist_hz as f64).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "sample rate {} does not match band Nyquist {}",
            left.sample_rate, band.nyquist_hz
        )));
    }
    let sl = stft(left, STFT_WINDOW, STFT_HOP)?;
    let sr = stft(right, STFT_WINDOW, STFT_HOP)?;
    let mut data = Vec::with_capacity(2 * sl.data.len());
    for ch in [&sl, &sr] {
        data.extend(ch.data.iter().map(|&m| (m.ln_1p() as f32) as f64));
    }
    Spectrogram::from_parts(
        data,
        2,
        sl.bins,
        sl.frames,
        STFT_WINDOW,
        STFT_HOP,
        left.sample_rate,
        Some(CutoffTag::Band(band.cutoff_hz)),
    )
}

/// Measure how suppressed the band below `cutoff_hz` is, relative to the
/// band above it, averaged over all channels and frames.
///
/// A bin counts as "below" only if its full extent (center + half a bin
/// width) sits under 0.9·cutoff, so partial overlap with the transition
/// region is never scored as leakage; a bin counts as "above" if its center
/// exceeds the cutoff. Returns `None` when either side is empty (e.g. a
/// cutoff below one bin width), which makes the measurement vacuous.
pub fn band_separation_db(spec: &Spectrogram, cutoff_hz: u32) -> Option<BandSeparation> {
    let half_width = spec.sample_rate / spec.window_size as f64 / 2.0;
    let mut below = Vec::new();
    let mut above = Vec::new();
    for f in 0..spec.bins {
        let center = spec.bin_center_hz(f);
        if center + half_width < 0.9 * cutoff_hz as f64 {
            below.push(f);
        } else if center > cutoff_hz as f64 {
            above.push(f);
        }
    }
    if below.is_empty() || above.is_empty() {
        return None;
    }
    let stats = |bins: &[usize]| {
        let mut mag = 0.0;
        let mut energy = 0.0;
        let mut count = 0usize;
        for c in 0..spec.channels {
            for &f in bins {
                for t in 0..spec.frames {
                    let v = spec.get(c, f, t);
                    mag += v;
                    energy += v * v;
                    count += 1;
                }
            }
        }
        (mag / count as f64, energy / count as f64)
    };
    let (mb, eb) = stats(&below);
    let (ma, ea) = stats(&above);
    Some(BandSeparation {
        magnitude_db: 20.0 * (mb / ma).log10(),
        energy_db: 10.0 * (eb / ea).log10(),
        bins_below: below.len(),
        bins_above: above.len(),
    })
}

/// The eight §-protocol high-pass cutoffs, lowest to highest.
pub const PROTOCOL_CUTOFFS_HZ: [u32; 8] = [
    1, 15_000, 17_500, 19_000, 19_500, 20_000, 21_000, 22_000,
];

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 44_100.0;
    const NYQ: u32 = 22_050;

    fn default_chirp() -> Waveform {
        generate_chirp(&ChirpSpec::default()).unwrap()
    }

    fn tone(freq: f64, n: usize) -> Waveform {
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / FS).sin())
            .collect();
        Waveform::new(samples, FS).unwrap()
    }

    #[test]
    fn default_chirp_has_expected_length() {
        assert_eq!(default_chirp().len(), 2_205);
    }

    #[test]
    fn chirp_validates_bounds() {
        for bad in [
            ChirpSpec {
                f_end: 30_000.0,
                ..ChirpSpec::default()
            },
            ChirpSpec {
                f_start: 0.0,
                ..ChirpSpec::default()
            },
            ChirpSpec {
                f_start: 5_000.0,
                f_end: 4_000.0,
                ..ChirpSpec::default()
            },
        ] {
            assert!(generate_chirp(&bad).is_err());
        }
    }

    #[test]
    fn degenerate_sweep_behaves_as_pure_tone() {
        let spec = ChirpSpec {
            f_start: 11_025.0,
            f_end: 11_025.0 + 1e-6,
            duration: 0.05,
            sample_rate: FS,
            amplitude: 1.0,
        };
        let x = generate_chirp(&spec).unwrap();
        let s = stft(&x, STFT_WINDOW, STFT_HOP).unwrap();
        // 11,025 Hz = fs/4 lands exactly on bin 128.
        for t in 0..s.frames() {
            let peak = (0..s.bins())
                .max_by(|&a, &b| s.get(0, a, t).partial_cmp(&s.get(0, b, t)).unwrap())
                .unwrap();
            assert_eq!(peak, 128, "frame {t}");
        }
    }

    #[test]
    fn chirp_ridge_advances_monotonically() {
        let x = default_chirp();
        let s = stft(&x, STFT_WINDOW, STFT_HOP).unwrap();
        let ridge: Vec<usize> = (0..s.frames())
            .map(|t| {
                (0..s.bins())
                    .max_by(|&a, &b| s.get(0, a, t).partial_cmp(&s.get(0, b, t)).unwrap())
                    .unwrap()
            })
            .collect();
        for w in ridge.windows(2) {
            assert!(w[1] + 1 >= w[0], "ridge regressed: {ridge:?}");
        }
        assert!(ridge[s.frames() - 1] > ridge[0] + 100, "ridge {:?}", ridge);
    }

    #[test]
    fn zero_cutoff_returns_identity_kernel() {
        let band = BandLimit::new(0, NYQ).unwrap();
        let k = design_highpass(&band, FS).unwrap();
        assert_eq!(k.taps(), &[1.0]);
        let x = default_chirp();
        let y = apply_filter(&k, &x).unwrap();
        assert!(x.samples == y.samples, "identity filtering must be exact");
    }

    #[test]
    fn kernel_is_even_symmetric() {
        let band = BandLimit::new(20_000, NYQ).unwrap();
        let k = design_highpass(&band, FS).unwrap();
        let t = k.taps();
        assert_eq!(t.len(), FILTER_TAPS);
        for i in 0..t.len() / 2 {
            assert!(
                (t[i] - t[t.len() - 1 - i]).abs() < 1e-15,
                "asymmetry at tap {i}"
            );
        }
    }

    #[test]
    fn tone_probes_at_cutoff_20k() {
        let band = BandLimit::new(20_000, NYQ).unwrap();
        let k = design_highpass(&band, FS).unwrap();
        // FFT-magnitude probe on the steady-state middle section.
        let probe = |freq: f64| {
            let x = tone(freq, 8_192);
            let y = apply_filter(&k, &x).unwrap();
            let measure = |w: &Waveform| {
                let seg: Vec<f64> = w.samples[2_048..6_144]
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| s * hann_periodic(i, 4_096))
                    .collect();
                let mut planner = FftPlanner::<f64>::new();
                let fft = planner.plan_fft_forward(4_096);
                let mut buf: Vec<Complex<f64>> =
                    seg.iter().map(|&s| Complex::new(s, 0.0)).collect();
                fft.process(&mut buf);
                buf.iter().take(2_049).map(|c| c.norm()).fold(0.0, f64::max)
            };
            20.0 * (measure(&y) / measure(&x)).log10()
        };
        assert!(probe(15_000.0) <= -40.0, "15 kHz passes too much");
        assert!(probe(21_000.0).abs() <= 1.0, "21 kHz should pass cleanly");
    }

    #[test]
    fn designed_kernels_meet_attenuation_and_ripple() {
        // The 1 Hz cutoff is excluded: a 1023-tap kernel has a ~134 Hz
        // transition band, so a 0.9–1.1 Hz corner cannot be selective; that
        // cutoff exists as the "effectively unfiltered" protocol condition.
        for &cutoff in PROTOCOL_CUTOFFS_HZ.iter().filter(|&&c| c >= 15_000) {
            let band = BandLimit::new(cutoff, NYQ).unwrap();
            let k = design_highpass(&band, FS).unwrap();
            let att = 20.0 * k.response_at(0.9 * cutoff as f64).log10();
            assert!(att <= -60.0, "cutoff {cutoff}: only {att:.1} dB at 0.9fc");
            let pass_lo = 1.1 * cutoff as f64;
            if pass_lo < NYQ as f64 {
                let worst = (0..200)
                    .map(|i| {
                        let f = pass_lo + (NYQ as f64 * 0.999 - pass_lo) * i as f64 / 199.0;
                        (20.0 * k.response_at(f).log10()).abs()
                    })
                    .fold(0.0, f64::max);
                assert!(worst <= 1.0, "cutoff {cutoff}: ripple {worst:.3} dB");
            }
        }
    }

    #[test]
    fn apply_filter_matches_direct_convolution() {
        let band = BandLimit::new(19_500, NYQ).unwrap();
        let k = design_highpass(&band, FS).unwrap();
        let x = default_chirp();
        let y = apply_filter(&k, &x).unwrap();
        // Direct time-domain oracle with group-delay alignment.
        let m = (k.taps().len() - 1) / 2;
        let mut oracle = vec![0.0; x.len()];
        for (t, o) in oracle.iter_mut().enumerate() {
            let full_t = t + m;
            for (j, &tap) in k.taps().iter().enumerate() {
                if full_t >= j && full_t - j < x.len() {
                    *o += tap * x.samples[full_t - j];
                }
            }
        }
        let num: f64 = y
            .samples
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-10);
    }

    #[test]
    fn apply_filter_zero_signal_stays_zero() {
        let band = BandLimit::new(20_000, NYQ).unwrap();
        let k = design_highpass(&band, FS).unwrap();
        let x = Waveform::new(vec![0.0; 4_000], FS).unwrap();
        let y = apply_filter(&k, &x).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_filter_rejects_kernel_longer_than_signal() {
        let band = BandLimit::new(20_000, NYQ).unwrap();
        let k = design_highpass(&band, FS).unwrap();
        let x = Waveform::new(vec![1.0; 100], FS).unwrap();
        assert!(apply_filter(&k, &x).is_err());
    }

    #[test]
    fn stft_tone_peaks_at_analytic_bin() {
        let x = tone(11_025.0, 5_292);
        let s = stft(&x, STFT_WINDOW, STFT_HOP).unwrap();
        assert_eq!(s.bins(), 257);
        for t in 0..s.frames() {
            let peak = (0..s.bins())
                .max_by(|&a, &b| s.get(0, a, t).partial_cmp(&s.get(0, b, t)).unwrap())
                .unwrap();
            assert_eq!(peak, 128, "frame {t}");
        }
    }

    #[test]
    fn stft_zero_signal_is_all_zero() {
        let x = Waveform::new(vec![0.0; 1_024], FS).unwrap();
        let s = stft(&x, STFT_WINDOW, STFT_HOP).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_satisfies_parseval_per_frame() {
        let x = default_chirp();
        let s = stft(&x, STFT_WINDOW, STFT_HOP).unwrap();
        for t in 0..s.frames() {
            // One-sided spectrum: interior bins count twice.
            let mut spec_energy = 0.0;
            for f in 0..s.bins() {
                let w = if f == 0 || f == s.bins() - 1 { 1.0 } else { 2.0 };
                spec_energy += w * s.get(0, f, t) * s.get(0, f, t);
            }
            let mut frame_energy = 0.0;
            for i in 0..STFT_WINDOW {
                let v = x.samples.get(t * STFT_HOP + i).copied().unwrap_or(0.0)
                    * hann_periodic(i, STFT_WINDOW);
                frame_energy += v * v;
            }
            let expected = frame_energy * STFT_WINDOW as f64;
            if expected > 1e-12 {
                assert!(
                    (spec_energy - expected).abs() / expected < 1e-6,
                    "frame {t}: {spec_energy} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn stft_is_sign_invariant() {
        let x = default_chirp();
        let flipped =
            Waveform::new(x.samples.iter().map(|v| -v).collect(), x.sample_rate).unwrap();
        let a = stft(&x, STFT_WINDOW, STFT_HOP).unwrap();
        let b = stft(&flipped, STFT_WINDOW, STFT_HOP).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn stft_rejects_short_signals() {
        let x = Waveform::new(vec![0.0; 511], FS).unwrap();
        assert!(stft(&x, STFT_WINDOW, STFT_HOP).is_err());
    }

    #[test]
    fn features_have_contract_shape() {
        let n = (0.12f64 * FS).round() as usize;
        let x = tone(18_000.0, n);
        let band = BandLimit::new(19_500, NYQ).unwrap();
        let f = make_features(&x, &x, &band).unwrap();
        assert_eq!(
            (f.channels(), f.bins(), f.frames()),
            (2, 257, 39),
            "0.12 s at 44.1 kHz"
        );
        assert_eq!(f.cutoff_tag(), Some(CutoffTag::Band(19_500)));
    }

    #[test]
    fn identical_channels_give_identical_features() {
        let x = tone(15_000.0, 2_048);
        let band = BandLimit::new(0, NYQ).unwrap();
        let f = make_features(&x, &x, &band).unwrap();
        for bin in 0..f.bins() {
            for t in 0..f.frames() {
                assert_eq!(f.get(0, bin, t), f.get(1, bin, t));
            }
        }
    }

    #[test]
    fn zero_echoes_give_zero_features() {
        let x = Waveform::new(vec![0.0; 2_048], FS).unwrap();
        let band = BandLimit::new(0, NYQ).unwrap();
        let f = make_features(&x, &x, &band).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_deterministic() {
        let x = default_chirp();
        let band = BandLimit::new(20_000, NYQ).unwrap();
        let a = make_features(&x, &x, &band).unwrap();
        let b = make_features(&x, &x, &band).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn all_protocol_cutoffs_achieve_band_separation() {
        let x = default_chirp();
        for &cutoff in &PROTOCOL_CUTOFFS_HZ {
            let band = BandLimit::new(cutoff, NYQ).unwrap();
            let k = design_highpass(&band, FS).unwrap();
            let y = apply_filter(&k, &x).unwrap();
            let s = stft(&y, STFT_WINDOW, STFT_HOP).unwrap();
            match band_separation_db(&s, cutoff) {
                Some(sep) => {
                    assert!(
                        sep.energy_db <= -40.0,
                        "cutoff {cutoff}: energy only {:.2} dB down",
                        sep.energy_db
                    );
                    assert!(
                        sep.magnitude_db <= -40.0,
                        "cutoff {cutoff}: magnitude only {:.2} dB down",
                        sep.magnitude_db
                    );
                }
                None => assert_eq!(
                    cutoff, 1,
                    "only the 1 Hz cutoff lies below one bin extent"
                ),
            }
        }
    }

    #[test]
    fn mismatched_band_sample_rate_is_rejected() {
        let band = BandLimit::new(20_000, 24_000).unwrap();
        assert!(design_highpass(&band, FS).is_err());
    }
}
