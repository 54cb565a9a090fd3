//! Shoebox acoustics: image-source impulse responses, echo synthesis by
//! convolution, and ray-cast ground-truth depth maps.
//!
//! Rooms are axis-aligned boxes with per-wall absorption. Reflections are
//! modeled with the image-source method: each virtual source contributes a
//! single impulse with amplitude `prod_w (1 - alpha_w)^hits_w / (4 pi d)`,
//! placed at the nearest sample to its travel time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of sound in air at room temperature, m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Default depth clamp for rendered ground truth, meters.
pub const DEFAULT_MAX_DEPTH_M: f64 = 10.0;

/// Axis-aligned shoebox room with a source and a binaural receiver pair.
///
/// Wall order for `absorption`: x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoomScene {
    pub dimensions: [f64; 3],
    pub source_position: [f64; 3],
    pub receiver_positions: Vec<[f64; 3]>,
    /// View direction used for depth rendering. Must be non-zero.
    pub receiver_orientation: [f64; 3],
    pub absorption: [f64; 6],
    pub speed_of_sound: f64,
    pub max_reflection_order: u32,
}

impl RoomScene {
    /// Check all structural invariants, returning the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidScene(format!(
                "dimensions must be positive and finite, got {:?}",
                self.dimensions
            )));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidScene(format!(
                "speed of sound must be positive, got {}",
                self.speed_of_sound
            )));
        }
        if self.receiver_positions.len() != 2 {
            return Err(Error::InvalidScene(format!(
                "expected a binaural receiver pair, got {} receivers",
                self.receiver_positions.len()
            )));
        }
        for (label, p) in std::iter::once(("source", &self.source_position))
            .chain(self.receiver_positions.iter().map(|p| ("receiver", p)))
        {
            if !inside_box(p, &self.dimensions) {
                return Err(Error::InvalidScene(format!(
                    "{label} position {p:?} is not strictly inside the box {:?}",
                    self.dimensions
                )));
            }
        }
        let sep = distance(&self.receiver_positions[0], &self.receiver_positions[1]);
        if !(sep > 0.0) {
            return Err(Error::InvalidScene(
                "receiver pair separation must be > 0".into(),
            ));
        }
        if self.absorption.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::InvalidScene(format!(
                "absorption values must lie in [0, 1], got {:?}",
                self.absorption
            )));
        }
        Ok(())
    }

    /// Midpoint of the binaural pair; the depth camera sits here.
    pub fn receiver_midpoint(&self) -> [f64; 3] {
        let a = self.receiver_positions[0];
        let b = self.receiver_positions[1];
        [
            0.5 * (a[0] + b[0]),
            0.5 * (a[1] + b[1]),
            0.5 * (a[2] + b[2]),
        ]
    }
}

/// Room impulse response at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

/// Uniformly sampled real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate > 0.0) {
            return Err(Error::InvalidSignal(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform sample".into()));
        }
        Ok(Self {
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
}

/// H x W grid of metric depths, clamped to `max_depth`.
///
/// Values are quantized through f32 so that rendered maps round-trip the
/// 32-bit artifact format bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
    max_depth: f64,
}

impl DepthMap {
    /// Values are quantized through f32 so the 32-bit on-disk depth format
    /// round-trips bit-exactly.
    pub fn new(values: Vec<f64>, height: usize, width: usize, max_depth: f64) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidConfig(
                "depth map dimensions must be positive".into(),
            ));
        }
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}"),
                actual: format!("{} values", values.len()),
            });
        }
        let values: Vec<f64> = values.into_iter().map(|v| (v as f32) as f64).collect();
        if values.iter().any(|&v| !(0.0..=max_depth).contains(&v)) {
            return Err(Error::InvalidSignal(format!(
                "depth values must lie in [0, {max_depth}]"
            )));
        }
        Ok(Self {
            values,
            height,
            width,
            max_depth,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_depth(&self) -> f64 {
        self.max_depth
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn inside_box(p: &[f64; 3], dims: &[f64; 3]) -> bool {
    (0..3).all(|i| p[i] > 0.0 && p[i] < dims[i] && p[i].is_finite())
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Simulate the room impulse response between `source` and `receiver` with
/// the image-source method, up to the scene's `max_reflection_order` total
/// wall hits. Each image contributes one impulse at the nearest sample to
/// its travel time; images arriving after `duration` are outside the
/// observation window and are dropped.
pub fn simulate_rir(
    scene: &RoomScene,
    source: &[f64; 3],
    receiver: &[f64; 3],
    sample_rate: f64,
    duration: f64,
) -> Result<ImpulseResponse> {
    scene.validate()?;
    if !(sample_rate > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidConfig(
            "sample rate and duration must be positive".into(),
        ));
    }
    for (label, p) in [("source", source), ("receiver", receiver)] {
        if !inside_box(p, &scene.dimensions) {
            return Err(Error::InvalidScene(format!(
                "{label} position {p:?} is not strictly inside the box"
            )));
        }
    }
    let d_direct = distance(source, receiver);
    if d_direct <= 0.0 {
        return Err(Error::InvalidScene(
            "receiver coincides with source (zero path length)".into(),
        ));
    }
    let n = (duration * sample_rate).round() as usize;
    let c = scene.speed_of_sound;
    let direct_idx = (d_direct / c * sample_rate).round() as usize;
    if direct_idx >= n {
        return Err(Error::InvalidConfig(format!(
            "duration {duration} s does not cover the direct path ({} s)",
            d_direct / c
        )));
    }

    let mut h = vec![0.0; n];
    let order = scene.max_reflection_order as i64;
    let [lx, ly, lz] = scene.dimensions;
    let reflectance: Vec<f64> = scene.absorption.iter().map(|a| 1.0 - a).collect();

    for nx in -order..=order {
        for px in 0..2i64 {
            let rx = (nx - px).unsigned_abs() + nx.unsigned_abs();
            if rx as i64 > order {
                continue;
            }
            let ix = (1 - 2 * px) as f64 * source[0] + 2.0 * nx as f64 * lx;
            for ny in -order..=order {
                for py in 0..2i64 {
                    let ry = (ny - py).unsigned_abs() + ny.unsigned_abs();
                    if (rx + ry) as i64 > order {
                        continue;
                    }
                    let iy = (1 - 2 * py) as f64 * source[1] + 2.0 * ny as f64 * ly;
                    for nz in -order..=order {
                        for pz in 0..2i64 {
                            let rz = (nz - pz).unsigned_abs() + nz.unsigned_abs();
                            if (rx + ry + rz) as i64 > order {
                                continue;
                            }
                            let iz = (1 - 2 * pz) as f64 * source[2] + 2.0 * nz as f64 * lz;
                            let d = distance(&[ix, iy, iz], receiver);
                            let idx = (d / c * sample_rate).round() as usize;
                            if idx >= n {
                                continue;
                            }
                            let hits = [
                                (nx - px).unsigned_abs(),
                                nx.unsigned_abs(),
                                (ny - py).unsigned_abs(),
                                ny.unsigned_abs(),
                                (nz - pz).unsigned_abs(),
                                nz.unsigned_abs(),
                            ];
                            let mut amp = 1.0 / (4.0 * std::f64::consts::PI * d);
                            for (w, &hit) in hits.iter().enumerate() {
                                amp *= reflectance[w].powi(hit as i32);
                            }
                            h[idx] += amp;
                        }
                    }
                }
            }
        }
    }

    Ok(ImpulseResponse {
        samples: h,
        sample_rate,
    })
}

/// Echo synthesis: linear convolution of the impulse response with the
/// source signal, truncated or zero-padded to `record_samples`.
///
/// Computed in the frequency domain; semantics are
/// `y[t] = sum_{k=0}^{t} h[t-k] x[k]`.
pub fn convolve(
    rir: &ImpulseResponse,
    source_signal: &Waveform,
    record_samples: usize,
) -> Result<Waveform> {
    if (rir.sample_rate - source_signal.sample_rate).abs() > 1e-9 {
        return Err(Error::SampleRateMismatch {
            left: rir.sample_rate,
            right: source_signal.sample_rate,
        });
    }
    let full = fft_convolve(&rir.samples, &source_signal.samples);
    let mut out = vec![0.0; record_samples];
    let m = record_samples.min(full.len());
    out[..m].copy_from_slice(&full[..m]);
    Waveform::new(out, source_signal.sample_rate)
}

/// Full linear convolution via FFT. Empty inputs yield an empty output.
pub(crate) fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    use rustfft::{num_complex::Complex, FftPlanner};

    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);

    let mut fa: Vec<Complex<f64>> = a
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut fb: Vec<Complex<f64>> = b
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= *y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / size as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Render the ground-truth depth map seen from the receiver midpoint along
/// `receiver_orientation`, by intersecting pinhole camera rays with the six
/// box planes. `fov_deg` is the horizontal field of view.
pub fn render_depth(
    scene: &RoomScene,
    resolution: (usize, usize),
    fov_deg: f64,
    max_depth: f64,
) -> Result<DepthMap> {
    scene.validate()?;
    let (height, width) = resolution;
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig(
            "depth resolution must be positive".into(),
        ));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::InvalidConfig(format!(
            "field of view must lie in (0, 180) degrees, got {fov_deg}"
        )));
    }
    if !(max_depth > 0.0) {
        return Err(Error::InvalidConfig("max depth must be positive".into()));
    }
    let view = normalize(&scene.receiver_orientation).ok_or_else(|| {
        Error::InvalidScene("degenerate receiver orientation (zero vector)".into())
    })?;
    let origin = scene.receiver_midpoint();

    // Camera basis: world-z up unless the view is near-vertical.
    let up_hint = if view[2].abs() > 0.9999 {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let right = normalize(&cross(&view, &up_hint)).expect("up hint is not collinear with view");
    let cam_up = cross(&right, &view);

    let half_u = (fov_deg.to_radians() / 2.0).tan();
    let half_v = half_u * height as f64 / width as f64;

    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        let v = -((((i as f64 + 0.5) / height as f64) * 2.0 - 1.0) * half_v);
        for j in 0..width {
            let u = (((j as f64 + 0.5) / width as f64) * 2.0 - 1.0) * half_u;
            let dir = [
                view[0] + u * right[0] + v * cam_up[0],
                view[1] + u * right[1] + v * cam_up[1],
                view[2] + u * right[2] + v * cam_up[2],
            ];
            let dir = normalize(&dir).expect("ray direction is non-zero");
            let t = box_exit_distance(&origin, &dir, &scene.dimensions);
            values.push((t.min(max_depth) as f32) as f64);
        }
    }
    DepthMap::new(values, height, width, max_depth)
}

/// Distance along a unit ray from a point strictly inside the box to the
/// first (and only) face it exits through.
fn box_exit_distance(origin: &[f64; 3], dir: &[f64; 3], dims: &[f64; 3]) -> f64 {
    let mut t_exit = f64::INFINITY;
    for ax in 0..3 {
        if dir[ax].abs() < 1e-15 {
            continue;
        }
        let t0 = (0.0 - origin[ax]) / dir[ax];
        let t1 = (dims[ax] - origin[ax]) / dir[ax];
        let t_far = t0.max(t1);
        t_exit = t_exit.min(t_far);
    }
    t_exit
}

fn normalize(v: &[f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 || !n.is_finite() {
        None
    } else {
        Some([v[0] / n, v[1] / n, v[2] / n])
    }
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Synthesize the binaural echo pair observed by the scene's receivers when
/// the source emits `source_signal`. Both channels have length
/// `round(duration * sample_rate)`.
pub fn synthesize_echo(
    scene: &RoomScene,
    source_signal: &Waveform,
    duration: f64,
) -> Result<(Waveform, Waveform)> {
    scene.validate()?;
    let fs = source_signal.sample_rate;
    let record = (duration * fs).round() as usize;
    let mut out = Vec::with_capacity(2);
    for receiver in &scene.receiver_positions {
        let rir = simulate_rir(scene, &scene.source_position, receiver, fs, duration)?;
        out.push(convolve(&rir, source_signal, record)?);
    }
    let right = out.pop().expect("two receivers");
    let left = out.pop().expect("two receivers");
    Ok((left, right))
}
