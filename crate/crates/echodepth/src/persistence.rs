//! Dataset and artifact storage.
//!
//! A dataset directory is laid out as
//!
//! ```text
//! <root>/
//!   manifest.json        one per dataset, written last
//!   scenes/              per-scene room geometry (JSON)
//!   depths/              ground-truth depth maps (.bin + .pgm preview)
//!   features/            band-limited echo spectrograms (.bin)
//! ```
//!
//! Binary artifacts are content-addressed: the file stem is the first 16 hex
//! digits of the SHA-256 of the file's bytes, and the manifest records the
//! full digest for every referenced file. All multi-byte fields are
//! little-endian and every format begins with a 4-byte magic plus a `u32`
//! version; readers refuse versions they do not know.
//!
//! Feature file (`ECSP`, version 1), after the 8-byte preamble:
//! `u32 channels | u32 bins | u32 frames | u32 window | u32 hop |
//!  f64 sample_rate | u8 tag_kind (0 none, 1 band, 2 mixed) | u32 cutoff |
//!  u32 auxiliary | f32 data[channels·bins·frames]` (channel-major).
//!
//! Depth file (`ECDP`, version 1), after the preamble:
//! `u32 height | u32 width | f64 max_depth | f32 values[height·width]`
//! (row-major). A `.pgm` sibling holds a 16-bit ASCII preview.
//!
//! Checkpoint file (`ECKP`, version 1), after the preamble:
//! `u64 config_len | config JSON | u32 tensor_count |
//!  (u32 rank | u32 dims[rank] | f64 data[∏dims])* | sha256[32]`,
//! where the trailing digest covers every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::{synthesize_echo, DepthMap, RoomScene, Waveform, SPEED_OF_SOUND};
use crate::augment::EchoSample;
use crate::dsp::{
    apply_filter, design_highpass, generate_chirp, make_features, BandLimit, ChirpSpec,
    CutoffTag, Spectrogram,
};
use crate::error::{Error, Result};
use crate::network::{standard_normal, Network, NetworkConfig, Tensor};

const FORMAT_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 4] = b"ECSP";
const DEPTH_MAGIC: &[u8; 4] = b"ECDP";
const CHECKPOINT_MAGIC: &[u8; 4] = b"ECKP";

// ---------------------------------------------------------------------------
// Generation configuration
// ---------------------------------------------------------------------------

/// Randomization ranges for sampled shoebox scenes. Every `(lo, hi)` pair
/// draws uniformly from `[lo, hi)`; a degenerate pair (`lo == hi`) pins the
/// value. The receiver pair stands at a fixed height looking horizontally
/// along the sampled yaw; the source sits just above the pair's midpoint.
///
/// The default family is a corridor: a room whose facing-wall distance is
/// the only varying quantity, with the receiver rig pinned in place looking
/// straight down the +x axis. Small training sets generalize on this family
/// because the echo delay of the facing wall is the single latent factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub room_x_m: (f64, f64),
    pub room_y_m: (f64, f64),
    pub room_height_m: (f64, f64),
    pub wall_absorption: (f64, f64),
    /// Receiver-midpoint position range along x.
    pub mic_x_m: (f64, f64),
    /// Receiver-midpoint position range along y.
    pub mic_y_m: (f64, f64),
    pub mic_height_m: f64,
    /// View direction range in radians (0 looks along +x).
    pub yaw_rad: (f64, f64),
    /// Distance between the two receivers.
    pub mic_spacing_m: f64,
    /// Source height above the receiver midpoint.
    pub source_offset_m: f64,
    pub max_reflection_order: u32,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            room_x_m: (3.5, 6.5),
            room_y_m: (4.0, 4.0),
            room_height_m: (2.7, 2.7),
            wall_absorption: (0.4, 0.4),
            mic_x_m: (1.2, 1.2),
            mic_y_m: (2.0, 2.0),
            mic_height_m: 1.4,
            yaw_rad: (0.0, 0.0),
            mic_spacing_m: 0.2,
            source_offset_m: 0.12,
            max_reflection_order: 3,
        }
    }
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        for (label, (lo, hi)) in [
            ("room_x_m", self.room_x_m),
            ("room_y_m", self.room_y_m),
            ("room_height_m", self.room_height_m),
            ("wall_absorption", self.wall_absorption),
            ("mic_x_m", self.mic_x_m),
            ("mic_y_m", self.mic_y_m),
            ("yaw_rad", self.yaw_rad),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "range {label} = ({lo}, {hi}) is not an ordered finite pair"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.wall_absorption.0)
            || !(0.0..=1.0).contains(&self.wall_absorption.1)
        {
            return Err(Error::InvalidConfig(
                "wall absorption must lie in [0, 1]".into(),
            ));
        }
        // The rig (midpoint plus/minus half the spacing in any yaw) must fit
        // strictly inside even the smallest sampled room.
        let half = 0.5 * self.mic_spacing_m;
        if self.mic_x_m.0 - half <= 0.0
            || self.mic_x_m.1 + half >= self.room_x_m.0
            || self.mic_y_m.0 - half <= 0.0
            || self.mic_y_m.1 + half >= self.room_y_m.0
        {
            return Err(Error::InvalidConfig(
                "receiver positions can leave the room".into(),
            ));
        }
        if self.mic_height_m <= 0.0 || self.mic_height_m >= self.room_height_m.0 {
            return Err(Error::InvalidConfig(
                "mic height must lie strictly inside the room".into(),
            ));
        }
        if self.mic_height_m + self.source_offset_m >= self.room_height_m.0 {
            return Err(Error::InvalidConfig(
                "source sits above the ceiling".into(),
            ));
        }
        if !(self.mic_spacing_m > 0.0) {
            return Err(Error::InvalidConfig("mic spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Everything `build_dataset` needs; the manifest embeds a copy, so a dataset
/// is reproducible from its manifest alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub depth_resolution: (usize, usize),
    pub fov_deg: f64,
    pub max_depth_m: f64,
    pub record_duration_s: f64,
    pub chirp: ChirpSpec,
    /// High-pass cutoffs to featurize, strictly increasing.
    pub cutoffs_hz: Vec<u32>,
    /// Standard deviation of the additive measurement noise injected into
    /// each recorded echo channel before feature extraction.
    pub noise_std: f64,
    pub ranges: SceneRanges,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::InvalidConfig(
                "train and test scene counts must be positive".into(),
            ));
        }
        if self.depth_resolution.0 == 0 || self.depth_resolution.1 == 0 {
            return Err(Error::InvalidConfig(
                "depth resolution must be positive".into(),
            ));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidConfig(
                "field of view must lie in (0, 180) degrees".into(),
            ));
        }
        if !(self.max_depth_m > 0.0) || !(self.record_duration_s > 0.0) {
            return Err(Error::InvalidConfig(
                "max depth and record duration must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidConfig(
                "noise standard deviation must be finite and non-negative".into(),
            ));
        }
        self.chirp.validate()?;
        if self.cutoffs_hz.is_empty() {
            return Err(Error::InvalidConfig("no cutoffs requested".into()));
        }
        if !self.cutoffs_hz.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "cutoffs must be strictly increasing".into(),
            ));
        }
        let nyquist = (self.chirp.sample_rate / 2.0).round() as u32;
        if *self.cutoffs_hz.last().unwrap() >= nyquist {
            return Err(Error::InvalidConfig(format!(
                "cutoffs must lie below Nyquist ({nyquist} Hz)"
            )));
        }
        self.ranges.validate()
    }

    /// Digest of the DSP-relevant configuration (everything that shapes the
    /// stored features), used as the manifest's `dsp_config_hash`.
    pub fn dsp_config_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct DspView<'a> {
            chirp: &'a ChirpSpec,
            cutoffs_hz: &'a [u32],
            noise_std: f64,
            record_duration_s: f64,
            window: usize,
            hop: usize,
        }
        let view = DspView {
            chirp: &self.chirp,
            cutoffs_hz: &self.cutoffs_hz,
            noise_std: self.noise_std,
            record_duration_s: self.record_duration_s,
            window: crate::dsp::STFT_WINDOW,
            hop: crate::dsp::STFT_HOP,
        };
        Ok(sha256_hex(&serde_json::to_vec(&view)?))
    }

    /// Dataset identity: digest of the full generation config.
    pub fn dataset_id(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?)[..16].to_string())
    }
}

/// Draw one scene. Draw order (room x, room y, room height, mic x, mic y,
/// yaw, absorption) is part of the format: changing it changes every dataset
/// built from a given seed.
pub fn sample_scene<R: rand::Rng>(rng: &mut R, r: &SceneRanges) -> Result<RoomScene> {
    let span = |(lo, hi): (f64, f64), rng: &mut R| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let lx = span(r.room_x_m, rng);
    let ly = span(r.room_y_m, rng);
    let lz = span(r.room_height_m, rng);
    let mx = span(r.mic_x_m, rng);
    let my = span(r.mic_y_m, rng);
    let yaw = span(r.yaw_rad, rng);
    let absorption = span(r.wall_absorption, rng);

    let mid = [mx, my, r.mic_height_m];
    let view = [yaw.cos(), yaw.sin(), 0.0];
    let right = [yaw.sin(), -yaw.cos(), 0.0];
    let half = 0.5 * r.mic_spacing_m;
    let scene = RoomScene {
        dimensions: [lx, ly, lz],
        source_position: [mid[0], mid[1], mid[2] + r.source_offset_m],
        receiver_positions: vec![
            [mid[0] + half * right[0], mid[1] + half * right[1], mid[2]],
            [mid[0] - half * right[0], mid[1] - half * right[1], mid[2]],
        ],
        receiver_orientation: view,
        absorption: [absorption; 6],
        speed_of_sound: SPEED_OF_SOUND,
        max_reflection_order: r.max_reflection_order,
    };
    scene.validate()?;
    Ok(scene)
}

/// Add white Gaussian measurement noise (per-sample i.i.d.) to a waveform,
/// reproducibly from `seed`.
pub fn add_measurement_noise(signal: &Waveform, noise_std: f64, seed: u64) -> Result<Waveform> {
    if noise_std == 0.0 {
        return Ok(signal.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = signal
        .samples
        .iter()
        .map(|&s| s + noise_std * standard_normal(&mut rng))
        .collect();
    Waveform::new(samples, signal.sample_rate)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-scene seed derived from the dataset seed and the scene index.
pub fn scene_seed(dataset_seed: u64, scene_index: usize) -> u64 {
    let mut s = dataset_seed ^ 0xD6E8_FEB8_6659_FD93;
    let a = splitmix64(&mut s);
    let mut t = s ^ scene_index as u64;
    a ^ splitmix64(&mut t)
}

/// Noise-stream seed for one (scene, cutoff) pair. The left channel draws
/// first, then the right, from a single stream.
pub fn cutoff_noise_seed(scene_seed: u64, cutoff_hz: u32) -> u64 {
    let mut s = scene_seed ^ u64::from(cutoff_hz).wrapping_mul(0xA076_1D64_78BD_642F);
    splitmix64(&mut s)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// A file referenced by the manifest: path relative to the dataset root plus
/// the full SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub split: SplitTag,
    /// Per-scene seed; noise streams derive from it via `cutoff_noise_seed`.
    pub seed: u64,
    pub scene_file: FileRef,
    pub depth_file: FileRef,
    pub depth_preview: FileRef,
    /// Feature artifacts keyed by cutoff frequency.
    pub features: BTreeMap<u32, FileRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub tool: String,
    pub dsp_config_hash: String,
    pub generation: GenerationConfig,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    /// Structural invariants: version, unique scene ids, disjoint splits,
    /// and every entry carrying all configured cutoffs.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut split_of: BTreeMap<&str, SplitTag> = BTreeMap::new();
        for e in &self.scenes {
            if let Some(prev) = split_of.insert(e.scene_id.as_str(), e.split) {
                return Err(Error::InvalidConfig(if prev == e.split {
                    format!("duplicate scene id {}", e.scene_id)
                } else {
                    format!("scene {} appears in both splits", e.scene_id)
                }));
            }
            for &cutoff in &self.generation.cutoffs_hz {
                if !e.features.contains_key(&cutoff) {
                    return Err(Error::MissingEntry(format!(
                        "scene {} lacks features at {cutoff} Hz",
                        e.scene_id
                    )));
                }
            }
        }
        let train = self.split_ids(SplitTag::Train).len();
        let test = self.split_ids(SplitTag::Test).len();
        if train != self.generation.train_scenes || test != self.generation.test_scenes {
            return Err(Error::InvalidConfig(format!(
                "manifest has {train} train / {test} test scenes, config says {} / {}",
                self.generation.train_scenes, self.generation.test_scenes
            )));
        }
        Ok(())
    }

    pub fn split_ids(&self, split: SplitTag) -> Vec<&str> {
        self.scenes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.scene_id.as_str())
            .collect()
    }

    pub fn entry(&self, scene_id: &str) -> Result<&SceneEntry> {
        self.scenes
            .iter()
            .find(|e| e.scene_id == scene_id)
            .ok_or_else(|| Error::MissingEntry(format!("scene {scene_id}")))
    }

    /// Re-hash every referenced file and compare against the recorded
    /// digests.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for e in &self.scenes {
            for f in e.file_refs() {
                let bytes = read_file(root, &f.path)?;
                let actual = sha256_hex(&bytes);
                if actual != f.sha256 {
                    return Err(Error::HashMismatch {
                        path: f.path.clone(),
                        expected: f.sha256.clone(),
                        actual,
                    });
                }
            }
        }
        Ok(())
    }
}

impl SceneEntry {
    fn file_refs(&self) -> impl Iterator<Item = &FileRef> {
        [&self.scene_file, &self.depth_file, &self.depth_preview]
            .into_iter()
            .chain(self.features.values())
    }
}

// ---------------------------------------------------------------------------
// Dataset build
// ---------------------------------------------------------------------------

/// Synthesize the echo of `chirp_filtered` in `scene`, add frozen measurement
/// noise, and extract features. This is the exact per-(scene, cutoff)
/// pipeline `build_dataset` runs, exposed so artifacts can be independently
/// reproduced from a manifest.
pub fn scene_features(
    scene: &RoomScene,
    chirp_filtered: &Waveform,
    band: &BandLimit,
    duration_s: f64,
    noise_std: f64,
    scene_seed: u64,
) -> Result<Spectrogram> {
    let (left, right) = synthesize_echo(scene, chirp_filtered, duration_s)?;
    let noise_seed = cutoff_noise_seed(scene_seed, band.cutoff_hz);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noisy = |w: &Waveform, rng: &mut ChaCha8Rng| -> Result<Waveform> {
        if noise_std == 0.0 {
            return Ok(w.clone());
        }
        let samples = w
            .samples
            .iter()
            .map(|&s| s + noise_std * standard_normal(rng))
            .collect();
        Waveform::new(samples, w.sample_rate)
    };
    let left = noisy(&left, &mut rng)?;
    let right = noisy(&right, &mut rng)?;
    make_features(&left, &right, band)
}

/// Build a complete dataset under `root`. Deterministic given the config:
/// the same config yields byte-identical trees. Existing conflicting files
/// are an error, never silently overwritten.
pub fn build_dataset(root: &Path, config: &GenerationConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        return Err(Error::PathCollision(manifest_path.display().to_string()));
    }
    fs::create_dir_all(root.join("scenes"))?;
    fs::create_dir_all(root.join("depths"))?;
    fs::create_dir_all(root.join("features"))?;

    let chirp = generate_chirp(&config.chirp)?;
    let nyquist = (config.chirp.sample_rate / 2.0).round() as u32;
    let mut filtered = BTreeMap::new();
    for &cutoff in &config.cutoffs_hz {
        let band = BandLimit::new(cutoff, nyquist)?;
        let kernel = design_highpass(&band, config.chirp.sample_rate)?;
        filtered.insert(cutoff, (band, apply_filter(&kernel, &chirp)?));
    }

    let total = config.train_scenes + config.test_scenes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let scene = sample_scene(&mut rng, &config.ranges)?;
        let scene_id = format!("scene_{i:04}");
        let split = if i < config.train_scenes {
            SplitTag::Train
        } else {
            SplitTag::Test
        };
        let seed = scene_seed(config.seed, i);

        let scene_json = serde_json::to_vec_pretty(&scene)?;
        let scene_rel = format!("scenes/{scene_id}.json");
        write_new(root, &scene_rel, &scene_json)?;

        let depth = crate::acoustics::render_depth(
            &scene,
            config.depth_resolution,
            config.fov_deg,
            config.max_depth_m,
        )?;
        let depth_bytes = encode_depth(&depth);
        let depth_rel = format!("depths/{}.bin", content_stem(&depth_bytes));
        write_content(root, &depth_rel, &depth_bytes)?;
        let pgm_bytes = encode_depth_pgm(&depth);
        let pgm_rel = format!("depths/{}.pgm", content_stem(&depth_bytes));
        write_content(root, &pgm_rel, &pgm_bytes)?;

        let mut features = BTreeMap::new();
        for (&cutoff, (band, source)) in &filtered {
            let spec = scene_features(
                &scene,
                source,
                band,
                config.record_duration_s,
                config.noise_std,
                seed,
            )?;
            let bytes = encode_features(&spec);
            let rel = format!("features/{}.bin", content_stem(&bytes));
            write_content(root, &rel, &bytes)?;
            features.insert(
                cutoff,
                FileRef {
                    path: rel,
                    sha256: sha256_hex(&bytes),
                },
            );
        }

        entries.push(SceneEntry {
            scene_id,
            split,
            seed,
            scene_file: FileRef {
                path: scene_rel,
                sha256: sha256_hex(&scene_json),
            },
            depth_file: FileRef {
                path: depth_rel,
                sha256: sha256_hex(&depth_bytes),
            },
            depth_preview: FileRef {
                path: pgm_rel,
                sha256: sha256_hex(&pgm_bytes),
            },
            features,
        });
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        dataset_id: config.dataset_id()?,
        tool: format!("echodepth {}", env!("CARGO_PKG_VERSION")),
        dsp_config_hash: config.dsp_config_hash()?,
        generation: config.clone(),
        scenes: entries,
    };
    manifest.validate()?;
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    write_new(root, "manifest.json", &manifest_bytes)?;
    manifest.verify(root)?;
    Ok(manifest)
}

/// Load and structurally validate a dataset manifest.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let bytes = read_file(root, "manifest.json")?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Load one (scene, cutoff) sample, verifying content hashes on the way.
pub fn load_sample(root: &Path, manifest: &DatasetManifest, scene_id: &str, cutoff_hz: u32) -> Result<EchoSample> {
    let entry = manifest.entry(scene_id)?;
    let feature_ref = entry.features.get(&cutoff_hz).ok_or_else(|| {
        Error::MissingEntry(format!("scene {scene_id} has no features at {cutoff_hz} Hz"))
    })?;
    let features = decode_features(&read_verified(root, feature_ref)?)?;
    let depth = decode_depth(&read_verified(root, &entry.depth_file)?)?;
    Ok(EchoSample {
        features,
        depth,
        scene_id: scene_id.to_string(),
    })
}

/// Load the room geometry stored for one scene.
pub fn load_scene(root: &Path, manifest: &DatasetManifest, scene_id: &str) -> Result<RoomScene> {
    let entry = manifest.entry(scene_id)?;
    let bytes = read_verified(root, &entry.scene_file)?;
    Ok(serde_json::from_slice(&bytes)?)
}

// ---------------------------------------------------------------------------
// Binary encodings
// ---------------------------------------------------------------------------

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_preamble(c: &mut Cursor, magic: &[u8; 4]) -> Result<()> {
    if c.take(4)? != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {:?}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

/// Serialize a spectrogram as an `ECSP` feature file.
pub fn encode_features(spec: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(45 + 4 * spec.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [
        spec.channels(),
        spec.bins(),
        spec.frames(),
        spec.window_size(),
        spec.hop(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&spec.sample_rate().to_le_bytes());
    let (kind, a, b) = match spec.cutoff_tag() {
        None => (0u8, 0u32, 0u32),
        Some(CutoffTag::Band(hz)) => (1, hz, 0),
        Some(CutoffTag::Mixed {
            ultrasonic,
            auxiliary,
        }) => (2, ultrasonic, auxiliary),
    };
    out.push(kind);
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    for &v in spec.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parse an `ECSP` feature file.
pub fn decode_features(bytes: &[u8]) -> Result<Spectrogram> {
    let mut c = Cursor::new(bytes);
    check_preamble(&mut c, FEATURE_MAGIC)?;
    let channels = c.u32()? as usize;
    let bins = c.u32()? as usize;
    let frames = c.u32()? as usize;
    let window = c.u32()? as usize;
    let hop = c.u32()? as usize;
    let sample_rate = c.f64()?;
    let kind = c.u8()?;
    let a = c.u32()?;
    let b = c.u32()?;
    let tag = match kind {
        0 => None,
        1 => Some(CutoffTag::Band(a)),
        2 => Some(CutoffTag::Mixed {
            ultrasonic: a,
            auxiliary: b,
        }),
        other => return Err(Error::Format(format!("unknown tag kind {other}"))),
    };
    let data = c.f32_vec(channels * bins * frames)?;
    c.finish()?;
    Spectrogram::from_parts(data, channels, bins, frames, window, hop, sample_rate, tag)
}

/// Serialize a depth map as an `ECDP` file.
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * depth.values().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    out.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    out.extend_from_slice(&depth.max_depth().to_le_bytes());
    for &v in depth.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parse an `ECDP` file.
pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let mut c = Cursor::new(bytes);
    check_preamble(&mut c, DEPTH_MAGIC)?;
    let height = c.u32()? as usize;
    let width = c.u32()? as usize;
    let max_depth = c.f64()?;
    let values = c.f32_vec(height * width)?;
    c.finish()?;
    DepthMap::new(values, height, width, max_depth)
}

/// 16-bit ASCII PGM preview of a depth map (near = dark).
pub fn encode_depth_pgm(depth: &DepthMap) -> Vec<u8> {
    let mut s = format!("P2\n{} {}\n65535\n", depth.width(), depth.height());
    for row in 0..depth.height() {
        let line: Vec<String> = (0..depth.width())
            .map(|col| {
                let v = depth.get(row, col) / depth.max_depth();
                format!("{}", (v.clamp(0.0, 1.0) * 65535.0).round() as u32)
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s.into_bytes()
}

/// Serialize a trained network as an `ECKP` checkpoint.
pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let config_json = serde_json::to_vec(&net.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for t in &net.params {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parse and integrity-check an `ECKP` checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 32 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    let actual = Sha256::digest(payload);
    if actual.as_slice() != digest {
        return Err(Error::HashMismatch {
            path: "checkpoint".into(),
            expected: hex(digest),
            actual: hex(&actual),
        });
    }
    let mut c = Cursor::new(payload);
    check_preamble(&mut c, CHECKPOINT_MAGIC)?;
    let config_len = c.u64()? as usize;
    let config: NetworkConfig = serde_json::from_slice(c.take(config_len)?)?;
    config.validate()?;
    let count = c.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len = shape.iter().product();
        params.push(Tensor::new(shape, c.f64_vec(len)?)?);
    }
    c.finish()?;
    let net = Network { config, params };
    check_params_match_config(&net)?;
    Ok(net)
}

fn check_params_match_config(net: &Network) -> Result<()> {
    let template = Network::init(net.config.clone(), 0)?;
    if template.params.len() != net.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config implies {}",
            net.params.len(),
            template.params.len()
        )));
    }
    for (a, b) in net.params.iter().zip(&template.params) {
        if a.shape != b.shape {
            return Err(Error::Format(format!(
                "checkpoint tensor shape {:?} does not match config shape {:?}",
                a.shape, b.shape
            )));
        }
    }
    Ok(())
}

/// Write a checkpoint file (collision → error).
pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    if path.exists() {
        return Err(Error::PathCollision(path.display().to_string()));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(net)?)?;
    Ok(())
}

/// Read and verify a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn content_stem(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}

fn read_file(root: &Path, rel: &str) -> Result<Vec<u8>> {
    let path = root.join(rel);
    fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingEntry(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_verified(root: &Path, fref: &FileRef) -> Result<Vec<u8>> {
    let bytes = read_file(root, &fref.path)?;
    let actual = sha256_hex(&bytes);
    if actual != fref.sha256 {
        return Err(Error::HashMismatch {
            path: fref.path.clone(),
            expected: fref.sha256.clone(),
            actual,
        });
    }
    Ok(bytes)
}

/// Write a name-addressed file; any existing file at the path is an error.
fn write_new(root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = root.join(rel);
    if path.exists() {
        return Err(Error::PathCollision(path.display().to_string()));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write a content-addressed file. A pre-existing file with identical bytes
/// is the same object (deduplicated); different bytes are a collision error.
fn write_content(root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = root.join(rel);
    if path.exists() {
        if fs::read(&path)? == bytes {
            return Ok(());
        }
        return Err(Error::PathCollision(path.display().to_string()));
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// The canonical dataset path for a config under a base directory.
pub fn dataset_root(base: &Path, config: &GenerationConfig) -> Result<PathBuf> {
    Ok(base.join(config.dataset_id()?))
}
