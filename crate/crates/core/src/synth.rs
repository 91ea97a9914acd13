//! Seeded synthetic fixtures.
//!
//! ID samples get a weak uniform background in every channel plus one strong
//! spike at a random position; OOD samples get a stronger uniform background
//! and no spike, with the background bound chosen so that per-channel means
//! agree with ID in expectation. Pooled means therefore cannot tell the two
//! apart while the within-channel max/mean ratio can. Logits for both groups
//! come from the same distribution, so logit-based scores are near chance.
//!
//! # Random stream
//!
//! All randomness comes from one SplitMix64 generator seeded with
//! `cfg.seed` (state = seed; output = the standard SplitMix64 mix of
//! `state += 0x9e3779b97f4a7c15`). Derived draws:
//!
//! * `uniform()  = (next_u64() >> 11) · 2⁻⁵³`, in [0, 1)
//! * `normal()   = sqrt(-2 ln(1 - u1)) · cos(2π u2)`, one Box-Muller draw
//!   from two fresh uniforms, nothing cached
//! * `index(n)   = floor(uniform() · n)`
//!
//! Draw order: head weights (K×C row-major, `normal() / sqrt(C)`), head bias
//! (K, `0.1 · normal()`), then each ID sample, then each OOD sample. Per
//! sample: for each channel its H·W background values (`uniform() · bound`),
//! and for ID the spike position `index(H·W)` and magnitude
//! `max(0, spike_mean + spike_sd · normal())` added to that cell; then K
//! logits `normal()` and the bumped class `index(K)` which gains
//! [`LOGIT_BUMP`]. Values are rounded to f32 only when stored.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::tensor_io::{write_tensor, HeadRef, Label, Manifest, ManifestEntry, Tensor, DEFAULT_LAYER};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "synth.manifest.json";
pub const LOGIT_BUMP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_id: usize,
    pub n_ood: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub spike_mean: f64,
    pub spike_sd: f64,
    pub noise_hi_id: f64,
    /// `None` picks the bound that matches ID channel means in expectation.
    pub noise_hi_ood: Option<f64>,
    pub seed: u64,
    pub k_classes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_id: 500,
            n_ood: 500,
            channels: 64,
            height: 8,
            width: 8,
            spike_mean: 8.0,
            spike_sd: 1.0,
            noise_hi_id: 0.2,
            noise_hi_ood: None,
            seed: 42,
            k_classes: 10,
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

impl SynthConfig {
    /// Expected magnitude of a spike after clamping at zero.
    pub fn expected_spike(&self) -> f64 {
        if self.spike_sd == 0.0 {
            return self.spike_mean.max(0.0);
        }
        let z = self.spike_mean / self.spike_sd;
        self.spike_mean * std_normal_cdf(z) + self.spike_sd * std_normal_pdf(z)
    }

    /// Expected channel mean of an ID sample.
    pub fn expected_id_channel_mean(&self) -> f64 {
        self.noise_hi_id / 2.0 + self.expected_spike() / (self.height * self.width) as f64
    }

    pub fn resolved_noise_hi_ood(&self) -> f64 {
        self.noise_hi_ood
            .unwrap_or_else(|| 2.0 * self.expected_id_channel_mean())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_id", self.n_id),
            ("n_ood", self.n_ood),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if self.k_classes < 2 {
            return Err(Error::InvalidArgument("k_classes must be >= 2".into()));
        }
        let ood = self.resolved_noise_hi_ood();
        if !(self.noise_hi_id > 0.0) || !(ood > 0.0) {
            return Err(Error::InvalidArgument("noise bounds must be > 0".into()));
        }
        if !(self.spike_sd >= 0.0) || !self.spike_mean.is_finite() {
            return Err(Error::InvalidArgument("spike parameters must be finite, sd >= 0".into()));
        }
        if !(self.spike_mean > ood) {
            return Err(Error::InvalidArgument(format!(
                "spike_mean {} must exceed the OOD noise bound {ood}",
                self.spike_mean
            )));
        }
        Ok(())
    }

    fn meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("generator".into(), "synth".into());
        m.insert("rng".into(), "splitmix64".into());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("n_id".into(), self.n_id.to_string());
        m.insert("n_ood".into(), self.n_ood.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("height".into(), self.height.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("k_classes".into(), self.k_classes.to_string());
        m.insert("spike_mean".into(), self.spike_mean.to_string());
        m.insert("spike_sd".into(), self.spike_sd.to_string());
        m.insert("noise_hi_id".into(), self.noise_hi_id.to_string());
        m.insert("noise_hi_ood".into(), self.resolved_noise_hi_ood().to_string());
        m
    }
}

/// The documented random stream.
pub struct SynthRng(SplitMix64);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

/// One generated sample before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample_id: String,
    pub label: Label,
    /// C×H×W, row-major.
    pub activations: Vec<f32>,
    pub logits: Vec<f32>,
    /// Per-channel means of `activations`.
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub head_weights: Vec<f32>,
    pub head_bias: Vec<f32>,
    pub samples: Vec<SynthSample>,
}

fn draw_sample(
    rng: &mut SynthRng,
    cfg: &SynthConfig,
    sample_id: String,
    label: Label,
    noise_hi: f64,
) -> SynthSample {
    let hw = cfg.height * cfg.width;
    let mut activations = Vec::with_capacity(cfg.channels * hw);
    let mut feature = Vec::with_capacity(cfg.channels);
    for _ in 0..cfg.channels {
        let mut slice: Vec<f64> = (0..hw).map(|_| rng.uniform() * noise_hi).collect();
        if label == Label::Id {
            let pos = rng.index(hw);
            let spike = (cfg.spike_mean + cfg.spike_sd * rng.normal()).max(0.0);
            slice[pos] += spike;
        }
        let start = activations.len();
        activations.extend(slice.iter().map(|&v| v as f32));
        let sum: f64 = activations[start..].iter().map(|&v| v as f64).sum();
        feature.push((sum / hw as f64) as f32);
    }
    let mut logits: Vec<f64> = (0..cfg.k_classes).map(|_| rng.normal()).collect();
    let class = rng.index(cfg.k_classes);
    logits[class] += LOGIT_BUMP;
    SynthSample {
        sample_id,
        label,
        activations,
        logits: logits.into_iter().map(|v| v as f32).collect(),
        feature,
    }
}

/// Generates the fixture in memory.
pub fn generate_data(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = SynthRng::new(cfg.seed);
    let (k, c) = (cfg.k_classes, cfg.channels);
    let scale = 1.0 / (c as f64).sqrt();
    let head_weights = (0..k * c).map(|_| (rng.normal() * scale) as f32).collect();
    let head_bias = (0..k).map(|_| (0.1 * rng.normal()) as f32).collect();

    let ood_hi = cfg.resolved_noise_hi_ood();
    let mut samples = Vec::with_capacity(cfg.n_id + cfg.n_ood);
    for i in 0..cfg.n_id {
        samples.push(draw_sample(&mut rng, cfg, format!("id_{i:06}"), Label::Id, cfg.noise_hi_id));
    }
    for i in 0..cfg.n_ood {
        samples.push(draw_sample(&mut rng, cfg, format!("ood_{i:06}"), Label::Ood, ood_hi));
    }
    Ok(SynthData {
        head_weights,
        head_bias,
        samples,
    })
}

/// Generates the fixture and writes tensors plus a manifest under `out_dir`.
/// Returns the manifest path.
pub fn generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let data = generate_data(cfg)?;
    let tensor_dir = out_dir.join("tensors");
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;

    let (k, c) = (cfg.k_classes, cfg.channels);
    write_tensor(
        out_dir.join("head.weights.napd"),
        &Tensor::new(vec![k, c], data.head_weights)?,
    )?;
    write_tensor(out_dir.join("head.bias.napd"), &Tensor::vector(data.head_bias)?)?;

    let mut entries = Vec::with_capacity(data.samples.len());
    for s in data.samples {
        let act = format!("tensors/{}.{DEFAULT_LAYER}.napd", s.sample_id);
        let logits = format!("tensors/{}.logits.napd", s.sample_id);
        let feature = format!("tensors/{}.feature.napd", s.sample_id);
        write_tensor(
            out_dir.join(&act),
            &Tensor::new(vec![c, cfg.height, cfg.width], s.activations)?,
        )?;
        write_tensor(out_dir.join(&logits), &Tensor::vector(s.logits)?)?;
        write_tensor(out_dir.join(&feature), &Tensor::vector(s.feature)?)?;
        entries.push(ManifestEntry {
            sample_id: s.sample_id,
            label: s.label,
            tensors: BTreeMap::from([(DEFAULT_LAYER.to_string(), act)]),
            logits,
            feature: Some(feature),
        });
    }
    let manifest = Manifest {
        entries,
        head: Some(HeadRef {
            weights: "head.weights.napd".into(),
            bias: "head.bias.napd".into(),
        }),
        meta: cfg.meta(),
    };
    let path = out_dir.join(MANIFEST_NAME);
    manifest.write(&path)?;
    Ok(path)
}
