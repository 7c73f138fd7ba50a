//! Seeded synthetic polyphonic datasets.
//!
//! Each category has a spectral signature; an active event adds its
//! signature (plus a per-instance jitter) to every frame it covers, and
//! overlapping events add. Background noise is white Gaussian. Splits mirror
//! the usual strong / weak / unlabeled / validation regimes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::numgrad::Array;
use crate::rng::{substream, Rng};

pub const CLIP_MAGIC: &[u8; 8] = b"PMAMCLIP";
pub const CLIP_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventInstance {
    pub category: usize,
    pub onset_frame: usize,
    /// Exclusive.
    pub offset_frame: usize,
}

impl EventInstance {
    pub fn new(category: usize, onset_frame: usize, offset_frame: usize, frames: usize) -> Result<Self> {
        if onset_frame >= offset_frame || offset_frame > frames {
            return Err(Error::Data(format!(
                "event [{onset_frame}, {offset_frame}) invalid for {frames} frames"
            )));
        }
        Ok(Self {
            category,
            onset_frame,
            offset_frame,
        })
    }

    pub fn len(&self) -> usize {
        self.offset_frame - self.onset_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covers(&self, t: usize) -> bool {
        self.onset_frame <= t && t < self.offset_frame
    }
}

/// A feature matrix with its frame-level annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    /// `F × T`, frequency rows.
    pub features: Array,
    pub events: Vec<EventInstance>,
    /// `C × T` row-major, 1 where some event of that category covers the frame.
    pub label_matrix: Vec<u8>,
    pub categories: usize,
}

impl FeatureClip {
    pub fn frames(&self) -> usize {
        self.features.cols()
    }

    pub fn freq_bins(&self) -> usize {
        self.features.rows()
    }

    pub fn label(&self, category: usize, t: usize) -> u8 {
        self.label_matrix[category * self.frames() + t]
    }

    /// Labels as a `T × C` float matrix (time rows), the layout used by the
    /// detection metrics.
    pub fn truth_frames(&self) -> Array {
        let (t, c) = (self.frames(), self.categories);
        let mut out = Array::zeros(&[t, c]);
        for cat in 0..c {
            for f in 0..t {
                out.set(f, cat, self.label(cat, f) as f64);
            }
        }
        out
    }

    /// Categories present anywhere in the clip.
    pub fn weak_labels(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.events.iter().map(|e| e.category).collect();
        set.into_iter().collect()
    }

    /// Whether any frame annotation is present.
    pub fn has_frame_labels(&self) -> bool {
        !self.events.is_empty() || self.label_matrix.iter().any(|&v| v != 0)
    }
}

/// Rasterizes event intervals into a `C × T` label matrix.
pub fn label_matrix(events: &[EventInstance], categories: usize, frames: usize) -> Vec<u8> {
    let mut labels = vec![0u8; categories * frames];
    for e in events {
        labels[e.category * frames + e.onset_frame..e.category * frames + e.offset_frame].fill(1);
    }
    labels
}

/// Per-category generative profile.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryProfile {
    pub signature: Vec<f64>,
    /// Per-bin variance of the per-instance jitter.
    pub signature_variance: Vec<f64>,
    /// Inclusive duration bounds, in frames.
    pub duration_range: (usize, usize),
    pub second_signature: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub categories: usize,
    pub freq_bins: usize,
    pub frames: usize,
    pub strong_clips: usize,
    pub weak_clips: usize,
    pub unlabeled_clips: usize,
    pub validation_clips: usize,
    pub mean_events_per_clip: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub signature_scale: f64,
    pub jitter_std: f64,
    pub noise_std: f64,
    /// Category rendered with two alternating signatures, if any.
    pub dual_mode_category: Option<usize>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            categories: 4,
            freq_bins: 16,
            frames: 200,
            strong_clips: 20,
            weak_clips: 20,
            unlabeled_clips: 200,
            validation_clips: 100,
            mean_events_per_clip: 3.0,
            min_duration: 20,
            max_duration: 60,
            signature_scale: 1.0,
            jitter_std: 0.2,
            noise_std: 1.0,
            dual_mode_category: Some(0),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.categories == 0 || self.freq_bins == 0 || self.frames == 0 {
            return bad("categories, freq_bins and frames must be positive".into());
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration || self.max_duration > self.frames {
            return bad(format!(
                "duration range [{}, {}] must lie within (0, {}]",
                self.min_duration, self.max_duration, self.frames
            ));
        }
        if !(self.mean_events_per_clip >= 0.0) || !self.mean_events_per_clip.is_finite() {
            return bad("mean_events_per_clip must be a finite value >= 0".into());
        }
        if !(self.noise_std >= 0.0) || !(self.jitter_std >= 0.0) {
            return bad("noise_std and jitter_std must be >= 0".into());
        }
        if let Some(c) = self.dual_mode_category {
            if c >= self.categories {
                return bad(format!("dual_mode_category {c} out of range"));
            }
        }
        Ok(())
    }

    pub fn total_clips(&self) -> usize {
        self.strong_clips + self.weak_clips + self.unlabeled_clips + self.validation_clips
    }
}

/// Draws the category profiles for a configuration.
pub fn make_profiles(cfg: &GeneratorConfig) -> Vec<CategoryProfile> {
    let mut rng = substream(cfg.seed, "data.profiles", &[]);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let sig = |rng: &mut Rng| -> Vec<f64> {
        (0..cfg.freq_bins)
            .map(|_| cfg.signature_scale * unit.sample(rng))
            .collect()
    };
    (0..cfg.categories)
        .map(|c| {
            let signature = sig(&mut rng);
            let second_signature = (cfg.dual_mode_category == Some(c)).then(|| sig(&mut rng));
            CategoryProfile {
                signature,
                signature_variance: vec![cfg.jitter_std * cfg.jitter_std; cfg.freq_bins],
                duration_range: (cfg.min_duration, cfg.max_duration),
                second_signature,
            }
        })
        .collect()
}

/// Samples a Poisson number of events with uniform categories, onsets and
/// (per-category) durations, clipped at the clip end.
pub fn sample_events(
    rng: &mut Rng,
    categories: usize,
    frames: usize,
    mean_events_per_clip: f64,
    profiles: &[CategoryProfile],
) -> Result<Vec<EventInstance>> {
    if !(mean_events_per_clip >= 0.0) {
        return Err(Error::Parameter("mean_events_per_clip must be >= 0".into()));
    }
    if profiles.len() != categories {
        return Err(Error::Data(format!(
            "{} profiles for {categories} categories",
            profiles.len()
        )));
    }
    if mean_events_per_clip == 0.0 {
        return Ok(Vec::new());
    }
    let count = Poisson::new(mean_events_per_clip)
        .map_err(|e| Error::Parameter(e.to_string()))?
        .sample(rng) as usize;
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let category = rng.random_range(0..categories);
        let onset = rng.random_range(0..frames);
        let (lo, hi) = profiles[category].duration_range;
        let duration = rng.random_range(lo..=hi);
        let offset = (onset + duration).min(frames);
        events.push(EventInstance::new(category, onset, offset, frames)?);
    }
    Ok(events)
}

/// Renders features for a set of events. The dual-mode category picks one of
/// its two signatures per instance.
pub fn render_features(
    rng: &mut Rng,
    events: &[EventInstance],
    profiles: &[CategoryProfile],
    noise_std: f64,
    freq_bins: usize,
    frames: usize,
) -> Result<FeatureClip> {
    let mut features = Array::zeros(&[freq_bins, frames]);
    for e in events {
        let profile = profiles
            .get(e.category)
            .ok_or_else(|| Error::Data(format!("no profile for category {}", e.category)))?;
        if e.offset_frame > frames {
            return Err(Error::Data(format!("event ends at {} beyond {frames}", e.offset_frame)));
        }
        let base = match &profile.second_signature {
            Some(second) if rng.random_bool(0.5) => second,
            _ => &profile.signature,
        };
        let instance: Vec<f64> = base
            .iter()
            .zip(&profile.signature_variance)
            .map(|(&s, &var)| {
                if var > 0.0 {
                    s + Normal::new(0.0, var.sqrt()).unwrap().sample(rng)
                } else {
                    s
                }
            })
            .collect();
        for (f, &v) in instance.iter().enumerate() {
            for t in e.onset_frame..e.offset_frame {
                let cur = features.get(f, t);
                features.set(f, t, cur + v);
            }
        }
    }
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).unwrap();
        for x in features.data_mut() {
            *x += noise.sample(rng);
        }
    }
    let categories = profiles.len();
    Ok(FeatureClip {
        features,
        events: events.to_vec(),
        label_matrix: label_matrix(events, categories, frames),
        categories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Strong,
    Weak,
    Unlabeled,
    Validation,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Strong, Split::Weak, Split::Unlabeled, Split::Validation];

    pub fn is_training(self) -> bool {
        self != Split::Validation
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitLists {
    pub strong: Vec<String>,
    pub weak: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generation: GeneratorConfig,
    pub splits: SplitLists,
    /// Clip-level label sets of the weak split.
    pub weak_labels: BTreeMap<String, Vec<usize>>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Strong => &self.splits.strong,
            Split::Weak => &self.splits.weak,
            Split::Unlabeled => &self.splits.unlabeled,
            Split::Validation => &self.splits.validation,
        }
    }

    fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Strong => &mut self.splits.strong,
            Split::Weak => &mut self.splits.weak,
            Split::Unlabeled => &mut self.splits.unlabeled,
            Split::Validation => &mut self.splits.validation,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("manifest encoding: {e}")))
    }
}

/// One clip with its split and whatever supervision that split carries.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub split: Split,
    pub clip: FeatureClip,
    pub weak_labels: Option<Vec<usize>>,
}

/// A whole dataset in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<ClipRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn training(&self) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(|c| c.split.is_training())
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.manifest.generation
    }
}

fn split_of(cfg: &GeneratorConfig, index: usize) -> Split {
    let mut bound = cfg.strong_clips;
    if index < bound {
        return Split::Strong;
    }
    bound += cfg.weak_clips;
    if index < bound {
        return Split::Weak;
    }
    bound += cfg.unlabeled_clips;
    if index < bound {
        return Split::Unlabeled;
    }
    Split::Validation
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// A generated clip with its id and split.
pub type GeneratedClip = (String, Split, FeatureClip);

/// Generates every clip with full ground truth, before projection onto what
/// each split keeps on disk.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Vec<CategoryProfile>, Vec<GeneratedClip>)> {
    cfg.validate()?;
    let profiles = make_profiles(cfg);
    let mut out = Vec::with_capacity(cfg.total_clips());
    for index in 0..cfg.total_clips() {
        let mut rng = substream(cfg.seed, "data.clip", &[index as u64]);
        let events = sample_events(
            &mut rng,
            cfg.categories,
            cfg.frames,
            cfg.mean_events_per_clip,
            &profiles,
        )?;
        let clip = render_features(&mut rng, &events, &profiles, cfg.noise_std, cfg.freq_bins, cfg.frames)?;
        out.push((clip_id(index), split_of(cfg, index), clip));
    }
    Ok((profiles, out))
}

/// Drops annotations a split does not carry: weak clips keep only their
/// category set, unlabeled clips keep nothing.
fn project(split: Split, clip: &FeatureClip) -> (FeatureClip, Option<Vec<usize>>) {
    match split {
        Split::Strong | Split::Validation => (clip.clone(), None),
        Split::Weak | Split::Unlabeled => {
            let weak = (split == Split::Weak).then(|| clip.weak_labels());
            let stripped = FeatureClip {
                features: clip.features.clone(),
                events: Vec::new(),
                label_matrix: vec![0; clip.label_matrix.len()],
                categories: clip.categories,
            };
            (stripped, weak)
        }
    }
}

/// Generates a dataset and persists it under `dir`.
pub fn build_dataset(cfg: &GeneratorConfig, dir: &Path) -> Result<Dataset> {
    let (_, clips) = generate(cfg)?;
    let mut manifest = DatasetManifest {
        format_version: 1,
        generation: cfg.clone(),
        splits: SplitLists::default(),
        weak_labels: BTreeMap::new(),
    };
    let mut records = Vec::with_capacity(clips.len());
    for (id, split, clip) in clips {
        let (stored, weak) = project(split, &clip);
        write_clip(&dir.join("clips").join(format!("{id}.clip")), &stored)?;
        write_file(
            &dir.join("clips").join(format!("{id}.events.txt")),
            events_sidecar(&stored).as_bytes(),
        )?;
        manifest.ids_mut(split).push(id.clone());
        if let Some(w) = &weak {
            manifest.weak_labels.insert(id.clone(), w.clone());
        }
        records.push(ClipRecord {
            id,
            split,
            clip: stored,
            weak_labels: weak,
        });
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.to_toml()?.as_bytes())?;
    Ok(Dataset {
        manifest,
        clips: records,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = String::from_utf8(read_file(&path)?).map_err(|_| Error::format(&path, "not utf-8"))?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut clips = Vec::new();
    for split in Split::ALL {
        for id in manifest.ids(split) {
            let clip = read_clip(&dir.join("clips").join(format!("{id}.clip")))?;
            clips.push(ClipRecord {
                id: id.clone(),
                split,
                clip,
                weak_labels: manifest.weak_labels.get(id).cloned(),
            });
        }
    }
    clips.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Dataset { manifest, clips })
}

pub fn encode_clip(clip: &FeatureClip) -> Vec<u8> {
    let mut e = Encoder::default();
    e.bytes(CLIP_MAGIC);
    e.u32(CLIP_VERSION);
    e.u32(clip.freq_bins() as u32);
    e.u32(clip.frames() as u32);
    e.u32(clip.categories as u32);
    e.f64s(clip.features.data());
    e.bytes(&clip.label_matrix);
    e.u32(clip.events.len() as u32);
    for ev in &clip.events {
        e.u32(ev.category as u32);
        e.u32(ev.onset_frame as u32);
        e.u32(ev.offset_frame as u32);
    }
    e.buf
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<FeatureClip> {
    let mut d = Decoder::new(bytes, path);
    d.magic(CLIP_MAGIC)?;
    let version = d.u32()?;
    if version != CLIP_VERSION {
        return Err(d.err(format!("unsupported clip version {version}")));
    }
    let f = d.u32()? as usize;
    let t = d.u32()? as usize;
    let c = d.u32()? as usize;
    let features = Array::new(&[f, t], d.f64s(f * t)?)?;
    let label_matrix = d.take(c * t)?.to_vec();
    if label_matrix.iter().any(|&v| v > 1) {
        return Err(d.err("label bytes must be 0 or 1"));
    }
    let n = d.u32()? as usize;
    let mut events = Vec::with_capacity(n);
    for _ in 0..n {
        let (cat, on, off) = (d.u32()? as usize, d.u32()? as usize, d.u32()? as usize);
        if cat >= c {
            return Err(d.err(format!("event category {cat} out of range")));
        }
        events.push(EventInstance::new(cat, on, off, t).map_err(|e| d.err(e.to_string()))?);
    }
    d.finish()?;
    Ok(FeatureClip {
        features,
        events,
        label_matrix,
        categories: c,
    })
}

pub fn write_clip(path: &Path, clip: &FeatureClip) -> Result<()> {
    write_file(path, &encode_clip(clip))
}

pub fn read_clip(path: &Path) -> Result<FeatureClip> {
    decode_clip(&read_file(path)?, path)
}

fn events_sidecar(clip: &FeatureClip) -> String {
    let mut s = String::from("# category onset_frame offset_frame\n");
    for e in &clip.events {
        let _ = writeln!(s, "{} {} {}", e.category, e.onset_frame, e.offset_frame);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profiles(cfg: &GeneratorConfig) -> Vec<CategoryProfile> {
        make_profiles(cfg)
    }

    #[test]
    fn zero_mean_gives_no_events() {
        let cfg = GeneratorConfig::default();
        let mut rng = substream(1, "t", &[]);
        let ev = sample_events(&mut rng, 4, 200, 0.0, &profiles(&cfg)).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn event_count_follows_the_mean() {
        let cfg = GeneratorConfig::default();
        let p = profiles(&cfg);
        let mut rng = substream(2, "t", &[]);
        let mut total = 0usize;
        for _ in 0..10_000 {
            let ev = sample_events(&mut rng, 4, 200, 3.0, &p).unwrap();
            assert!(ev.iter().all(|e| e.onset_frame < e.offset_frame && e.offset_frame <= 200));
            total += ev.len();
        }
        let mean = total as f64 / 10_000.0;
        assert!((2.9..=3.1).contains(&mean), "{mean}");
    }

    fn quiet_profiles() -> Vec<CategoryProfile> {
        let cfg = GeneratorConfig {
            jitter_std: 0.0,
            dual_mode_category: None,
            ..GeneratorConfig::default()
        };
        profiles(&cfg)
    }

    #[test]
    fn silent_clip_is_all_zero() {
        let mut rng = substream(3, "t", &[]);
        let clip = render_features(&mut rng, &[], &quiet_profiles(), 0.0, 16, 50).unwrap();
        assert!(clip.features.data().iter().all(|&v| v == 0.0));
        assert!(clip.label_matrix.iter().all(|&v| v == 0));
    }

    #[test]
    fn single_event_frames_equal_the_signature() {
        let p = quiet_profiles();
        let ev = EventInstance::new(2, 5, 9, 20).unwrap();
        let mut rng = substream(4, "t", &[]);
        let clip = render_features(&mut rng, &[ev], &p, 0.0, 16, 20).unwrap();
        for t in 0..20 {
            for f in 0..16 {
                let want = if ev.covers(t) { p[2].signature[f] } else { 0.0 };
                assert_eq!(clip.features.get(f, t), want);
            }
            assert_eq!(clip.label(2, t), ev.covers(t) as u8);
        }
    }

    #[test]
    fn overlapping_events_add() {
        let p = quiet_profiles();
        let a = EventInstance::new(0, 0, 10, 20).unwrap();
        let b = EventInstance::new(1, 5, 15, 20).unwrap();
        let mut rng = substream(5, "t", &[]);
        let clip = render_features(&mut rng, &[a, b], &p, 0.0, 16, 20).unwrap();
        for t in 5..10 {
            for f in 0..16 {
                assert_eq!(clip.features.get(f, t), p[0].signature[f] + p[1].signature[f]);
            }
            assert_eq!((clip.label(0, t), clip.label(1, t)), (1, 1));
        }
    }

    #[test]
    fn weak_projection_keeps_only_the_category_set() {
        let frames = 30;
        let events = vec![
            EventInstance::new(1, 0, 5, frames).unwrap(),
            EventInstance::new(3, 10, 12, frames).unwrap(),
            EventInstance::new(1, 20, 25, frames).unwrap(),
        ];
        let clip = FeatureClip {
            features: Array::zeros(&[2, frames]),
            label_matrix: label_matrix(&events, 4, frames),
            events,
            categories: 4,
        };
        let (stored, weak) = project(Split::Weak, &clip);
        assert_eq!(weak, Some(vec![1, 3]));
        assert!(!stored.has_frame_labels());
        let (stored, weak) = project(Split::Unlabeled, &clip);
        assert_eq!(weak, None);
        assert!(!stored.has_frame_labels());
    }

    #[test]
    fn clip_decoder_rejects_garbage() {
        let p = Path::new("x.clip");
        assert!(decode_clip(b"NOTACLIP", p).is_err());
        let clip = FeatureClip {
            features: Array::zeros(&[2, 3]),
            events: vec![],
            label_matrix: vec![0; 3],
            categories: 1,
        };
        let mut bytes = encode_clip(&clip);
        assert_eq!(decode_clip(&bytes, p).unwrap(), clip);
        bytes.push(0);
        assert!(decode_clip(&bytes, p).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.max_duration = 500;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
