use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{render_sample, sample_pose, Illumination, NoiseParams, NoiseTag, SceneSample, Z_RANGE};
use super::target::{build_target, TargetModel, TargetParams};
use super::validate::{validate_sample, Tolerance};
use crate::error::{Error, Result};
use crate::geometry::formats::{decode_mask, decode_pfm, decode_pnm, encode_mask, encode_pfm, encode_pnm, read_file, write_file};
use crate::geometry::{NoiseSpec, StereoRig};
use crate::pose::{HeadExample, PoseRecord};

type V3 = Vector3<f64>;

pub const MIN_SAMPLES: usize = 10;
/// Desk default. The full-scale set has 39,600 samples at 1280×960.
pub const DEFAULT_SAMPLES: usize = 200;
pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_samples: usize,
    pub master_seed: u64,
    pub rig: StereoRig,
    pub target: TargetParams,
    pub z_range: (f64, f64),
    pub noise: NoiseParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            master_seed: 0,
            rig: StereoRig::desk(),
            target: TargetParams::default(),
            z_range: Z_RANGE,
            noise: NoiseParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn new(n_samples: usize, master_seed: u64) -> Self {
        Self {
            n_samples,
            master_seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub dir: String,
    pub split: Split,
    pub illumination: Illumination,
    pub noise: NoiseTag,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub train: usize,
    pub test: usize,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(master_seed: u64, id: usize) -> u64 {
    splitmix64(splitmix64(master_seed) ^ id as u64)
}

/// Every tenth index (shifted by a hash of the master seed) is a test sample.
pub fn split_of(id: usize, master_seed: u64) -> Split {
    let shift = (splitmix64(master_seed ^ 0x5350_4c49_54) % 10) as usize;
    if (id + shift).is_multiple_of(10) {
        Split::Test
    } else {
        Split::Train
    }
}

/// Cycles illumination with period 4 and shifts the noise cycle every 4
/// samples, so any 16 consecutive ids cover all combinations.
pub fn tags_of(id: usize) -> (Illumination, NoiseTag) {
    (Illumination::ALL[id % 4], NoiseTag::ALL[(id + id / 4) % 4])
}

/// The manifest a generation run will produce, without rendering anything.
pub fn plan(config: &DatasetConfig) -> Result<DatasetManifest> {
    if config.n_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} samples, got {}",
            config.n_samples
        )));
    }
    config.rig.intrinsics.validate()?;
    config.target.validate()?;
    let samples: Vec<SampleEntry> = (0..config.n_samples)
        .map(|id| {
            let (illumination, noise) = tags_of(id);
            SampleEntry {
                id,
                dir: format!("{id:05}"),
                split: split_of(id, config.master_seed),
                illumination,
                noise,
                seed: sample_seed(config.master_seed, id),
            }
        })
        .collect();
    let test = samples.iter().filter(|s| s.split == Split::Test).count();
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        train: samples.len() - test,
        test,
        samples,
    })
}

/// Pose and images depend only on the entry seed; the noise tag only changes the images.
pub fn render_entry(model: &TargetModel, config: &DatasetConfig, entry: &SampleEntry) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    let pose = sample_pose(&mut rng, config.z_range, &config.rig)?;
    let mut s = render_sample(
        model,
        &pose,
        &config.rig,
        entry.illumination,
        config.noise.spec(entry.noise),
        splitmix64(entry.seed),
    )?;
    s.id = entry.id;
    Ok(s)
}

/// Renders every sample in memory.
pub fn render_all(config: &DatasetConfig) -> Result<(TargetModel, Vec<SceneSample>)> {
    let manifest = plan(config)?;
    let model = build_target(&config.target)?;
    let samples = manifest
        .samples
        .par_iter()
        .map(|e| render_entry(&model, config, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub id: usize,
    #[serde(flatten)]
    pub pose: PoseRecord,
    pub rig: StereoRig,
    pub illumination: Illumination,
    pub noise: NoiseTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaFile {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub illumination: Illumination,
    pub noise: NoiseSpec,
    pub left_visible_pixels: usize,
    pub both_visible_pixels: usize,
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn write_sample(dir: &Path, sample: &SceneSample, entry: &SampleEntry) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (sample.disparity.width, sample.disparity.height);
    write_file(&dir.join("left.ppm"), &encode_pnm(&sample.left))?;
    write_file(&dir.join("right.ppm"), &encode_pnm(&sample.right))?;
    write_file(&dir.join("disp.pfm"), &encode_pfm(&sample.disparity))?;
    write_file(&dir.join("mask.pgm"), &encode_mask(&sample.mask, w, h))?;
    let pose = PoseFile {
        id: entry.id,
        pose: sample.pose.to_record(),
        rig: sample.rig,
        illumination: sample.illumination,
        noise: sample.noise_tag(),
    };
    write_file(&dir.join("pose.json"), &to_json(&pose))?;
    let meta = MetaFile {
        id: entry.id,
        seed: entry.seed,
        split: entry.split,
        illumination: sample.illumination,
        noise: sample.noise,
        left_visible_pixels: sample.disparity.valid_count(),
        both_visible_pixels: sample.mask.iter().filter(|&&m| m == super::render::MASK_BOTH).count(),
    };
    write_file(&dir.join("meta.json"), &to_json(&meta))
}

/// Renders and writes all samples in parallel, then the manifest.
pub fn generate_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = plan(config)?;
    let model = build_target(&config.target)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    manifest.samples.par_iter().try_for_each(|entry| {
        let sample = render_entry(&model, config, entry)?;
        write_sample(&out.join(&entry.dir), &sample, entry)
    })?;
    write_file(&out.join(MANIFEST), &to_json(&manifest))?;
    Ok(manifest)
}

/// Lazily loaded dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub model: TargetModel,
    pub verify: bool,
}

pub fn read_dataset(path: &Path, verify: bool) -> Result<Dataset> {
    let manifest_path = path.join(MANIFEST);
    let bytes = read_file(&manifest_path)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(manifest_path.display(), e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Mismatch(format!(
            "manifest format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.samples.len() != manifest.config.n_samples
        || manifest.samples.iter().enumerate().any(|(i, s)| s.id != i)
    {
        return Err(Error::Mismatch("manifest sample list does not match its count".into()));
    }
    let model = build_target(&manifest.config.target)?;
    Ok(Dataset {
        root: path.to_path_buf(),
        manifest,
        model,
        verify,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn entry(&self, id: usize) -> Result<&SampleEntry> {
        self.manifest
            .samples
            .get(id)
            .ok_or_else(|| Error::Mismatch(format!("no sample {id} in a dataset of {}", self.len())))
    }

    pub fn sample_dir(&self, id: usize) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(id)?.dir))
    }

    /// Loads one sample, checking it against the manifest and, with `verify`,
    /// against the annotated pose.
    pub fn load(&self, id: usize) -> Result<SceneSample> {
        let entry = self.entry(id)?;
        let dir = self.root.join(&entry.dir);
        let rig = self.manifest.config.rig;
        let what = |file: &str| format!("sample {}/{file}", entry.dir);
        let read = |file: &str| read_file(&dir.join(file));

        let left = decode_pnm(&read("left.ppm")?, &what("left.ppm"))?;
        let right = decode_pnm(&read("right.ppm")?, &what("right.ppm"))?;
        let disparity = decode_pfm(&read("disp.pfm")?, &what("disp.pfm"))?;
        let (mask, mw, mh) = decode_mask(&read("mask.pgm")?, &what("mask.pgm"))?;
        let pose_file: PoseFile =
            serde_json::from_slice(&read("pose.json")?).map_err(|e| Error::corrupt(what("pose.json"), e))?;
        let meta: MetaFile =
            serde_json::from_slice(&read("meta.json")?).map_err(|e| Error::corrupt(what("meta.json"), e))?;

        let (w, h) = (rig.intrinsics.width, rig.intrinsics.height);
        for (name, (iw, ih)) in [
            ("left.ppm", (left.width, left.height)),
            ("right.ppm", (right.width, right.height)),
            ("disp.pfm", (disparity.width, disparity.height)),
            ("mask.pgm", (mw, mh)),
        ] {
            if (iw, ih) != (w, h) {
                return Err(Error::Mismatch(format!("{} is {iw}x{ih}, rig is {w}x{h}", what(name))));
            }
        }
        if pose_file.id != entry.id
            || meta.id != entry.id
            || pose_file.illumination != entry.illumination
            || pose_file.noise != entry.noise
            || NoiseTag::of(&meta.noise) != entry.noise
            || meta.seed != entry.seed
            || pose_file.rig != rig
        {
            return Err(Error::Mismatch(format!("sample {} annotations disagree with the manifest", entry.dir)));
        }
        let pose = pose_file
            .pose
            .to_pose(1e-9)
            .map_err(|e| Error::corrupt(what("pose.json"), e))?;
        let sample = SceneSample {
            id: entry.id,
            seed: entry.seed,
            left,
            right,
            disparity,
            mask,
            pose,
            illumination: entry.illumination,
            noise: meta.noise,
            rig,
        };
        if self.verify {
            validate_sample(&sample, &self.model, Tolerance::PFM)?;
        }
        Ok(sample)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SceneSample>> + '_ {
        (0..self.len()).map(move |id| self.load(id))
    }
}

/// Per-point inputs for the pose pipeline from a sample's ground-truth depth.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseInput {
    pub points: Vec<V3>,
    pub pixels: Vec<(usize, usize)>,
    pub colors: Vec<[f64; 3]>,
    /// Part class of the nearest mesh triangle under the annotated pose.
    pub labels: Vec<usize>,
}

pub fn pose_input(sample: &SceneSample, model: &TargetModel) -> Result<PoseInput> {
    let k = &sample.rig.intrinsics;
    let inv = sample.pose.inverse();
    let mut out = PoseInput {
        points: Vec::new(),
        pixels: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
    };
    for v in 0..k.height {
        for u in 0..k.width {
            let Some(z) = sample.disparity.get(u, v).and_then(|d| sample.rig.depth(d)) else {
                continue;
            };
            let p = k.unproject(u as f64, v as f64, z);
            let (_, tri) = model.surface_distance(&inv.apply(&p));
            let px = sample.left.pixel(u, v);
            let color = if px.len() == 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
            out.points.push(p);
            out.pixels.push((u, v));
            out.colors.push(color);
            out.labels.push(model.parts[tri].class());
        }
    }
    if out.points.is_empty() {
        return Err(Error::Empty("sample has no valid disparity"));
    }
    Ok(out)
}

/// Head training example from a sample: `count` points (all when 0), keypoint
/// and body-center targets under the annotated pose, scaled by half the diameter.
pub fn head_example(sample: &SceneSample, model: &TargetModel, count: usize, seed: u64) -> Result<HeadExample> {
    let input = pose_input(sample, model)?;
    let kps: Vec<V3> = model.keypoints.iter().map(|k| sample.pose.apply(k)).collect();
    let ex = HeadExample::new(&input.points, &input.colors, &input.labels, &kps, &sample.pose.t, model.diameter / 2.0)?;
    Ok(if count == 0 { ex } else { ex.subsample(count, seed) })
}
