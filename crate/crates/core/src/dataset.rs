//! Manifests, group-aware splits, balanced batching, preprocessing policies and the
//! synthetic texture corpus.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cooccur::{feature_tensor, CoocTensor, PairSubset};
use crate::error::{Error, Result};
use crate::imagecore::{decode_image, jpeg_recompress, save_png, PatchSpec, PixelImage};
use crate::seed::{derive_seed, fingerprint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: String,
    pub group_id: String,
    #[serde(default)]
    pub split: Split,
}

impl ManifestRecord {
    pub fn new(path: impl Into<PathBuf>, label: impl Into<String>, group_id: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            label: label.into(),
            group_id: group_id.into(),
            split: Split::Unassigned,
        }
    }

    /// Key used to derive per-record randomness.
    pub fn key(&self) -> String {
        self.path.to_string_lossy().into_owned()
    }
}

/// Reads a JSON-lines manifest. Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidArgument(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if rec.group_id.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: empty group_id",
                path.display(),
                lineno + 1
            )));
        }
        if rec.path.is_relative() {
            rec.path = base.join(&rec.path);
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Distinct labels in order of first appearance.
pub fn class_names(records: &[ManifestRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::new();
    for r in records {
        if seen.insert(r.label.as_str()) {
            names.push(r.label.clone());
        }
    }
    names
}

pub fn records_in(records: &[ManifestRecord], split: Split) -> Vec<ManifestRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

/// Assigns splits by group: groups are shuffled and handed out in order until each
/// split's record quota is reached, so a split overshoots by less than one group.
pub fn split_manifest(
    records: &[ManifestRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    if records.is_empty() {
        return Err(Error::Empty("manifest has no records".into()));
    }
    let (tr, va, te) = fractions;
    if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }

    let mut order: Vec<&str> = Vec::new();
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for r in records {
        if r.group_id.is_empty() {
            return Err(Error::InvalidArgument(format!("record {} has an empty group_id", r.path.display())));
        }
        let n = sizes.entry(&r.group_id).or_insert(0);
        if *n == 0 {
            order.push(&r.group_id);
        }
        *n += 1;
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = records.len() as f64;
    let train_quota = (tr * total).round() as usize;
    let val_quota = ((tr + va) * total).round() as usize;
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    let mut placed = 0usize;
    for g in order {
        let split = if placed < train_quota {
            Split::Train
        } else if placed < val_quota {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(g, split);
        placed += sizes[g];
    }

    Ok(records
        .iter()
        .map(|r| ManifestRecord {
            split: assignment[r.group_id.as_str()],
            ..r.clone()
        })
        .collect())
}

/// Endless stream of class-balanced batches of record indices.
///
/// Each batch holds `per_class` records of every class, grouped class by class in
/// [`class_names`] order. A class pool is reshuffled whenever it cannot fill a batch.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    per_class: usize,
    pools: Vec<ClassPool>,
}

#[derive(Debug, Clone)]
struct ClassPool {
    members: Vec<usize>,
    queue: Vec<usize>,
    rng: ChaCha8Rng,
}

impl ClassPool {
    fn take(&mut self, k: usize, out: &mut Vec<usize>) {
        if self.queue.len() < k {
            self.queue = self.members.clone();
            self.queue.shuffle(&mut self.rng);
        }
        let start = self.queue.len() - k;
        out.extend(self.queue.drain(start..).rev());
    }
}

pub fn balanced_batches(records: &[ManifestRecord], per_class: usize, seed: u64) -> Result<BalancedBatches> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let classes = class_names(records);
    if classes.is_empty() {
        return Err(Error::Empty("no records to batch".into()));
    }
    let mut pools = Vec::with_capacity(classes.len());
    for name in &classes {
        let members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.label == name)
            .map(|(i, _)| i)
            .collect();
        if members.len() < per_class {
            return Err(Error::InvalidArgument(format!(
                "class {name} has {} records, fewer than {per_class} per batch",
                members.len()
            )));
        }
        pools.push(ClassPool {
            members,
            queue: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, name)),
        });
    }
    Ok(BalancedBatches { per_class, pools })
}

impl BalancedBatches {
    pub fn batch_size(&self) -> usize {
        self.per_class * self.pools.len()
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(self.batch_size());
        for pool in &mut self.pools {
            pool.take(self.per_class, &mut batch);
        }
        Some(batch)
    }
}

/// Endless stream of shuffled, unbalanced batches; reshuffles after each pass.
#[derive(Debug, Clone)]
pub struct ShuffledBatches {
    n: usize,
    batch_size: usize,
    queue: Vec<usize>,
    rng: ChaCha8Rng,
}

impl ShuffledBatches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Empty("shuffled batches need records and a positive batch size".into()));
        }
        Ok(Self {
            n,
            batch_size: batch_size.min(n),
            queue: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for ShuffledBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.queue.len() < self.batch_size {
            self.queue = (0..self.n).collect();
            self.queue.shuffle(&mut self.rng);
        }
        let start = self.queue.len() - self.batch_size;
        Some(self.queue.drain(start..).rev().collect())
    }
}

/// JPEG quality menu. `None` means no recompression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JpegPolicy(pub Vec<Option<u8>>);

impl JpegPolicy {
    pub fn none() -> Self {
        Self(vec![None])
    }

    pub fn fixed(quality: u8) -> Self {
        Self(vec![Some(quality)])
    }

    /// Equal-probability draw over 75, 85, 90 and no recompression.
    pub fn mixed() -> Self {
        Self(vec![Some(75), Some(85), Some(90), None])
    }
}

impl fmt::Display for JpegPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::mixed() {
            return f.write_str("mixed");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|q| q.map_or_else(|| "none".to_string(), |q| q.to_string()))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for JpegPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("mixed") {
            return Ok(Self::mixed());
        }
        let mut qualities = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if part.eq_ignore_ascii_case("none") {
                qualities.push(None);
            } else {
                let q: u8 = part
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad JPEG quality `{part}`")))?;
                qualities.push(Some(q));
            }
        }
        let policy = Self(qualities);
        policy.validate()?;
        Ok(policy)
    }
}

impl JpegPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidArgument("JPEG policy lists no qualities".into()));
        }
        if let Some(q) = self.0.iter().flatten().find(|q| !(1..=100).contains(*q)) {
            return Err(Error::InvalidArgument(format!("JPEG quality {q} outside 1..=100")));
        }
        Ok(())
    }
}

/// How a record becomes a feature tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocPolicy {
    pub jpeg: JpegPolicy,
    /// `None` uses the whole image.
    pub patch: Option<PatchSpec>,
    pub subset: PairSubset,
    pub rng_seed: u64,
}

impl PreprocPolicy {
    pub fn whole_image(subset: PairSubset) -> Self {
        Self {
            jpeg: JpegPolicy::none(),
            patch: None,
            subset,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.jpeg.validate()
    }

    /// Recompression quality for a record key; constant when only one quality is listed.
    pub fn quality_for(&self, key: &str) -> Option<u8> {
        match self.jpeg.0.as_slice() {
            [only] => *only,
            list => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.rng_seed, key));
                list[rng.gen_range(0..list.len())]
            }
        }
    }

    /// Applies recompression, then cuts one patch whose position depends on `(key, variant)`.
    pub fn prepare(&self, img: &PixelImage, key: &str, variant: u64) -> Result<PixelImage> {
        let img = jpeg_recompress(img, self.quality_for(key))?;
        let Some(spec) = self.patch else {
            return Ok(img);
        };
        if img.height() < spec.size || img.width() < spec.size {
            return Ok(img);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.rng_seed, &format!("{key}#patch{variant}")));
        let row = rng.gen_range(0..=img.height() - spec.size);
        let col = rng.gen_range(0..=img.width() - spec.size);
        img.crop(row, col, spec.size, spec.size)
    }

    pub fn features(&self, img: &PixelImage, key: &str, variant: u64) -> Result<CoocTensor> {
        Ok(feature_tensor(&self.prepare(img, key, variant)?, &self.subset))
    }

    pub fn record_features(&self, record: &ManifestRecord, variant: u64) -> Result<CoocTensor> {
        let img = decode_image(&record.path)?;
        self.features(&img, &record.key(), variant)
    }

    pub fn describe(&self) -> String {
        let patch = self
            .patch
            .map_or_else(|| "whole".to_string(), |p| format!("{}/{}", p.size, p.stride));
        format!(
            "jpeg={} patch={} pairs={} seed={}",
            self.jpeg, patch, self.subset, self.rng_seed
        )
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.describe().as_bytes())
    }
}

/// Texture parameters of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTexture {
    pub name: String,
    /// Standard deviation, in pixels, of the Gaussian smoothing kernel.
    pub autocorr_length: f64,
    /// Grey-level standard deviation around mid-grey.
    pub noise_amplitude: f64,
    pub quant_step: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassTexture>,
    pub image_size: usize,
    pub images_per_class: usize,
    pub rng_seed: u64,
}

const SIX_CLASS_NAMES: [&str; 6] = ["real", "stargan", "cyclegan", "progan", "spade", "stylegan"];
const DEFAULT_AMPLITUDE: f64 = 40.0;

impl SynthSpec {
    /// Two classes, `real` (length 1.0, step 1) and `gan` (length 2.5, step 3).
    pub fn detection() -> Self {
        let tex = |name: &str, len, step| ClassTexture {
            name: name.into(),
            autocorr_length: len,
            noise_amplitude: DEFAULT_AMPLITUDE,
            quant_step: step,
        };
        Self {
            classes: vec![tex("real", 1.0, 1), tex("gan", 2.5, 3)],
            image_size: 256,
            images_per_class: 2000,
            rng_seed: 0,
        }
    }

    /// Six classes with steps 1 through 6 and lengths spread over 1.0..=2.5.
    pub fn attribution() -> Self {
        let classes = SIX_CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| ClassTexture {
                name: (*name).into(),
                autocorr_length: 1.0 + 1.5 * k as f64 / 5.0,
                noise_amplitude: DEFAULT_AMPLITUDE,
                quant_step: k as u8 + 1,
            })
            .collect();
        Self {
            classes,
            image_size: 256,
            images_per_class: 2000,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.classes.len()) {
            return Err(Error::InvalidArgument(format!(
                "synthetic corpus needs 2 to 6 classes, got {}",
                self.classes.len()
            )));
        }
        if self.image_size < 2 || self.images_per_class == 0 {
            return Err(Error::InvalidArgument("image size must be ≥ 2 and images per class ≥ 1".into()));
        }
        let mut steps = BTreeSet::new();
        let mut names = BTreeSet::new();
        for c in &self.classes {
            if c.quant_step == 0 || !steps.insert(c.quant_step) {
                return Err(Error::InvalidArgument(format!(
                    "class {} needs a distinct positive quantization step",
                    c.name
                )));
            }
            if c.name.is_empty() || !names.insert(c.name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate or empty class name `{}`", c.name)));
            }
            if !(c.autocorr_length > 0.0) || !(c.noise_amplitude >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad texture parameters for class {}", c.name)));
            }
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// One RGB texture image: smoothed white noise per channel, standardised, scaled around
/// mid-grey and quantized to multiples of the class step.
pub fn synth_image(texture: &ClassTexture, size: usize, seed: u64) -> PixelImage {
    let kernel = gaussian_kernel(texture.autocorr_length);
    let r = kernel.len() / 2;
    let big = size + 2 * r;
    let step = texture.quant_step as f64;
    let top = (255 / texture.quant_step as usize) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; size * size * 3];

    for ch in 0..3 {
        let noise: Vec<f64> = (0..big * big).map(|_| rng.sample(StandardNormal)).collect();
        // Horizontal pass: big rows × size columns.
        let mut horiz = vec![0.0; big * size];
        for y in 0..big {
            for x in 0..size {
                horiz[y * size + x] = kernel.iter().enumerate().map(|(i, k)| k * noise[y * big + x + i]).sum();
            }
        }
        let mut field = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                field[y * size + x] = kernel.iter().enumerate().map(|(i, k)| k * horiz[(y + i) * size + x]).sum();
            }
        }
        let n = field.len() as f64;
        let mean = field.iter().sum::<f64>() / n;
        let sd = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
        for (i, v) in field.iter().enumerate() {
            let level = 128.0 + texture.noise_amplitude * (v - mean) / sd;
            let q = (level / step).round().clamp(0.0, top) * step;
            data[i * 3 + ch] = q as u8;
        }
    }
    PixelImage::new(size, size, 3, data).expect("synthetic image dimensions are consistent")
}

/// Writes the corpus as `<out>/<class>/<class>_<index>.png` plus `<out>/manifest.jsonl`
/// (paths relative to `out_dir`) and returns the records with absolute paths.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.images_per_class).map(move |i| (c, i)))
        .collect();
    for class in &spec.classes {
        let dir = out_dir.join(&class.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let relative: Vec<ManifestRecord> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let class = &spec.classes[c];
            let rel = PathBuf::from(&class.name).join(format!("{}_{i:05}.png", class.name));
            let seed = derive_seed(spec.rng_seed, &format!("{}/{i}", class.name));
            save_png(&synth_image(class, spec.image_size, seed), out_dir.join(&rel))?;
            Ok(ManifestRecord::new(rel, class.name.clone(), format!("{}-{i:05}", class.name)))
        })
        .collect::<Result<_>>()?;

    write_manifest(out_dir.join("manifest.jsonl"), &relative)?;
    Ok(relative
        .into_iter()
        .map(|r| ManifestRecord {
            path: out_dir.join(&r.path),
            ..r
        })
        .collect())
}

/// Train/val/test plan with one generator family held out entirely for testing.
#[derive(Debug, Clone)]
pub struct LeaveOneOut {
    pub held_out: String,
    pub train_classes: Vec<String>,
    pub train: Vec<ManifestRecord>,
    pub val: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
}

/// Test set = every held-out record plus an equal number of `real_label` records (capped
/// at half the real pool so training keeps real examples). Real records are taken group by
/// group; the remainder is split 90/10 into train and val by group.
pub fn leave_one_out_plan(
    records: &[ManifestRecord],
    held_out: &str,
    real_label: &str,
    seed: u64,
) -> Result<LeaveOneOut> {
    let classes = class_names(records);
    if !classes.iter().any(|c| c == held_out) {
        return Err(Error::UnknownClass(held_out.into()));
    }
    if held_out == real_label {
        return Err(Error::InvalidArgument(format!("`{real_label}` is the authentic class and cannot be held out")));
    }
    if !classes.iter().any(|c| c == real_label) {
        return Err(Error::UnknownClass(real_label.into()));
    }
    let train_classes: Vec<String> = classes.iter().filter(|c| *c != held_out).cloned().collect();
    if train_classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "holding out {held_out} leaves a single training class"
        )));
    }

    let held: Vec<ManifestRecord> = records.iter().filter(|r| r.label == held_out).cloned().collect();
    let reals: Vec<&ManifestRecord> = records.iter().filter(|r| r.label == real_label).collect();
    let real_share = held.len().min(reals.len() / 2);

    let mut real_groups: Vec<&str> = Vec::new();
    for r in &reals {
        if !real_groups.contains(&r.group_id.as_str()) {
            real_groups.push(&r.group_id);
        }
    }
    real_groups.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "leave-one-out")));
    let mut test_groups = BTreeSet::new();
    let mut taken = 0;
    for g in real_groups {
        if taken >= real_share {
            break;
        }
        taken += reals.iter().filter(|r| r.group_id == g).count();
        test_groups.insert(g.to_string());
    }

    let mut test = held;
    let mut rest = Vec::new();
    for r in records.iter().filter(|r| r.label != held_out) {
        if r.label == real_label && test_groups.contains(&r.group_id) {
            test.push(r.clone());
        } else {
            rest.push(r.clone());
        }
    }
    for r in &mut test {
        r.split = Split::Test;
    }
    let rest = split_manifest(&rest, (0.9, 0.1, 0.0), seed)?;
    Ok(LeaveOneOut {
        held_out: held_out.into(),
        train_classes,
        train: records_in(&rest, Split::Train),
        val: records_in(&rest, Split::Val),
        test,
    })
}
