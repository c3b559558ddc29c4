//! Image ingestion, stratified splitting, and epoch batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::tensor::{Scalar, Tensor};

/// Side length of the square network input.
pub const IMAGE_SIDE: usize = 100;
/// Values per decoded image: 3 channel-major planes of 100x100.
pub const IMAGE_LEN: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;

/// Canonical class names in label order.
pub const CLASS_NAMES: [&str; 3] = ["NonDemented", "VeryMildDemented", "MildDemented"];

/// Class directory deliberately left out of the three-class task.
const EXCLUDED_CLASS: &str = "moderatedemented";

fn canonical_key(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Mapping from label index to class name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Data("class table is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', '\n', '\r']) {
                return Err(Error::Data(format!("invalid class name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Data(format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassTable { names })
    }

    /// `NonDemented`, `VeryMildDemented`, `MildDemented`.
    pub fn canonical() -> Self {
        ClassTable {
            names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Table for a set of class directory names. When every directory
    /// matches a canonical class (ignoring case and punctuation), canonical
    /// label order is used; otherwise names are ordered alphabetically.
    pub fn for_directories(dirs: &[String]) -> Result<Self> {
        let canonical: Vec<String> = CLASS_NAMES.iter().map(|s| canonical_key(s)).collect();
        let mut keyed: Vec<(usize, &String)> = Vec::new();
        for d in dirs {
            match canonical.iter().position(|c| *c == canonical_key(d)) {
                Some(i) => keyed.push((i, d)),
                None => {
                    let mut sorted = dirs.to_vec();
                    sorted.sort();
                    return ClassTable::new(sorted);
                }
            }
        }
        keyed.sort();
        ClassTable::new(keyed.into_iter().map(|(_, d)| d.clone()).collect())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.get(label).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A decoded image with its class label.
#[derive(Debug, Clone)]
pub struct LabeledImage<T: Scalar> {
    /// `[3, 100, 100]`, values in `[0, 1]`.
    pub pixels: Tensor<T>,
    pub label: usize,
    pub source_path: PathBuf,
}

/// Decodes a file into 8-bit channel-major RGB planes, 100x100. Grayscale
/// sources are replicated across the three channels. Other sizes are an
/// error unless `resize` is set, in which case they are resampled bilinearly.
pub fn decode_planar(path: &Path, resize: bool) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    let side = IMAGE_SIDE as u32;
    if rgb.width() != side || rgb.height() != side {
        if !resize {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                width: rgb.width(),
                height: rgb.height(),
            });
        }
        rgb = image::imageops::resize(&rgb, side, side, FilterType::Triangle);
    }
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut out = vec![0u8; IMAGE_LEN];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px.0[c];
        }
    }
    Ok(out)
}

/// Converts 8-bit planes to `[0, 1]` by dividing by 255.
pub fn normalize_bytes<T: Scalar>(bytes: &[u8], out: &mut [T]) {
    for (o, &b) in out.iter_mut().zip(bytes) {
        *o = T::from_f64(f64::from(b) / 255.0);
    }
}

/// Loads an image as a `[3, 100, 100]` tensor in `[0, 1]`.
pub fn load_image<T: Scalar>(path: &Path, resize: bool) -> Result<Tensor<T>> {
    let bytes = decode_planar(path, resize)?;
    let mut data = vec![T::ZERO; IMAGE_LEN];
    normalize_bytes(&bytes, &mut data);
    Tensor::from_vec(vec![3, IMAGE_SIDE, IMAGE_SIDE], data)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// A dataset directory: one subdirectory per class.
#[derive(Debug, Clone)]
pub struct ScannedDataset {
    pub classes: ClassTable,
    /// `(path, label)`, sorted by label then path.
    pub items: Vec<(PathBuf, usize)>,
    /// Subdirectories skipped (the moderate class).
    pub skipped: Vec<String>,
}

/// Lists the class directories under `root` and their PNG/JPEG files.
pub fn scan_dataset(root: &Path) -> Result<ScannedDataset> {
    let read = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(p, e));
    let mut dirs = Vec::new();
    let mut skipped = Vec::new();
    for entry in read(root)? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if canonical_key(&name) == EXCLUDED_CLASS {
            skipped.push(name);
            continue;
        }
        dirs.push(name);
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let classes = ClassTable::for_directories(&dirs)?;
    let mut items = Vec::new();
    for (label, name) in classes.names().iter().enumerate() {
        let dir = root.join(name);
        let mut files: Vec<PathBuf> = read(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class {name:?} has no images in {}", dir.display())));
        }
        files.sort();
        items.extend(files.into_iter().map(|p| (p, label)));
    }
    skipped.sort();
    Ok(ScannedDataset {
        classes,
        items,
        skipped,
    })
}

/// Exact decimal fraction in `(0, 1)`, kept as `num / 10^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num >= den {
            return Err(Error::Param(format!("fraction {num}/{den} must lie strictly in (0,1)")));
        }
        Ok(Fraction { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `(floor(n * f), remainder numerator over den)`.
    fn split(&self, n: usize) -> (usize, u64) {
        let scaled = n as u128 * self.num as u128;
        ((scaled / self.den as u128) as usize, (scaled % self.den as u128) as u64)
    }

    /// `n * f` rounded half up.
    fn round_half_up(&self, n: usize) -> usize {
        let scaled = 2 * n as u128 * self.num as u128 + self.den as u128;
        (scaled / (2 * self.den as u128)) as usize
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("cannot parse fraction {s:?}"));
        let s = s.trim();
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let num: u64 = digits.parse().map_err(|_| bad())?;
        Fraction::new(num, 10u64.pow(frac.len() as u32))
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // den is a power of ten by construction when parsed; fall back to a
        // shortest float rendering otherwise.
        let mut den = self.den;
        let mut places = 0;
        while den % 10 == 0 && den > 1 {
            den /= 10;
            places += 1;
        }
        if den == 1 {
            let s = format!("{:0width$}", self.num, width = places + 1);
            let (int, frac) = s.split_at(s.len() - places);
            let frac = frac.trim_end_matches('0');
            if frac.is_empty() {
                write!(f, "{int}")
            } else {
                write!(f, "{int}.{frac}")
            }
        } else {
            write!(f, "{}", self.as_f64())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
    /// Carved out of `Train` on request; never written to a manifest.
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Dataset index with split assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: ClassTable,
    pub seed: u64,
    pub train_fraction: Fraction,
}

/// Per-class stratified split. Each class is shuffled with the seeded
/// generator and contributes `floor(f * n_c)` training items; the remaining
/// slots up to `round_half_up(f * N)` go to classes with the largest
/// fractional remainders (ties to the lower label).
pub fn stratified_split(
    items: &[(PathBuf, usize)],
    classes: &ClassTable,
    train_fraction: Fraction,
    seed: u64,
) -> Result<Manifest> {
    let k = classes.len();
    let mut by_class: Vec<Vec<&PathBuf>> = vec![Vec::new(); k];
    let mut seen = std::collections::HashSet::new();
    for (path, label) in items {
        if *label >= k {
            return Err(Error::Data(format!("label {label} outside {k} classes")));
        }
        if !seen.insert(path) {
            return Err(Error::Data(format!("duplicate path {}", path.display())));
        }
        by_class[*label].push(path);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {:?} is empty", classes.names()[empty])));
    }

    let splits: Vec<(usize, u64)> = by_class.iter().map(|c| train_fraction.split(c.len())).collect();
    let mut train_counts: Vec<usize> = splits.iter().map(|s| s.0).collect();
    let target = train_fraction.round_half_up(items.len());
    let mut extra = target.saturating_sub(train_counts.iter().sum());
    let mut order: Vec<usize> = (0..k).filter(|&c| splits[c].1 > 0).collect();
    order.sort_by(|&a, &b| splits[b].1.cmp(&splits[a].1).then(a.cmp(&b)));
    for c in order {
        if extra == 0 {
            break;
        }
        train_counts[c] += 1;
        extra -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(items.len());
    for (label, paths) in by_class.iter().enumerate() {
        let mut idx: Vec<usize> = (0..paths.len()).collect();
        idx.shuffle(&mut rng);
        let mut is_train = vec![false; paths.len()];
        for &i in &idx[..train_counts[label]] {
            is_train[i] = true;
        }
        for (i, path) in paths.iter().enumerate() {
            entries.push(ManifestEntry {
                path: (*path).clone(),
                label,
                split: if is_train[i] { Split::Train } else { Split::Test },
            });
        }
    }
    Ok(Manifest {
        entries,
        classes: classes.clone(),
        seed,
        train_fraction,
    })
}

impl Manifest {
    /// Per-class `(train, test)` counts.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        let mut c = vec![(0, 0); self.classes.len()];
        for e in &self.entries {
            match e.split {
                Split::Train => c[e.label].0 += 1,
                Split::Test => c[e.label].1 += 1,
                Split::Val => {}
            }
        }
        c
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Moves a stratified `fraction` of the training entries into `Val`.
    pub fn carve_validation(&mut self, fraction: Fraction, seed: u64) -> Result<()> {
        let train: Vec<(PathBuf, usize)> = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Train)
            .map(|e| (e.path.clone(), e.label))
            .collect();
        // Keep `1 - fraction` for training by splitting with the complement.
        let keep = Fraction::new(fraction.den - fraction.num, fraction.den)?;
        let sub = stratified_split(&train, &self.classes, keep, seed)?;
        let val: std::collections::HashSet<&PathBuf> = sub
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .map(|e| &e.path)
            .collect();
        for e in &mut self.entries {
            if e.split == Split::Train && val.contains(&e.path) {
                e.split = Split::Val;
            }
        }
        Ok(())
    }

    /// CSV text: `# seed=<u64> fraction=<decimal>`, a `# classes=` line, then
    /// `path,label,split` rows with LF endings.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = Vec::new();
        writeln!(out, "# seed={} fraction={}", self.seed, self.train_fraction).expect("vec write");
        writeln!(out, "# classes={}", self.classes.names().join(",")).expect("vec write");
        {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut out);
            for e in &self.entries {
                if e.split == Split::Val {
                    continue;
                }
                let path = e
                    .path
                    .to_str()
                    .ok_or_else(|| Error::Data(format!("non UTF-8 path {}", e.path.display())))?;
                w.write_record([path, &e.label.to_string(), e.split.as_str()])
                    .map_err(|e| Error::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::Data(e.to_string()))?;
        }
        String::from_utf8(out).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut fraction = None;
        let mut classes = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(names) = body.strip_prefix("classes=") {
                classes = Some(ClassTable::new(names.split(',').map(str::to_string).collect())?);
                continue;
            }
            for kv in body.split_whitespace() {
                match kv.split_once('=') {
                    Some(("seed", v)) => {
                        seed = Some(v.parse().map_err(|_| Error::Data(format!("bad seed {v:?}")))?)
                    }
                    Some(("fraction", v)) => fraction = Some(v.parse()?),
                    _ => {}
                }
            }
        }
        let (Some(seed), Some(train_fraction)) = (seed, fraction) else {
            return Err(Error::Data("manifest header must carry seed= and fraction=".into()));
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        let mut max_label = 0;
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Data(format!("manifest row: {e}")))?;
            if rec.len() != 3 {
                return Err(Error::Data(format!("manifest row needs 3 fields, got {}", rec.len())));
            }
            let label: usize = rec[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad label {:?}", &rec[1])))?;
            max_label = max_label.max(label);
            entries.push(ManifestEntry {
                path: PathBuf::from(&rec[0]),
                label,
                split: rec[2].parse()?,
            });
        }
        let classes = match classes {
            Some(c) => c,
            None if max_label < CLASS_NAMES.len() => ClassTable::canonical(),
            None => ClassTable::new((0..=max_label).map(|i| format!("class{i}")).collect())?,
        };
        if max_label >= classes.len() && !entries.is_empty() {
            return Err(Error::Data(format!("label {max_label} outside the class table")));
        }
        Ok(Manifest {
            entries,
            classes,
            seed,
            train_fraction,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }
}

/// Deterministic per-epoch permutation of `0..len`.
pub fn epoch_order(len: usize, epoch: u64, base_seed: u64) -> Vec<usize> {
    let mix = base_seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

/// In-memory copy of a split's decoded images (8-bit planes).
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub paths: Vec<PathBuf>,
    pub labels: Vec<usize>,
    bytes: Vec<Vec<u8>>,
}

impl ImageSet {
    /// Decodes every entry of `split`; decoding may run in parallel but the
    /// result keeps manifest order.
    pub fn load(manifest: &Manifest, split: Split, resize: bool, exec: Exec) -> Result<Self> {
        let entries = manifest.split_entries(split);
        let decoded = exec::map_range(exec, 0..entries.len(), |i| decode_planar(&entries[i].path, resize));
        let bytes = decoded.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(ImageSet {
            paths: entries.iter().map(|e| e.path.clone()).collect(),
            labels: entries.iter().map(|e| e.label).collect(),
            bytes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Stacks the images at `indices` into `[b, 3, 100, 100]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        let mut data = vec![T::ZERO; indices.len() * IMAGE_LEN];
        for (slot, &i) in data.chunks_mut(IMAGE_LEN).zip(indices) {
            normalize_bytes(&self.bytes[i], slot);
        }
        Ok(Batch {
            images: Tensor::from_vec(vec![indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    /// Epoch batches in the order given by [`epoch_order`].
    pub fn batches<T: Scalar>(
        &self,
        batch_size: usize,
        epoch: u64,
        base_seed: u64,
    ) -> Result<impl Iterator<Item = Result<Batch<T>>> + '_> {
        if batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        let order = epoch_order(self.len(), epoch, base_seed);
        Ok((0..self.len().div_ceil(batch_size)).map(move |b| {
            let end = ((b + 1) * batch_size).min(order.len());
            self.batch(&order[b * batch_size..end])
        }))
    }
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Positions in the originating [`ImageSet`].
    pub indices: Vec<usize>,
}

/// Streams batches straight from disk, loading each image when its batch is
/// assembled.
pub fn batches<'a, T: Scalar>(
    manifest: &'a Manifest,
    split: Split,
    batch_size: usize,
    epoch: u64,
    base_seed: u64,
    exec: Exec,
) -> Result<impl Iterator<Item = Result<(Tensor<T>, Vec<usize>)>> + 'a> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be at least 1".into()));
    }
    let entries = manifest.split_entries(split);
    let order = epoch_order(entries.len(), epoch, base_seed);
    let chunks: Vec<Vec<&ManifestEntry>> = order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| entries[i]).collect())
        .collect();
    Ok(chunks.into_iter().map(move |chunk| {
        let loaded = exec::map_range(exec, 0..chunk.len(), |i| decode_planar(&chunk[i].path, false));
        let mut data = vec![T::ZERO; chunk.len() * IMAGE_LEN];
        for (slot, bytes) in data.chunks_mut(IMAGE_LEN).zip(loaded) {
            normalize_bytes(&bytes?, slot);
        }
        let images = Tensor::from_vec(vec![chunk.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)?;
        Ok((images, chunk.iter().map(|e| e.label).collect()))
    }))
}

/// Per-class counts of a label list.
pub fn class_histogram(labels: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &l in labels {
        if l < k {
            h[l] += 1;
        }
    }
    h
}

/// Writes an 8-bit RGB PNG of a `[3, 100, 100]`-style plane buffer. Used to
/// materialise synthetic datasets.
pub fn write_png_planar(path: &Path, planes: &[u8], width: u32, height: u32) -> Result<()> {
    let plane = (width * height) as usize;
    if planes.len() != 3 * plane {
        return Err(Error::Data(format!("expected {} bytes, got {}", 3 * plane, planes.len())));
    }
    let mut interleaved = Vec::with_capacity(planes.len());
    for i in 0..plane {
        for c in 0..3 {
            interleaved.push(planes[c * plane + i]);
        }
    }
    let img = image::RgbImage::from_raw(width, height, interleaved)
        .ok_or_else(|| Error::Data("buffer does not match image size".into()))?;
    img.save(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Builds a separable synthetic dataset: `per_class` images for each of the
/// canonical classes, with class-dependent mean intensity plus noise. Returns
/// the root directory layout written under `root`.
pub fn write_synthetic_dataset(root: &Path, per_class: usize, seed: u64) -> Result<Vec<(PathBuf, usize)>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = [50.0, 128.0, 205.0];
    let mut items = Vec::new();
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let planes: Vec<u8> = (0..IMAGE_LEN)
                .map(|_| {
                    let v: f64 = means[label] + rng.random_range(-30.0..30.0);
                    v.clamp(0.0, 255.0).round() as u8
                })
                .collect();
            let path = dir.join(format!("img{i:03}.png"));
            write_png_planar(&path, &planes, IMAGE_SIDE as u32, IMAGE_SIDE as u32)?;
            *counts.entry(label).or_default() += 1;
            items.push((path, label));
        }
    }
    Ok(items)
}
