//! Dataset ingestion, class-capped splitting, square slicing, low-data
//! subsets and a procedural dataset for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{load_image, save_ppm, Image};
use crate::rng::{derive_seed, rng_from};

/// File extensions accepted as images.
pub const IMAGE_EXTENSIONS: [&str; 2] = ["ppm", "png"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub path: PathBuf,
    pub class_id: usize,
    /// Items sharing a group key always land in the same split.
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// All image files below `root`, in sorted path order.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Input(format!("image directory {} does not exist", root.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for path in sorted_entries(&dir)?.into_iter().rev() {
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl LabeledDataset {
    /// Reads `root/<class_name>/<image files>`; classes are numbered in
    /// sorted name order.
    pub fn from_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::Input(format!("dataset directory {} does not exist", root.display())));
        }
        let mut class_names = Vec::new();
        let mut items = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let class_id = class_names.len();
            let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)).collect();
            if files.is_empty() {
                continue;
            }
            class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            items.extend(files.into_iter().map(|path| Item { path, class_id, group: None }));
        }
        if class_names.is_empty() {
            return Err(Error::Input(format!("no class folders with images under {}", root.display())));
        }
        Ok(LabeledDataset { class_names, items })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.items.iter().for_each(|i| counts[i.class_id] += 1);
        counts
    }

    /// Assigns group keys from file names: the part of the stem before the
    /// first `sep`. Files without `sep` stay ungrouped.
    pub fn group_by_stem_prefix(&mut self, sep: char) {
        for item in &mut self.items {
            let stem = item.path.file_stem().unwrap_or_default().to_string_lossy();
            item.group = stem.split_once(sep).map(|(g, _)| g.to_string());
        }
    }
}

/// Split tag per item of a dataset, parallel to `LabeledDataset::items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub assignments: Vec<Split>,
}

impl SplitSpec {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == split).collect()
    }

    /// `(train, val, test)` counts per class.
    pub fn class_counts(&self, items: &[Item], num_classes: usize) -> Vec<[usize; 3]> {
        let mut counts = vec![[0; 3]; num_classes];
        for (item, split) in items.iter().zip(&self.assignments) {
            counts[item.class_id][*split as usize] += 1;
        }
        counts
    }
}

/// Fraction of each class held out for test before capping.
pub const BASE_TEST_FRACTION: f64 = 0.20;
/// Share of the capped train+val pool that goes to validation.
pub const VAL_FRACTION: f64 = 0.16;

fn base_test(n: usize) -> usize {
    ((n as f64 * BASE_TEST_FRACTION - 1e-9).ceil() as usize).max(1)
}

/// Per-class target sizes under the capping rule, returned as
/// `(train, val, test)`. Every size must be at least 3.
pub fn capped_targets(class_sizes: &[usize], cap_factor: usize) -> Vec<(usize, usize, usize)> {
    let base_test: Vec<usize> = class_sizes.iter().map(|&n| base_test(n)).collect();
    let pools: Vec<usize> = class_sizes.iter().zip(&base_test).map(|(n, t)| n - t).collect();
    let cap = cap_factor * pools.iter().copied().min().unwrap_or(0);
    class_sizes
        .iter()
        .zip(&pools)
        .map(|(&n, &pool)| {
            let tv = pool.min(cap);
            let val = ((tv as f64 * VAL_FRACTION).round() as usize).clamp(1, tv - 1);
            (tv - val, val, n - tv)
        })
        .collect()
}

/// Seeded train/val/test split where no class's train+val pool exceeds
/// `cap_factor` times the smallest class's pool; the excess goes to test.
pub fn split_capped(dataset: &LabeledDataset, cap_factor: usize, use_groups: bool, seed: u64) -> Result<SplitSpec> {
    if cap_factor == 0 {
        return Err(Error::Config("cap factor must be at least 1".into()));
    }
    let counts = dataset.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n < 3 {
            return Err(Error::Split(format!(
                "class `{}` has {n} items; at least 3 are needed",
                dataset.class_names[c]
            )));
        }
    }
    let targets = capped_targets(&counts, cap_factor);
    let mut assignments = vec![Split::Test; dataset.items.len()];
    // units are single items or whole groups, shuffled per class
    let mut units_by_class: Vec<Vec<Vec<usize>>> = vec![Vec::new(); counts.len()];
    let mut grouped: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        match (&item.group, use_groups) {
            (Some(g), true) => grouped.entry((item.class_id, g.as_str())).or_default().push(i),
            _ => units_by_class[item.class_id].push(vec![i]),
        }
    }
    for ((c, _), members) in grouped {
        units_by_class[c].push(members);
    }
    let mut tv_sizes = vec![0usize; counts.len()];
    let mut train_units: Vec<Vec<Vec<usize>>> = vec![Vec::new(); counts.len()];
    let mut val_units: Vec<Vec<Vec<usize>>> = vec![Vec::new(); counts.len()];
    for (c, mut units) in units_by_class.into_iter().enumerate() {
        units.sort();
        units.shuffle(&mut rng_from(derive_seed(seed, c as u64)));
        let (train_t, val_t, _) = targets[c];
        let held_out = base_test(counts[c]);
        let (mut test, mut val, mut train) = (0, 0, 0);
        for unit in units {
            let size = unit.len();
            let split = if test < held_out {
                test += size;
                Split::Test
            } else if val < val_t {
                val += size;
                val_units[c].push(unit.clone());
                Split::Val
            } else if train + size <= train_t {
                train += size;
                train_units[c].push(unit.clone());
                Split::Train
            } else {
                test += size;
                Split::Test
            };
            unit.iter().for_each(|&i| assignments[i] = split);
        }
        tv_sizes[c] = train + val;
    }
    // group granularity can leave a small class short or overshoot val;
    // move train units, then val units, of oversized classes to test
    loop {
        let min_tv = tv_sizes.iter().copied().min().unwrap_or(0);
        if min_tv == 0 {
            let c = tv_sizes.iter().position(|&t| t == 0).unwrap_or(0);
            return Err(Error::Split(format!(
                "groups of class `{}` are too coarse to leave any train or validation items",
                dataset.class_names[c]
            )));
        }
        let limit = cap_factor * min_tv;
        let Some(c) = (0..tv_sizes.len()).find(|&c| tv_sizes[c] > limit) else {
            break;
        };
        let unit = match train_units[c].pop() {
            Some(u) => u,
            None => val_units[c].pop().expect("train+val is nonempty"),
        };
        tv_sizes[c] -= unit.len();
        unit.iter().for_each(|&i| assignments[i] = Split::Test);
    }
    Ok(SplitSpec { assignments })
}

/// Writes `path,class_id,split` rows. Paths under the manifest's directory
/// are stored relative to it.
pub fn write_manifest(path: &Path, dataset: &LabeledDataset, split: &SplitSpec) -> Result<()> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    }
    let csv_err = |e: csv::Error| Error::Input(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["path", "class_id", "split"]).map_err(csv_err)?;
    for (item, s) in dataset.items.iter().zip(&split.assignments) {
        let rel = item.path.strip_prefix(&base).unwrap_or(&item.path);
        w.write_record([rel.to_string_lossy().as_ref(), &item.class_id.to_string(), &s.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest back. Class names come from each item's parent folder.
pub fn read_manifest(path: &Path) -> Result<(LabeledDataset, SplitSpec)> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let bad = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut items = Vec::new();
    let mut assignments = Vec::new();
    let mut names: BTreeMap<usize, String> = BTreeMap::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 3 {
            return Err(bad(format!("row {} has {} fields, expected 3", line + 2, record.len())));
        }
        let rel = PathBuf::from(&record[0]);
        let path = if rel.is_absolute() { rel } else { base.join(rel) };
        let class_id: usize = record[1]
            .parse()
            .map_err(|_| bad(format!("row {}: bad class id `{}`", line + 2, &record[1])))?;
        let class = path
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("class_{class_id}"));
        names.entry(class_id).or_insert(class);
        assignments.push(record[2].parse::<Split>()?);
        items.push(Item { path, class_id, group: None });
    }
    let num_classes = names.keys().next_back().map_or(0, |m| m + 1);
    let class_names = (0..num_classes)
        .map(|c| names.get(&c).cloned().unwrap_or_else(|| format!("class_{c}")))
        .collect();
    Ok((LabeledDataset { class_names, items }, SplitSpec { assignments }))
}

/// Square-slicing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceSpec {
    pub side: usize,
    /// Largest allowed overlap between neighbours as a fraction of the side.
    pub max_overlap: f64,
}

impl SliceSpec {
    pub fn new(side: usize, max_overlap: f64) -> Result<Self> {
        if side == 0 || !(0.0..=0.10).contains(&max_overlap) {
            return Err(Error::Config(format!(
                "slice side must be positive and overlap in [0, 0.10], got {side} and {max_overlap}"
            )));
        }
        Ok(SliceSpec { side, max_overlap })
    }

    /// Smallest stride that keeps neighbours within the overlap budget.
    pub fn min_stride(&self) -> usize {
        ((self.side as f64 * (1.0 - self.max_overlap)) - 1e-9).ceil() as usize
    }

    /// Offsets of slices along an axis of length `len ≥ side`, centred.
    pub fn offsets(&self, len: usize) -> Vec<usize> {
        let free = len - self.side;
        let s_min = self.min_stride().max(1);
        let k = free / s_min + 1;
        if k == 1 {
            return vec![free / 2];
        }
        let stride = self.side.min(free / (k - 1));
        let start = (free - stride * (k - 1)) / 2;
        (0..k).map(|i| start + i * stride).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Sliced {
    pub slices: Vec<Image>,
    pub warning: Option<String>,
}

/// Cuts an image into a grid of `side×side` squares.
pub fn slice_square(img: &Image, spec: &SliceSpec) -> Sliced {
    let (h, w) = (img.height(), img.width());
    if h.min(w) < spec.side {
        return Sliced {
            slices: vec![img.center_square(spec.side)],
            warning: Some(format!(
                "{h}×{w} image is smaller than the {} px slice; used a resized centre crop",
                spec.side
            )),
        };
    }
    let ys = spec.offsets(h);
    let xs = spec.offsets(w);
    let covered = |offs: &[usize]| offs.last().map_or(0, |l| l + spec.side) - offs[0];
    let warning = (covered(&ys) < h || covered(&xs) < w).then(|| {
        format!(
            "{h}×{w} image: slices cover {}×{} px; the rest would need more than {:.0}% overlap",
            covered(&ys),
            covered(&xs),
            spec.max_overlap * 100.0
        )
    });
    let slices = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .map(|(y, x)| img.crop(y, x, spec.side, spec.side).expect("slice inside image"))
        .collect();
    Sliced { slices, warning }
}

/// Slices every image below `src` into `dst`, mirroring the folder tree and
/// naming outputs `<stem>_sNN.ppm`. Returns the number of slices and any
/// warnings.
pub fn slice_tree(src: &Path, dst: &Path, spec: &SliceSpec) -> Result<(usize, Vec<String>)> {
    let mut count = 0;
    let mut warnings = Vec::new();
    for path in list_images(src)? {
        let img = load_image(&path)?;
        let out = slice_square(&img, spec);
        if let Some(w) = out.warning {
            warnings.push(format!("{}: {w}", path.display()));
        }
        let rel = path.strip_prefix(src).expect("listed below src");
        let stem = rel.file_stem().unwrap_or_default().to_string_lossy();
        let dir = dst.join(rel.parent().unwrap_or(Path::new("")));
        for (i, s) in out.slices.iter().enumerate() {
            save_ppm(s, dir.join(format!("{stem}_s{i:02}.ppm")))?;
            count += 1;
        }
    }
    Ok((count, warnings))
}

/// Stratified subset keeping `ceil(fraction·n_c)` items of every class, in
/// the original order.
pub fn subset_fraction(items: &[Item], fraction: f64, seed: u64) -> Result<Vec<Item>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must be in (0, 1], got {fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    items.iter().enumerate().for_each(|(i, it)| by_class.entry(it.class_id).or_default().push(i));
    let mut keep = BTreeSet::new();
    for (c, mut idx) in by_class {
        let k = ((idx.len() as f64 * fraction) - 1e-9).ceil().max(1.0) as usize;
        idx.shuffle(&mut rng_from(derive_seed(seed, c as u64)));
        keep.extend(idx.into_iter().take(k));
    }
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}

/// Procedural class-distinct texture: an oriented grating whose angle,
/// frequency and tint depend on the class, with random phase, contrast
/// and pixel noise per image.
pub fn synth_image(class_id: usize, num_classes: usize, size: usize, rng: &mut crate::rng::Rng) -> Image {
    use std::f64::consts::PI;
    let angle = PI * class_id as f64 / num_classes as f64;
    let freq = 2.0 + (class_id % 3) as f64;
    let hue = class_id as f64 / num_classes as f64;
    let tint = [
        0.5 + 0.4 * (2.0 * PI * hue).cos(),
        0.5 + 0.4 * (2.0 * PI * (hue + 1.0 / 3.0)).cos(),
        0.5 + 0.4 * (2.0 * PI * (hue + 2.0 / 3.0)).cos(),
    ];
    let phase = rng.gen_range(0.0..2.0 * PI);
    let contrast = rng.gen_range(0.25..0.45);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut img = Image::from_fn(size, size, |y, x| {
        let u = (x as f64 * ca + y as f64 * sa) / size as f64;
        let wave = (2.0 * PI * freq * u + phase).sin();
        tint.map(|t| t + contrast * wave)
    });
    img.data_mut().iter_mut().for_each(|v| *v += noise.sample(rng));
    img.clamp01();
    img
}

/// In-memory synthetic corpus, `per_class` images of each class in class
/// order.
pub fn synth_images(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<Vec<(Image, usize)>> {
    if num_classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {num_classes}")));
    }
    Ok((0..num_classes)
        .flat_map(|c| {
            let mut rng = rng_from(derive_seed(seed, c as u64));
            (0..per_class)
                .map(|_| (synth_image(c, num_classes, size, &mut rng), c))
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Writes a synthetic corpus as `root/class_XX/img_YYYY.ppm`.
pub fn synth_dataset(root: &Path, num_classes: usize, per_class: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    let images = synth_images(num_classes, per_class, size, seed)?;
    let width = (num_classes - 1).to_string().len().max(2);
    let class_names: Vec<String> = (0..num_classes).map(|c| format!("class_{c:0width$}")).collect();
    let mut items = Vec::with_capacity(images.len());
    for (i, (img, c)) in images.iter().enumerate() {
        let path = root.join(&class_names[*c]).join(format!("img_{:04}.ppm", i % per_class));
        save_ppm(img, &path)?;
        items.push(Item { path, class_id: *c, group: None });
    }
    Ok(LabeledDataset { class_names, items })
}

/// Loads items as `size×size` squares (centre crop, then resize).
pub fn load_items(items: &[Item], size: usize) -> Result<Vec<Image>> {
    items.iter().map(|it| Ok(load_image(&it.path)?.center_square(size))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset_with_sizes(sizes: &[usize]) -> LabeledDataset {
        let mut items = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            items.extend((0..n).map(|i| Item {
                path: PathBuf::from(format!("c{c}/{i}.ppm")),
                class_id: c,
                group: None,
            }));
        }
        LabeledDataset {
            class_names: (0..sizes.len()).map(|c| format!("c{c}")).collect(),
            items,
        }
    }

    #[test]
    fn capped_split_on_ten_forty_hundred() {
        // hand application: base test ceil(0.2n) = 2, 8, 20; pools 8, 32, 80;
        // cap 4·8 = 32; val round(0.16·tv) = 1, 5, 5
        assert_eq!(capped_targets(&[10, 40, 100], 4), vec![(7, 1, 2), (27, 5, 8), (27, 5, 68)]);
        let ds = dataset_with_sizes(&[10, 40, 100]);
        let split = split_capped(&ds, 4, false, 3).unwrap();
        assert_eq!(split.class_counts(&ds.items, 3), vec![[7, 1, 2], [27, 5, 8], [27, 5, 68]]);
        assert_eq!(split, split_capped(&ds, 4, false, 3).unwrap());
        assert_ne!(split, split_capped(&ds, 4, false, 4).unwrap());
    }

    #[test]
    fn equal_classes_route_nothing_extra() {
        let t = capped_targets(&[25, 25, 25], 1);
        assert!(t.iter().all(|&(tr, v, te)| tr + v == 20 && te == 5));
    }

    #[test]
    fn tiny_class_is_a_split_error() {
        let ds = dataset_with_sizes(&[5, 2]);
        let err = split_capped(&ds, 4, false, 0).unwrap_err();
        assert!(matches!(err, Error::Split(_)));
        assert!(err.to_string().contains("c1"));
    }

    #[test]
    fn groups_stay_together() {
        let mut ds = dataset_with_sizes(&[12, 30]);
        for (i, item) in ds.items.iter_mut().enumerate() {
            item.group = Some(format!("day{}", i / 3));
        }
        let split = split_capped(&ds, 4, true, 1).unwrap();
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for (item, s) in ds.items.iter().zip(&split.assignments) {
            let g = item.group.as_deref().unwrap();
            assert_eq!(*seen.entry(g).or_insert(*s), *s, "group {g} split");
        }
        let counts = split.class_counts(&ds.items, 2);
        let tv: Vec<usize> = counts.iter().map(|c| c[0] + c[1]).collect();
        assert!(tv.iter().all(|&t| t <= 4 * tv.iter().min().unwrap()));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&dir.path().join("data"), 3, 4, 8, 1).unwrap();
        let split = split_capped(&ds, 4, false, 0).unwrap();
        let path = dir.path().join("manifest.csv");
        write_manifest(&path, &ds, &split).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,class_id,split\n"));
        assert!(text.contains("data/class_00/img_0000.ppm,0,"));
        let (back, back_split) = read_manifest(&path).unwrap();
        assert_eq!(back.items.iter().map(|i| &i.path).collect::<Vec<_>>(), ds.items.iter().map(|i| &i.path).collect::<Vec<_>>());
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back_split, split);
    }

    #[test]
    fn from_dir_reads_class_folders() {
        let dir = tempfile::tempdir().unwrap();
        synth_dataset(dir.path(), 3, 5, 8, 2).unwrap();
        let ds = LabeledDataset::from_dir(dir.path()).unwrap();
        assert_eq!(ds.class_names, ["class_00", "class_01", "class_02"]);
        assert_eq!(ds.class_counts(), vec![5, 5, 5]);
        assert!(LabeledDataset::from_dir(dir.path().join("missing")).is_err());
    }

    #[test]
    fn slicing_examples() {
        let spec = SliceSpec::new(224, 0.0).unwrap();
        let big = Image::from_fn(448, 448, |y, x| [(y % 5) as f64 / 4.0, (x % 3) as f64 / 2.0, 0.0]);
        let out = slice_square(&big, &spec);
        assert_eq!(out.slices.len(), 4);
        assert!(out.warning.is_none());
        assert_eq!(out.slices[3], big.crop(224, 224, 224, 224).unwrap());

        let exact = Image::filled(224, 224, [0.1, 0.2, 0.3]);
        let one = slice_square(&exact, &spec);
        assert_eq!(one.slices, vec![exact]);

        // 400 wide: a second column would need (448 − 400)/224 ≈ 21% overlap
        let wide = Image::filled(224, 400, [0.5; 3]);
        let spec10 = SliceSpec::new(224, 0.10).unwrap();
        assert_eq!(spec10.min_stride(), 202);
        let out = slice_square(&wide, &spec10);
        assert_eq!(out.slices.len(), 1);
        assert!(out.warning.is_some());

        let small = Image::filled(100, 150, [0.2; 3]);
        let out = slice_square(&small, &spec10);
        assert_eq!((out.slices[0].height(), out.slices[0].width()), (224, 224));
        assert!(out.warning.is_some());
        assert!(SliceSpec::new(224, 0.2).is_err());
    }

    #[test]
    fn slice_tree_mirrors_layout() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        save_ppm(&Image::filled(16, 32, [0.4; 3]), src.join("a/b/pic.ppm")).unwrap();
        let (n, warnings) = slice_tree(&src, &dir.path().join("out"), &SliceSpec::new(16, 0.0).unwrap()).unwrap();
        assert_eq!(n, 2);
        assert!(warnings.is_empty());
        assert!(dir.path().join("out/a/b/pic_s00.ppm").exists());
        assert!(dir.path().join("out/a/b/pic_s01.ppm").exists());
    }

    #[test]
    fn subset_examples() {
        let ds = dataset_with_sizes(&[37, 30, 5]);
        assert_eq!(subset_fraction(&ds.items, 1.0, 0).unwrap(), ds.items);
        let sub = subset_fraction(&ds.items, 0.1, 0).unwrap();
        let per: Vec<usize> = (0..3).map(|c| sub.iter().filter(|i| i.class_id == c).count()).collect();
        assert_eq!(per, vec![4, 3, 1]);
        let other = subset_fraction(&ds.items, 0.1, 1).unwrap();
        assert_eq!(other.len(), sub.len());
        assert_ne!(other, sub);
        assert!(subset_fraction(&ds.items, 0.0, 0).is_err());
    }

    #[test]
    fn synthetic_corpus_is_learnable_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(dir.path(), 4, 32, 32, 7).unwrap();
        assert_eq!(ds.items.len(), 128);
        assert_eq!(ds.num_classes(), 4);
        let again = tempfile::tempdir().unwrap();
        synth_dataset(again.path(), 4, 32, 32, 7).unwrap();
        for item in &ds.items {
            let rel = item.path.strip_prefix(dir.path()).unwrap();
            assert_eq!(fs::read(&item.path).unwrap(), fs::read(again.path().join(rel)).unwrap());
        }

        // nearest centroid on raw pixels, centroids from even-indexed images
        let data = synth_images(4, 32, 32, 7).unwrap();
        let dim = 32 * 32 * 3;
        let mut centroids = vec![vec![0.0; dim]; 4];
        for (img, c) in data.iter().step_by(2) {
            centroids[*c].iter_mut().zip(img.data()).for_each(|(a, b)| *a += b / 16.0);
        }
        let correct = data
            .iter()
            .skip(1)
            .step_by(2)
            .filter(|(img, c)| {
                let dist = |m: &Vec<f64>| m.iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                (0..4).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap() == *c
            })
            .count();
        assert!(correct as f64 / 64.0 > 0.25, "{correct}/64");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn capped_split_respects_cap_and_partitions(sizes in prop::collection::vec(3usize..120, 2..7), seed in any::<u64>()) {
            let ds = dataset_with_sizes(&sizes);
            let split = split_capped(&ds, 4, false, seed).unwrap();
            prop_assert_eq!(split.assignments.len(), ds.items.len());
            let counts = split.class_counts(&ds.items, sizes.len());
            let tv: Vec<usize> = counts.iter().map(|c| c[0] + c[1]).collect();
            let min = *tv.iter().min().unwrap();
            prop_assert!(tv.iter().all(|&t| t <= 4 * min));
            for (c, n) in sizes.iter().enumerate() {
                prop_assert_eq!(counts[c].iter().sum::<usize>(), *n);
                prop_assert!(counts[c][0] >= 1 && counts[c][1] >= 1 && counts[c][2] >= 1);
            }
        }

        #[test]
        fn slices_respect_overlap_budget(h in 16usize..200, w in 16usize..200, side in 8usize..40, pct in 0usize..=10) {
            let spec = SliceSpec::new(side, pct as f64 / 100.0).unwrap();
            let img = Image::filled(h, w, [0.3; 3]);
            let out = slice_square(&img, &spec);
            prop_assert!(out.slices.iter().all(|s| s.height() == side && s.width() == side));
            if h >= side && w >= side {
                for offs in [spec.offsets(h), spec.offsets(w)] {
                    for pair in offs.windows(2) {
                        let overlap = side.saturating_sub(pair[1] - pair[0]);
                        prop_assert!(overlap as f64 <= side as f64 * spec.max_overlap + 1.0);
                        prop_assert!(pair[1] - pair[0] <= side);
                    }
                }
            }
        }
    }
}
