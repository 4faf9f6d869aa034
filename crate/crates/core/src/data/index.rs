use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::tensor::RngStream;

const SPLIT_HEADER: &str = "htxc-split 1";
const IMAGE_EXTENSIONS: [&str; 6] = ["png", "tif", "tiff", "jpg", "jpeg", "bmp"];
/// Edge length of the tiles in the reference texture collection.
pub const NATIVE_TILE: u32 = 150;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    /// Path relative to the dataset root, `/`-separated.
    pub relpath: String,
    pub class: usize,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    /// Sorted by class, then path.
    pub entries: Vec<Entry>,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.relpath)
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }

    pub fn split_entries(&self, split: Split) -> Vec<&Entry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    /// `count[class][split]`.
    pub fn split_counts(&self) -> Vec<[usize; 3]> {
        let mut counts = vec![[0; 3]; self.class_names.len()];
        for e in &self.entries {
            if let Some(s) = e.split {
                counts[e.class][s as usize] += 1;
            }
        }
        counts
    }

    pub fn summary(&self) -> String {
        let totals = self.split_counts().iter().fold([0; 3], |acc, c| [acc[0] + c[0], acc[1] + c[1], acc[2] + c[2]]);
        format!(
            "{} images in {} classes: train {} / val {} / test {}",
            self.len(),
            self.class_names.len(),
            totals[0],
            totals[1],
            totals[2]
        )
    }

    /// Split file: a versioned header, the seed, class names, then one
    /// `relpath<TAB>split` line per file.
    pub fn to_split_file(&self) -> String {
        let mut out = format!("{SPLIT_HEADER}\n");
        if let Some(seed) = self.seed {
            writeln!(out, "#seed\t{seed}").unwrap();
        }
        writeln!(out, "#classes\t{}", self.class_names.join("\t")).unwrap();
        for e in &self.entries {
            let split = e.split.map_or("none", Split::as_str);
            writeln!(out, "{}\t{split}", e.relpath).unwrap();
        }
        out
    }

    pub fn write_split_file(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_split_file())?)
    }

    /// Reads a split file; classes come from the header, each entry's class
    /// from its top-level directory.
    pub fn read_split_file(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(SPLIT_HEADER) {
            return Err(Error::Dataset(format!("{} is not a split file", path.display())));
        }
        let mut seed = None;
        let mut class_names = Vec::new();
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::Dataset(format!("{}:{}: malformed line {line:?}", path.display(), n + 2));
            if let Some(rest) = line.strip_prefix("#seed\t") {
                seed = Some(rest.parse().map_err(|_| bad())?);
            } else if let Some(rest) = line.strip_prefix("#classes\t") {
                class_names = rest.split('\t').map(str::to_owned).collect();
            } else if !line.is_empty() {
                let (relpath, split) = line.rsplit_once('\t').ok_or_else(bad)?;
                let dir = relpath.split('/').next().unwrap_or_default();
                let class = class_names.iter().position(|c| c == dir).ok_or_else(bad)?;
                let split = if split == "none" { None } else { Some(Split::parse(split)?) };
                entries.push(Entry {
                    relpath: relpath.to_owned(),
                    class,
                    split,
                });
            }
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            class_names,
            entries,
            seed,
            warnings: Vec::new(),
        })
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Indexes `root/<class>/**/*.{png,tif,jpg,...}`; classes are the sorted
/// subdirectory names. Files whose header cannot be decoded are skipped and
/// reported in `warnings`.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }

    let mut class_names = Vec::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    let mut sizes: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for dir in &class_dirs {
        let class = class_names.len();
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files = Vec::new();
        collect_files(dir, &mut files)?;
        files.sort();
        let mut kept = 0;
        for f in files {
            match image::image_dimensions(&f) {
                Ok(dims) => {
                    *sizes.entry(dims).or_default() += 1;
                    entries.push(Entry {
                        relpath: relative(root, &f),
                        class,
                        split: None,
                    });
                    kept += 1;
                }
                Err(e) => warnings.push(format!("skipped {}: {e}", f.display())),
            }
        }
        if kept == 0 {
            return Err(Error::Dataset(format!("class directory {} has no readable images", dir.display())));
        }
        class_names.push(name);
    }
    for (&(w, h), &n) in &sizes {
        if (w, h) != (NATIVE_TILE, NATIVE_TILE) {
            warnings.push(format!("{n} images are {w}x{h} rather than {NATIVE_TILE}x{NATIVE_TILE}"));
        }
    }
    if class_names.len() != super::DEFAULT_CLASS_COUNT {
        warnings.push(format!(
            "found {} classes, expected {}",
            class_names.len(),
            super::DEFAULT_CLASS_COUNT
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        class_names,
        entries,
        seed: None,
        warnings,
    })
}

/// Per-class counts for `n` items: train and val rounded, test takes the rest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

/// Shuffles each class with a seeded stream, then slices it contiguously
/// into train, validation and test.
pub fn stratified_split(index: &DatasetIndex, ratios: [f64; 3], seed: u64) -> Result<DatasetIndex> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let mut out = index.clone();
    out.seed = Some(seed);
    for class in 0..index.class_names.len() {
        let mut members: Vec<usize> = (0..out.entries.len()).filter(|&i| out.entries[i].class == class).collect();
        if members.len() < 5 {
            return Err(Error::Dataset(format!(
                "class {} has {} images, at least 5 are needed to stratify",
                index.class_names[class],
                members.len()
            )));
        }
        members.shuffle(&mut RngStream::new(seed, "split", 0, class as u64).rng());
        let [train, val, _] = split_sizes(members.len(), ratios);
        for (k, &i) in members.iter().enumerate() {
            out.entries[i].split = Some(match k {
                k if k < train => Split::Train,
                k if k < train + val => Split::Val,
                _ => Split::Test,
            });
        }
    }
    Ok(out)
}
