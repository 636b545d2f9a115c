//! Line-oriented dataset files.
//!
//! A split file starts with a header record carrying the split name, the
//! example count and the answer vocabulary, followed by one JSON example per
//! line. The feature file has the same shape with one image per line. Reals
//! are written in shortest round-trip decimal form, so reading a written
//! file reproduces every value bit for bit.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FeatureStore, ImageFeatures, SplitName, VqaExample, World, WorldConfig};
use crate::error::{Error, Result};

pub const FEATURES_FILE: &str = "features.jsonl";
pub const WORLD_FILE: &str = "world.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitHeader {
    split: SplitName,
    num_examples: usize,
    answer_vocabulary: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeaturesHeader {
    num_images: usize,
    objects_per_image: usize,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldManifest {
    format_version: u32,
    tool_version: String,
    seed: u64,
    config_hash: String,
    vocab_hash: String,
    config: WorldConfig,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_line<T: Serialize>(w: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

/// Reads a header record followed by `count(header)` body records.
fn read_records<H, T>(path: &Path, count: impl Fn(&H) -> usize) -> Result<(H, Vec<T>)>
where
    H: DeserializeOwned,
    T: DeserializeOwned,
{
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |record: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        record,
        message,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: H = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, format!("bad header: {e}")))?
        }
        None => return Err(parse_err(1, "empty file".into())),
    };
    let expected = count(&header);
    let mut out = Vec::with_capacity(expected);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(record);
    }
    if out.len() != expected {
        return Err(parse_err(
            out.len() + 2,
            format!("expected {expected} records, found {} (truncated file?)", out.len()),
        ));
    }
    Ok((header, out))
}

pub fn write_split(split: &DatasetSplit, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let header = SplitHeader {
        split: split.name,
        num_examples: split.examples.len(),
        answer_vocabulary: split.answer_vocabulary.clone(),
    };
    write_line(&mut w, path, &header)?;
    for ex in &split.examples {
        write_line(&mut w, path, ex)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let (header, examples): (SplitHeader, Vec<VqaExample>) =
        read_records(path, |h: &SplitHeader| h.num_examples)?;
    let split = DatasetSplit {
        name: header.split,
        examples,
        answer_vocabulary: header.answer_vocabulary,
    };
    split.validate()?;
    Ok(split)
}

pub fn write_features(features: &FeatureStore, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let first = features.images().first();
    let header = FeaturesHeader {
        num_images: features.len(),
        objects_per_image: first.map_or(0, ImageFeatures::num_objects),
        feature_dim: first.map_or(0, ImageFeatures::dim),
    };
    write_line(&mut w, path, &header)?;
    for img in features.images() {
        write_line(&mut w, path, img)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureStore> {
    let (header, images): (FeaturesHeader, Vec<ImageFeatures>) =
        read_records(path, |h: &FeaturesHeader| h.num_images)?;
    for (i, img) in images.iter().enumerate() {
        let ok = img.vectors.len() == header.objects_per_image
            && img.vectors.iter().all(|r| r.len() == header.feature_dim);
        if !ok {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                record: i + 2,
                message: format!(
                    "image {} is not {}x{}",
                    img.image_id, header.objects_per_image, header.feature_dim
                ),
            });
        }
    }
    FeatureStore::new(images)
}

/// Writes `<dir>/<split>.jsonl` and `<dir>/features.jsonl`.
pub fn write_dataset(split: &DatasetSplit, features: &FeatureStore, dir: &Path) -> Result<()> {
    write_split(split, &dir.join(split.name.file_name()))?;
    write_features(features, &dir.join(FEATURES_FILE))
}

pub fn read_dataset(dir: &Path, name: SplitName) -> Result<(DatasetSplit, FeatureStore)> {
    let split = read_split(&dir.join(name.file_name()))?;
    let features = read_features(&dir.join(FEATURES_FILE))?;
    features.covers(&split)?;
    Ok((split, features))
}

pub fn write_world(world: &World, dir: &Path) -> Result<()> {
    let manifest = WorldManifest {
        format_version: 1,
        tool_version: crate::TOOL_VERSION.to_string(),
        seed: world.config.seed,
        config_hash: crate::cas::config_hash(&world.config)?,
        vocab_hash: world.vocab_hash(),
        config: world.config.clone(),
    };
    let path = dir.join(WORLD_FILE);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_features(&world.features, &dir.join(FEATURES_FILE))?;
    for name in SplitName::ALL {
        write_split(world.split(name), &dir.join(name.file_name()))?;
    }
    Ok(())
}

pub fn read_world(dir: &Path) -> Result<World> {
    let path = dir.join(WORLD_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: WorldManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        record: 1,
        message: e.to_string(),
    })?;
    let features = read_features(&dir.join(FEATURES_FILE))?;
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let split = read_split(&dir.join(name.file_name()))?;
        if split.name != name {
            return Err(Error::Validation(format!(
                "{} holds split `{}`",
                name.file_name(),
                split.name
            )));
        }
        if split.vocab_hash() != manifest.vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: manifest.vocab_hash.clone(),
                found: split.vocab_hash(),
            });
        }
        features.covers(&split)?;
        splits.push(split);
    }
    let val_iid = splits.pop().expect("three splits");
    let test_shifted = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(World {
        config: manifest.config,
        features,
        train,
        test_shifted,
        val_iid,
    })
}
