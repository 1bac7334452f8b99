//! Labelled samples and the on-disk dataset layout.
//!
//! A dataset directory holds `index.json` plus one HTNT tensor per sample:
//! `[n, m, P, P, c]` word pixels or `[n, m, d]` precomputed features.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Input, TiledImage, TilingConfig};
use crate::tensor::{io, Tensor};

pub const INDEX: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleData {
    Words(TiledImage),
    Features(Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub data: SampleData,
    /// Ground-truth region cells at bag resolution (`n`), if known.
    pub bag_mask: Option<Vec<bool>>,
    /// Ground-truth region cells at word resolution (`n*m`, bag-major), if known.
    pub word_mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn input(&self) -> Input<'_> {
        match &self.data {
            SampleData::Words(t) => Input::Words(t),
            SampleData::Features(f) => Input::Features(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    pub file: String,
    pub label: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bag_mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_mask: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub tiling: TilingConfig,
    pub classes: usize,
    /// `"words"` or `"features"`.
    pub kind: String,
    pub samples: Vec<IndexEntry>,
    /// Generator settings, when the data is synthetic.
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tiling: TilingConfig,
    pub classes: usize,
    pub samples: Vec<Sample>,
    pub generator: serde_json::Value,
}

fn to_bits(mask: &Option<Vec<bool>>) -> Option<Vec<u8>> {
    mask.as_ref().map(|m| m.iter().map(|&b| b as u8).collect())
}

fn from_bits(bits: &Option<Vec<u8>>, len: usize, what: &str) -> Result<Option<Vec<bool>>> {
    match bits {
        None => Ok(None),
        Some(b) if b.len() == len && b.iter().all(|&v| v <= 1) => Ok(Some(b.iter().map(|&v| v == 1).collect())),
        Some(b) => Err(Error::Format(format!("{what} mask has {} entries of 0/1, expected {len}", b.len()))),
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        let mut kind = "words";
        for s in &self.samples {
            let file = format!("{}.htnt", s.id);
            let t = match &s.data {
                SampleData::Words(w) => &w.words,
                SampleData::Features(f) => {
                    kind = "features";
                    f
                }
            };
            io::save(dir.join(&file), t)?;
            entries.push(IndexEntry {
                id: s.id.clone(),
                file,
                label: s.label,
                split: s.split,
                bag_mask: to_bits(&s.bag_mask),
                word_mask: to_bits(&s.word_mask),
            });
        }
        let index = DatasetIndex {
            tiling: self.tiling,
            classes: self.classes,
            kind: kind.into(),
            samples: entries,
            generator: self.generator.clone(),
        };
        let path = dir.join(INDEX);
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(INDEX);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        let t = index.tiling;
        let mut samples = Vec::with_capacity(index.samples.len());
        for e in &index.samples {
            if e.file.contains('/') || e.file.contains('\\') || e.file.starts_with("..") {
                return Err(Error::Format(format!("sample file `{}` escapes the dataset", e.file)));
            }
            if e.label >= index.classes {
                return Err(Error::Index { what: "label", index: e.label, bound: index.classes });
            }
            let tensor = io::load(dir.join(&e.file))?;
            let data = match index.kind.as_str() {
                "words" => SampleData::Words(TiledImage::from_words(tensor, t)?),
                "features" => {
                    if tensor.dims() != [t.n, t.m, t.d] {
                        return Err(Error::shape("feature sample", tensor.dims(), &[t.n, t.m, t.d]));
                    }
                    SampleData::Features(tensor)
                }
                other => return Err(Error::Format(format!("unknown dataset kind `{other}`"))),
            };
            samples.push(Sample {
                id: e.id.clone(),
                label: e.label,
                split: e.split,
                data,
                bag_mask: from_bits(&e.bag_mask, t.n, "bag")?,
                word_mask: from_bits(&e.word_mask, t.n * t.m, "word")?,
            });
        }
        Ok(Self {
            tiling: t,
            classes: index.classes,
            samples,
            generator: index.generator,
        })
    }
}
