//! Polyvore outfit metadata joined with embedding bundles.
//!
//! Two JSON layouts are accepted. Both are a list of outfit records with a
//! `set_id` and an `items` list:
//!
//! * `maryland`: items carry an `index`; the item id is `{set_id}_{index}`.
//! * `polyvore_outfit` (also used for synthetic data): items carry an
//!   `item_id`.
//!
//! Description embeddings are keyed by `set_id`. An optional
//! `desc_tokens` string list labels the description rows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bundle::{read_bundle, EmbeddingBundle};
use super::{Dataset, OutfitSample, Split};
use crate::error::{Error, Result};
use crate::numgraph::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Maryland,
    PolyvoreOutfit,
    Synthetic,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: DataFormat,
    pub splits: BTreeMap<Split, PathBuf>,
    pub bundles: BundlePaths,
    #[serde(skip)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundlePaths {
    pub outfit_text: PathBuf,
    pub item_image: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Reads a manifest file, or `manifest.json` inside a directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn load_bundles(&self) -> Result<(EmbeddingBundle, EmbeddingBundle)> {
        let text = read_bundle(self.resolve(&self.bundles.outfit_text))?;
        let items = read_bundle(self.resolve(&self.bundles.item_image))?;
        Ok((text, items))
    }

    /// Loads one split.
    pub fn load_split(&self, split: Split, strict: bool) -> Result<(Dataset, JoinStats)> {
        let (text, items) = self.load_bundles()?;
        self.load_split_with(split, &text, &items, strict)
    }

    pub fn load_split_with(
        &self,
        split: Split,
        text: &EmbeddingBundle,
        items: &EmbeddingBundle,
        strict: bool,
    ) -> Result<(Dataset, JoinStats)> {
        let path = self
            .splits
            .get(&split)
            .ok_or_else(|| Error::Config(format!("manifest has no `{split}` split")))?;
        let (samples, stats) =
            load_polyvore(self.resolve(path), text, items, self.format, split, strict)?;
        Ok((Dataset::new(text.dim, samples)?, stats))
    }
}

/// Outcome of joining metadata with the bundles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinStats {
    pub outfits_seen: usize,
    pub loaded: usize,
    pub missing_items: usize,
    pub missing_text: usize,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawId {
    Str(String),
    Int(i64),
}

impl RawId {
    fn into_string(self) -> String {
        match self {
            RawId::Str(s) => s,
            RawId::Int(i) => i.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct RawItem {
    item_id: Option<RawId>,
    index: Option<RawId>,
}

#[derive(Deserialize)]
struct RawOutfit {
    set_id: RawId,
    items: Vec<RawItem>,
    desc_tokens: Option<Vec<String>>,
}

/// Joins the outfit records of one split with the two bundles. Outfits
/// with a missing item or description record are skipped with a warning,
/// or rejected when `strict`.
pub fn load_polyvore(
    outfits_json: impl AsRef<Path>,
    text: &EmbeddingBundle,
    items: &EmbeddingBundle,
    format: DataFormat,
    split: Split,
    strict: bool,
) -> Result<(Vec<OutfitSample>, JoinStats)> {
    let path = outfits_json.as_ref();
    if text.dim != items.dim {
        return Err(Error::DimMismatch {
            left: text.dim,
            right: items.dim,
            context: "outfit_text bundle vs item_image bundle".into(),
        });
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let outfits: Vec<RawOutfit> = serde_json::from_str(&raw).map_err(|e| Error::json(path, e))?;
    let text_idx = text.index()?;
    let item_idx = items.index()?;
    let mut stats = JoinStats::default();
    let mut samples = Vec::with_capacity(outfits.len());
    for o in outfits {
        stats.outfits_seen += 1;
        let set_id = o.set_id.into_string();
        match join_one(set_id, o.items, o.desc_tokens, format, split, text, items, &text_idx, &item_idx)
        {
            Ok(s) => samples.push(s),
            Err(Skip { reason, missing_text }) => {
                if strict {
                    return Err(reason);
                }
                if missing_text {
                    stats.missing_text += 1;
                } else {
                    stats.missing_items += 1;
                }
                let msg = format!("skipping outfit: {reason}");
                log::warn!("{msg}");
                stats.warnings.push(msg);
            }
        }
    }
    stats.loaded = samples.len();
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((samples, stats))
}

struct Skip {
    reason: Error,
    missing_text: bool,
}

#[allow(clippy::too_many_arguments)]
fn join_one(
    set_id: String,
    raw_items: Vec<RawItem>,
    desc_tokens: Option<Vec<String>>,
    format: DataFormat,
    split: Split,
    text: &EmbeddingBundle,
    items: &EmbeddingBundle,
    text_idx: &HashMap<&str, usize>,
    item_idx: &HashMap<&str, usize>,
) -> std::result::Result<OutfitSample, Skip> {
    let item_skip = |reason| Skip {
        reason,
        missing_text: false,
    };
    let mut item_ids = Vec::with_capacity(raw_items.len());
    let mut rows = Vec::with_capacity(raw_items.len());
    for it in raw_items {
        let id = match format {
            DataFormat::Maryland => it
                .index
                .map(|i| format!("{set_id}_{}", i.into_string())),
            DataFormat::PolyvoreOutfit | DataFormat::Synthetic => {
                it.item_id.map(RawId::into_string)
            }
        }
        .ok_or_else(|| {
            item_skip(Error::InvalidArgument(format!(
                "outfit `{set_id}` has an item without an id"
            )))
        })?;
        let rec = item_idx
            .get(id.as_str())
            .map(|&k| &items.records[k])
            .ok_or_else(|| item_skip(Error::MissingId(id.clone())))?;
        if rec.tokens.rows() != 1 {
            return Err(item_skip(Error::InvalidArgument(format!(
                "item `{id}` has {} embedding rows, expected 1",
                rec.tokens.rows()
            ))));
        }
        rows.push(rec.tokens.row(0).to_vec());
        item_ids.push(id);
    }
    if rows.is_empty() {
        return Err(item_skip(Error::InvalidArgument(format!(
            "outfit `{set_id}` has no items"
        ))));
    }
    let rec = text_idx
        .get(set_id.as_str())
        .map(|&k| &text.records[k])
        .ok_or_else(|| Skip {
            reason: Error::MissingId(set_id.clone()),
            missing_text: true,
        })?;
    if rec.tokens.rows() == 0 {
        return Err(Skip {
            reason: Error::InvalidArgument(format!("description of `{set_id}` has no tokens")),
            missing_text: true,
        });
    }
    let n_t = rec.tokens.rows();
    let token_strings = match desc_tokens {
        Some(t) if t.len() == n_t => t,
        _ => (0..n_t).map(|j| format!("t{j}")).collect(),
    };
    Ok(OutfitSample {
        outfit_id: set_id,
        item_ids,
        e_o: Matrix::from_rows(&rows),
        token_strings,
        e_t: rec.tokens.clone(),
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundles() -> (EmbeddingBundle, EmbeddingBundle) {
        let mut text = EmbeddingBundle::new(2);
        text.push("100", Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]))
            .unwrap();
        text.push("200", Matrix::from_rows(&[[0.5f32, 0.5]])).unwrap();
        let mut items = EmbeddingBundle::new(2);
        for (id, v) in [("100_1", [1.0f32, 0.0]), ("100_2", [0.0, 1.0]), ("100_3", [1.0, 1.0]), ("200_1", [2.0, 0.0])] {
            items.push(id, Matrix::from_rows(&[v])).unwrap();
        }
        (text, items)
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("outfits.json");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn maryland_toy() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"[{"set_id":"100","name":"a","items":[{"index":1,"name":"x"},{"index":2},{"index":3}],"desc":"two words"},
                {"set_id":200,"items":[{"index":1}]}]"#,
        );
        let (t, i) = bundles();
        let (s, stats) = load_polyvore(&p, &t, &i, DataFormat::Maryland, Split::Train, true).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].e_o.rows(), s[0].e_t.rows()), (3, 2));
        assert_eq!((s[1].e_o.rows(), s[1].e_t.rows()), (1, 1));
        assert_eq!(s[0].item_ids, vec!["100_1", "100_2", "100_3"]);
        assert_eq!(s[0].token_strings, vec!["t0", "t1"]);
        assert_eq!(stats.loaded, 2);
    }

    #[test]
    fn lenient_skip_and_strict_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"[{"set_id":"100","items":[{"item_id":"100_1"},{"item_id":"nope"}]},
                {"set_id":"200","items":[{"item_id":"200_1"}],"desc_tokens":["red"]}]"#,
        );
        let (t, i) = bundles();
        let (s, stats) =
            load_polyvore(&p, &t, &i, DataFormat::PolyvoreOutfit, Split::Test, false).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].token_strings, vec!["red"]);
        assert_eq!(stats.warnings.len(), 1);
        assert_eq!(stats.missing_items, 1);
        assert!(matches!(
            load_polyvore(&p, &t, &i, DataFormat::PolyvoreOutfit, Split::Test, true),
            Err(Error::MissingId(id)) if id == "nope"
        ));
    }

    #[test]
    fn width_mismatch_names_both() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[]");
        let (t, _) = bundles();
        let items = EmbeddingBundle::new(3);
        let err = load_polyvore(&p, &t, &items, DataFormat::Maryland, Split::Train, false)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn empty_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"[{"set_id":"9","items":[{"index":1}]}]"#);
        let (t, i) = bundles();
        assert!(matches!(
            load_polyvore(&p, &t, &i, DataFormat::Maryland, Split::Train, false),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            load_polyvore(dir.path().join("absent.json"), &t, &i, DataFormat::Maryland, Split::Train, false),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            format: DataFormat::Synthetic,
            splits: [(Split::Train, PathBuf::from("train.json"))].into_iter().collect(),
            bundles: BundlePaths {
                outfit_text: "text.otfe".into(),
                item_image: "items.otfe".into(),
            },
            root: PathBuf::new(),
        };
        m.save(dir.path().join(MANIFEST_FILE)).unwrap();
        let raw: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(raw["format"], "synthetic");
        assert_eq!(raw["splits"]["train"], "train.json");
        assert_eq!(raw["bundles"]["item_image"], "items.otfe");
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back.root, dir.path());
        assert_eq!(back.splits, m.splits);
    }
}
