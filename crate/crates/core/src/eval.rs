//! Test-time scoring, ranking, Recall@k and interaction export.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutfitSample};
use crate::error::{Error, Result};
use crate::interaction::{token_cosines, wti_terms, LossWeights, Side, WtiTerms};
use crate::model::{HeadParams, LevelToggles, ModelConfig, SideEncoding};
use crate::numgraph::{Matrix, Real};
use crate::outfit::outfit_similarity;

/// Which similarity ranks candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Outfit-token-weighted item term only.
    #[default]
    ItemT2o,
    /// Both item terms mixed with `p`.
    ItemFull,
    /// `S_item + alpha S_style + beta S_outfit`.
    Combined,
}

impl ScoreMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreMode::ItemT2o => "item-t2o",
            ScoreMode::ItemFull => "item-full",
            ScoreMode::Combined => "combined",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item-t2o" => Ok(ScoreMode::ItemT2o),
            "item-full" => Ok(ScoreMode::ItemFull),
            "combined" => Ok(ScoreMode::Combined),
            other => Err(Error::InvalidArgument(format!(
                "unknown score mode `{other}` (expected item-t2o, item-full or combined)"
            ))),
        }
    }
}

/// Scoring hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub mode: ScoreMode,
    pub p: f64,
    /// Style weight in combined mode.
    pub alpha: f64,
    /// Outfit weight in combined mode.
    pub beta: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self::new(ScoreMode::default(), &LossWeights::default(), &LevelToggles::default())
    }
}

impl ScoreConfig {
    /// Combined-mode weights are the loss weights of the enabled levels.
    pub fn new(mode: ScoreMode, weights: &LossWeights, toggles: &LevelToggles) -> Self {
        Self {
            mode,
            p: weights.p,
            alpha: if toggles.style { weights.alpha } else { 0.0 },
            beta: if toggles.outfit { weights.beta } else { 0.0 },
        }
    }
}

/// Per-level similarities of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelScores<T> {
    pub item: WtiTerms<T>,
    pub style: WtiTerms<T>,
    pub outfit: T,
}

pub fn level_scores<T: Real>(
    outfit: &SideEncoding<T>,
    text: &SideEncoding<T>,
    strict: bool,
) -> Result<LevelScores<T>> {
    Ok(LevelScores {
        item: wti_terms(&outfit.items, &text.items),
        style: wti_terms(&outfit.style_set, &text.style_set),
        outfit: outfit_similarity(&outfit.global, &text.global, strict)?,
    })
}

impl<T: Real> LevelScores<T> {
    pub fn score(&self, cfg: &ScoreConfig) -> T {
        let p = T::lit(cfg.p);
        match cfg.mode {
            ScoreMode::ItemT2o => self.item.outfit_term,
            ScoreMode::ItemFull => self.item.combine(p),
            ScoreMode::Combined => {
                self.item.combine(p)
                    + T::lit(cfg.alpha) * self.style.combine(p)
                    + T::lit(cfg.beta) * self.outfit
            }
        }
    }
}

/// Pre-encoded outfits and descriptions of a sample set.
pub struct Encoded<T> {
    pub outfits: Vec<SideEncoding<T>>,
    pub texts: Vec<SideEncoding<T>>,
}

pub fn encode_samples<T: Real>(
    samples: &[OutfitSample],
    params: &HeadParams<T>,
    model: &ModelConfig,
) -> Result<Encoded<T>> {
    let mut outfits = Vec::with_capacity(samples.len());
    let mut texts = Vec::with_capacity(samples.len());
    for s in samples {
        outfits.push(params.encode(model, Side::Outfit, &s.e_o.cast(), s.key())?);
        texts.push(params.encode(model, Side::Text, &s.e_t.cast(), s.key())?);
    }
    Ok(Encoded { outfits, texts })
}

/// Score of `text`'s description against `outfit`'s items.
pub fn inference_score<T: Real>(
    text: &OutfitSample,
    outfit: &OutfitSample,
    params: &HeadParams<T>,
    model: &ModelConfig,
    cfg: &ScoreConfig,
) -> Result<T> {
    let o = params.encode(model, Side::Outfit, &outfit.e_o.cast(), outfit.key())?;
    let t = params.encode(model, Side::Text, &text.e_t.cast(), text.key())?;
    Ok(level_scores(&o, &t, model.strict)?.score(cfg))
}

/// Candidates ranked for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Descending score; equal scores ordered by outfit id.
    pub ranked: Vec<(String, f64)>,
    /// 1-based rank of the matching outfit.
    pub gt_rank: Option<usize>,
}

impl RetrievalResult {
    /// Ranks `scores`; the query's own id marks the ground truth.
    pub fn new(query_id: impl Into<String>, mut scores: Vec<(String, f64)>) -> Self {
        let query_id = query_id.into();
        scores.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => a.0.cmp(&b.0),
            o => o,
        });
        let gt_rank = scores.iter().position(|(id, _)| *id == query_id).map(|r| r + 1);
        Self {
            query_id,
            ranked: scores,
            gt_rank,
        }
    }
}

pub const RECALL_KS: [usize; 4] = [5, 10, 30, 50];

/// Fraction of queries whose match ranks within each `k`.
pub fn recall_at_k(results: &[RetrievalResult], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if results.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ranks = results
        .iter()
        .map(|r| {
            r.gt_rank
                .ok_or_else(|| Error::MissingId(format!("ground truth of query `{}`", r.query_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect())
}

/// Recall at the reported cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@30")]
    pub r30: f64,
    #[serde(rename = "R@50")]
    pub r50: f64,
    pub queries: usize,
}

impl Metrics {
    pub fn from_results(results: &[RetrievalResult]) -> Result<Self> {
        let r = recall_at_k(results, &RECALL_KS)?;
        Ok(Self {
            r5: r[0].1,
            r10: r[1].1,
            r30: r[2].1,
            r50: r[3].1,
            queries: results.len(),
        })
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        match k {
            5 => Some(self.r5),
            10 => Some(self.r10),
            30 => Some(self.r30),
            50 => Some(self.r50),
            _ => None,
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "R@5 {:.4}  R@10 {:.4}  R@30 {:.4}  R@50 {:.4}  ({} queries)",
            self.r5, self.r10, self.r30, self.r50, self.queries
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub results: Vec<RetrievalResult>,
}

/// Full score matrix of every description against every outfit of the
/// set; row = query, column = candidate.
pub fn score_matrix<T: Real>(
    data: &Dataset,
    params: &HeadParams<T>,
    model: &ModelConfig,
    cfg: &ScoreConfig,
) -> Result<Matrix<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let enc = encode_samples(&data.samples, params, model)?;
    let n = data.len();
    let mut m = Matrix::zeros(n, n);
    for q in 0..n {
        for c in 0..n {
            let s = level_scores(&enc.outfits[c], &enc.texts[q], model.strict)?.score(cfg);
            m[(q, c)] = s.to_f64().unwrap_or(f64::NAN);
        }
        if (q + 1) % 500 == 0 {
            log::info!("scored {}/{} queries", q + 1, n);
        }
    }
    Ok(m)
}

/// Ranks every outfit of the set for every description of the set.
pub fn evaluate<T: Real>(
    data: &Dataset,
    params: &HeadParams<T>,
    model: &ModelConfig,
    cfg: &ScoreConfig,
) -> Result<Evaluation> {
    let scores = score_matrix(data, params, model, cfg)?;
    let results: Vec<RetrievalResult> = data
        .samples
        .iter()
        .enumerate()
        .map(|(q, s)| {
            let row = data
                .samples
                .iter()
                .enumerate()
                .map(|(c, o)| (o.outfit_id.clone(), scores[(q, c)]))
                .collect();
            RetrievalResult::new(s.outfit_id.clone(), row)
        })
        .collect();
    Ok(Evaluation {
        metrics: Metrics::from_results(&results)?,
        results,
    })
}

/// Token interactions of one pair at the item and style levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionExport {
    pub outfit_id: String,
    pub query_id: String,
    pub item_ids: Vec<String>,
    pub token_strings: Vec<String>,
    /// `item_matrix[i][j] = cos(item i, token j)`.
    pub item_matrix: Vec<Vec<f64>>,
    pub item_weights: Vec<f64>,
    pub token_weights: Vec<f64>,
    /// `style_matrix[a][b] = cos(outfit style a, text style b)`.
    pub style_matrix: Vec<Vec<f64>>,
    pub outfit_style_weights: Vec<f64>,
    pub text_style_weights: Vec<f64>,
    /// Item ids owned by each outfit style token.
    pub outfit_clusters: Vec<Vec<String>>,
    /// Token strings owned by each text style token.
    pub text_clusters: Vec<Vec<String>>,
    pub scores: ExportScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportScores {
    pub item_t2o: f64,
    pub item_full: f64,
    pub style: f64,
    pub outfit: f64,
    pub combined: f64,
    pub mode: ScoreMode,
    pub score: f64,
}

fn rows_f64<T: Real>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn vec_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

fn labels_by_cluster(assign: &[usize], count: usize, labels: &[String]) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new(); count];
    for (i, &a) in assign.iter().enumerate() {
        out[a].push(labels[i].clone());
    }
    out
}

/// Builds the interaction record of `text`'s description against
/// `outfit`, using the same encodings the scorer uses.
pub fn interactions<T: Real>(
    text: &OutfitSample,
    outfit: &OutfitSample,
    params: &HeadParams<T>,
    model: &ModelConfig,
    cfg: &ScoreConfig,
) -> Result<InteractionExport> {
    let o = params.encode(model, Side::Outfit, &outfit.e_o.cast(), outfit.key())?;
    let t = params.encode(model, Side::Text, &text.e_t.cast(), text.key())?;
    let levels = level_scores(&o, &t, model.strict)?;
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let p = T::lit(cfg.p);
    let combined = ScoreConfig {
        mode: ScoreMode::Combined,
        ..*cfg
    };
    Ok(InteractionExport {
        outfit_id: outfit.outfit_id.clone(),
        query_id: text.outfit_id.clone(),
        item_ids: outfit.item_ids.clone(),
        token_strings: text.token_strings.clone(),
        item_matrix: rows_f64(&token_cosines(&o.items, &t.items)),
        item_weights: vec_f64(&o.items.weights),
        token_weights: vec_f64(&t.items.weights),
        style_matrix: rows_f64(&token_cosines(&o.style_set, &t.style_set)),
        outfit_style_weights: vec_f64(&o.style_set.weights),
        text_style_weights: vec_f64(&t.style_set.weights),
        outfit_clusters: labels_by_cluster(&o.styles.assignments, o.styles.count(), &outfit.item_ids),
        text_clusters: labels_by_cluster(&t.styles.assignments, t.styles.count(), &text.token_strings),
        scores: ExportScores {
            item_t2o: f(levels.item.outfit_term),
            item_full: f(levels.item.combine(p)),
            style: f(levels.style.combine(p)),
            outfit: f(levels.outfit),
            combined: f(levels.score(&combined)),
            mode: cfg.mode,
            score: f(levels.score(cfg)),
        },
    })
}

fn cluster_label(prefix: &str, members: &[String]) -> String {
    format!("{prefix}[{}]", members.join(" "))
}

fn write_matrix_csv(
    path: &Path,
    corner: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<f64>],
) -> Result<()> {
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    let mut header = vec![corner.to_string()];
    header.extend(col_labels.iter().cloned());
    w.write_record(&header).map_err(to_io)?;
    for (label, row) in row_labels.iter().zip(values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Files written by [`export_interactions`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub json: PathBuf,
    pub item_csv: PathBuf,
    pub style_csv: PathBuf,
}

/// Writes `<stem>.json` (everything) plus `<stem>.item.csv` and
/// `<stem>.style.csv` (matrices with labelled rows and columns).
pub fn export_interactions(export: &InteractionExport, stem: impl AsRef<Path>) -> Result<ExportPaths> {
    let stem = stem.as_ref();
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let paths = ExportPaths {
        json: with(".json"),
        item_csv: with(".item.csv"),
        style_csv: with(".style.csv"),
    };
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let body = serde_json::to_string_pretty(export).map_err(|e| Error::json(&paths.json, e))?;
    fs::write(&paths.json, body).map_err(|e| Error::io(&paths.json, e))?;
    write_matrix_csv(
        &paths.item_csv,
        "item\\token",
        &export.item_ids,
        &export.token_strings,
        &export.item_matrix,
    )?;
    let o_labels: Vec<String> = export
        .outfit_clusters
        .iter()
        .enumerate()
        .map(|(i, m)| cluster_label(&format!("o{i}"), m))
        .collect();
    let t_labels: Vec<String> = export
        .text_clusters
        .iter()
        .enumerate()
        .map(|(i, m)| cluster_label(&format!("t{i}"), m))
        .collect();
    write_matrix_csv(
        &paths.style_csv,
        "outfit_style\\text_style",
        &o_labels,
        &t_labels,
        &export.style_matrix,
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn result(gt_rank: usize) -> RetrievalResult {
        RetrievalResult {
            query_id: format!("q{gt_rank}"),
            ranked: Vec::new(),
            gt_rank: Some(gt_rank),
        }
    }

    #[test]
    fn recall_examples() {
        let m = Metrics::from_results(&[result(1)]).unwrap();
        assert_eq!((m.r5, m.r10, m.r30, m.r50), (1.0, 1.0, 1.0, 1.0));
        let r = recall_at_k(&[result(3), result(12)], &[5, 10, 30]).unwrap();
        assert_eq!(r, vec![(5, 0.5), (10, 0.5), (30, 1.0)]);
        assert!(matches!(recall_at_k(&[], &[5]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn metrics_json_keys() {
        let m = Metrics::from_results(&[result(7)]).unwrap();
        let v = serde_json::to_value(m).unwrap();
        assert_eq!(v["R@5"], 0.0);
        assert_eq!(v["R@10"], 1.0);
        assert_eq!(v["queries"], 1);
    }

    #[test]
    fn ties_break_by_outfit_id() {
        let r = RetrievalResult::new(
            "b",
            vec![("c".into(), 0.5), ("b".into(), 0.5), ("a".into(), 0.5), ("z".into(), 0.9)],
        );
        let order: Vec<&str> = r.ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(order, vec!["z", "a", "b", "c"]);
        assert_eq!(r.gt_rank, Some(3));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [ScoreMode::ItemT2o, ScoreMode::ItemFull, ScoreMode::Combined] {
            assert_eq!(m.as_str().parse::<ScoreMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
        assert!("item".parse::<ScoreMode>().is_err());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_bounded(ranks in prop::collection::vec(1usize..80, 1..40)) {
            let results: Vec<_> = ranks.iter().map(|&r| result(r)).collect();
            let m = Metrics::from_results(&results).unwrap();
            let v = [m.r5, m.r10, m.r30, m.r50];
            for w in v.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn ranking_scale_invariant(
            scores in prop::collection::vec(-1.0f64..1.0, 2..30),
            exp in -8i32..8,
        ) {
            let ids: Vec<String> = (0..scores.len()).map(|i| format!("o{i:02}")).collect();
            let base: Vec<_> = ids.iter().cloned().zip(scores.iter().copied()).collect();
            let c = 2f64.powi(exp);
            let scaled: Vec<_> = ids.iter().cloned().zip(scores.iter().map(|s| s * c)).collect();
            let a = RetrievalResult::new("o00", base);
            let b = RetrievalResult::new("o00", scaled);
            let ia: Vec<_> = a.ranked.iter().map(|x| &x.0).collect();
            let ib: Vec<_> = b.ranked.iter().map(|x| &x.0).collect();
            prop_assert_eq!(ia, ib);
            prop_assert_eq!(a.gt_rank, b.gt_rank);
        }
    }
}
