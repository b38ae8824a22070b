//! Inter-rater agreement: score banding, Fleiss' kappa (overall and per
//! item), Landis–Koch levels and the high-consensus subset.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{AnnotationTable, BinaryLabel, Manifest};

pub const RAW_CATEGORIES: usize = 11;
pub const ALMOST_PERFECT: f64 = 0.80;

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("score {0} outside 0..=10")]
    ScoreRange(u8),
    #[error("degenerate agreement: every rating falls in one category")]
    Degenerate,
    #[error("category table needs at least 2 raters and 2 categories (n={n}, k={k})")]
    TableShape { n: usize, k: usize },
    #[error("item {item} has {got} ratings, expected {expected}")]
    RaterCount { item: usize, got: usize, expected: usize },
    #[error("category table has no items")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    Low,
    Mid,
    High,
}

impl Band {
    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn band(score: u8) -> Result<Band, AgreementError> {
    match score {
        0..=2 => Ok(Band::Low),
        3..=7 => Ok(Band::Mid),
        8..=10 => Ok(Band::High),
        s => Err(AgreementError::ScoreRange(s)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryCountTable {
    items: Vec<Vec<usize>>,
    n: usize,
    k: usize,
}

impl CategoryCountTable {
    pub fn new(items: Vec<Vec<usize>>) -> Result<Self, AgreementError> {
        let first = items.first().ok_or(AgreementError::Empty)?;
        let k = first.len();
        let n: usize = first.iter().sum();
        if n < 2 || k < 2 {
            return Err(AgreementError::TableShape { n, k });
        }
        for (i, row) in items.iter().enumerate() {
            let got: usize = row.iter().sum();
            if row.len() != k {
                return Err(AgreementError::TableShape { n, k: row.len() });
            }
            if got != n {
                return Err(AgreementError::RaterCount { item: i, got, expected: n });
            }
        }
        Ok(CategoryCountTable { items, n, k })
    }

    /// Builds a table from per-item category assignments.
    pub fn from_assignments(assignments: &[Vec<usize>], k: usize) -> Result<Self, AgreementError> {
        let items = assignments
            .iter()
            .map(|a| {
                let mut row = vec![0; k];
                for &c in a {
                    if c >= k {
                        return Err(AgreementError::TableShape { n: a.len(), k });
                    }
                    row[c] += 1;
                }
                Ok(row)
            })
            .collect::<Result<_, _>>()?;
        Self::new(items)
    }

    pub fn items(&self) -> &[Vec<usize>] {
        &self.items
    }

    pub fn raters(&self) -> usize {
        self.n
    }

    pub fn categories(&self) -> usize {
        self.k
    }

    pub fn pooled_proportions(&self) -> Vec<f64> {
        let total = (self.items.len() * self.n) as f64;
        (0..self.k).map(|j| self.items.iter().map(|r| r[j]).sum::<usize>() as f64 / total).collect()
    }
}

fn item_agreement(counts: &[usize], n: usize) -> f64 {
    let sq: usize = counts.iter().map(|c| c * c).sum();
    (sq as f64 - n as f64) / (n as f64 * (n as f64 - 1.0))
}

fn chance_agreement(pooled: &[f64]) -> Result<f64, AgreementError> {
    let pe: f64 = pooled.iter().map(|p| p * p).sum();
    if (1.0 - pe).abs() < 1e-15 {
        return Err(AgreementError::Degenerate);
    }
    Ok(pe)
}

pub fn fleiss_kappa(table: &CategoryCountTable) -> Result<f64, AgreementError> {
    let pe = chance_agreement(&table.pooled_proportions())?;
    let p_bar = table.items.iter().map(|r| item_agreement(r, table.n)).sum::<f64>() / table.items.len() as f64;
    Ok((p_bar - pe) / (1.0 - pe))
}

pub fn per_item_kappa(item_counts: &[usize], pooled_proportions: &[f64]) -> Result<f64, AgreementError> {
    let n: usize = item_counts.iter().sum();
    if n < 2 {
        return Err(AgreementError::TableShape { n, k: item_counts.len() });
    }
    let pe = chance_agreement(pooled_proportions)?;
    Ok((item_agreement(item_counts, n) - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KappaLevel {
    WorseThanChance,
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

impl KappaLevel {
    pub const ALL: [KappaLevel; 6] = [
        KappaLevel::WorseThanChance,
        KappaLevel::Slight,
        KappaLevel::Fair,
        KappaLevel::Moderate,
        KappaLevel::Substantial,
        KappaLevel::AlmostPerfect,
    ];
}

impl fmt::Display for KappaLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub fn kappa_level(kappa: f64) -> KappaLevel {
    if kappa < 0.0 {
        KappaLevel::WorseThanChance
    } else if kappa <= 0.20 {
        KappaLevel::Slight
    } else if kappa <= 0.40 {
        KappaLevel::Fair
    } else if kappa <= 0.60 {
        KappaLevel::Moderate
    } else if kappa <= ALMOST_PERFECT {
        KappaLevel::Substantial
    } else {
        KappaLevel::AlmostPerfect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub categories: usize,
    pub raters: usize,
    pub items: usize,
    pub overall_kappa: f64,
    pub mean_per_item_kappa: f64,
    pub per_item_kappa: Vec<f64>,
    pub level_histogram: IndexMap<KappaLevel, usize>,
}

impl AgreementReport {
    pub fn from_table(table: &CategoryCountTable) -> Result<Self, AgreementError> {
        let overall = fleiss_kappa(table)?;
        let pooled = table.pooled_proportions();
        let per_item = table.items.iter().map(|r| per_item_kappa(r, &pooled)).collect::<Result<Vec<_>, _>>()?;
        let mut hist: IndexMap<KappaLevel, usize> = KappaLevel::ALL.iter().map(|&l| (l, 0)).collect();
        for &k in &per_item {
            *hist.entry(kappa_level(k)).or_default() += 1;
        }
        Ok(AgreementReport {
            categories: table.k,
            raters: table.n,
            items: table.items.len(),
            overall_kappa: overall,
            mean_per_item_kappa: per_item.iter().sum::<f64>() / per_item.len() as f64,
            per_item_kappa: per_item,
            level_histogram: hist,
        })
    }
}

fn common_rater_count(groups: &[(String, Vec<u8>)]) -> Result<usize, AgreementError> {
    let n = groups.first().ok_or(AgreementError::Empty)?.1.len();
    for (i, (_, scores)) in groups.iter().enumerate() {
        if scores.len() != n {
            return Err(AgreementError::RaterCount { item: i, got: scores.len(), expected: n });
        }
    }
    Ok(n)
}

/// Table over the 11 raw scores as nominal categories.
pub fn raw_table(annotations: &AnnotationTable) -> Result<CategoryCountTable, AgreementError> {
    let groups = annotations.by_image();
    common_rater_count(&groups)?;
    let assignments: Vec<Vec<usize>> =
        groups.iter().map(|(_, s)| s.iter().map(|&v| usize::from(v)).collect()).collect();
    CategoryCountTable::from_assignments(&assignments, RAW_CATEGORIES)
}

/// Table over the three score bands.
pub fn banded_table(annotations: &AnnotationTable) -> Result<CategoryCountTable, AgreementError> {
    let groups = annotations.by_image();
    common_rater_count(&groups)?;
    let assignments = groups
        .iter()
        .map(|(_, s)| s.iter().map(|&v| band(v).map(Band::index)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    CategoryCountTable::from_assignments(&assignments, 3)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptItem {
    pub image_id: String,
    pub label: BinaryLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSubset {
    pub kept: Vec<KeptItem>,
    pub low: usize,
    pub high: usize,
    pub excluded_mid: usize,
    pub source_almost_perfect: usize,
    pub ties: Vec<String>,
}

impl RobustSubset {
    fn from_kept(kept: Vec<KeptItem>, excluded_mid: usize, source_almost_perfect: usize, ties: Vec<String>) -> Self {
        let high = kept.iter().filter(|k| k.label == BinaryLabel::High).count();
        RobustSubset { low: kept.len() - high, high, kept, excluded_mid, source_almost_perfect, ties }
    }

    pub fn label_of(&self, image_id: &str) -> Option<BinaryLabel> {
        self.kept.iter().find(|k| k.image_id == image_id).map(|k| k.label)
    }

    /// Keeps the first kept item per literal image path. Items without a
    /// manifest record are retained. Returns the dropped ids.
    pub fn dedup_by_path(&self, manifest: &Manifest) -> (RobustSubset, Vec<String>) {
        let mut seen = HashSet::new();
        let mut dropped = Vec::new();
        let mut kept = Vec::new();
        for k in &self.kept {
            match manifest.get(&k.image_id) {
                Some(r) if !seen.insert(r.image_path.clone()) => dropped.push(k.image_id.clone()),
                _ => kept.push(k.clone()),
            }
        }
        (RobustSubset::from_kept(kept, self.excluded_mid, self.source_almost_perfect, self.ties.clone()), dropped)
    }
}

fn modal_band(counts: &[usize]) -> Option<Band> {
    let max = *counts.iter().max()?;
    let winners: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == max).collect();
    match winners.as_slice() {
        [only] => Some([Band::Low, Band::Mid, Band::High][*only]),
        _ => None,
    }
}

pub fn build_robust_subset(annotations: &AnnotationTable) -> Result<RobustSubset, AgreementError> {
    let groups = annotations.by_image();
    let table = banded_table(annotations)?;
    let pooled = table.pooled_proportions();
    let mut kept = Vec::new();
    let mut ids = HashSet::new();
    let (mut excluded_mid, mut almost_perfect) = (0, 0);
    let mut ties = Vec::new();
    for ((id, _), counts) in groups.iter().zip(table.items()) {
        if per_item_kappa(counts, &pooled)? <= ALMOST_PERFECT {
            continue;
        }
        almost_perfect += 1;
        match modal_band(counts) {
            Some(Band::Mid) => excluded_mid += 1,
            Some(b) => {
                if ids.insert(id.clone()) {
                    let label = if b == Band::High { BinaryLabel::High } else { BinaryLabel::Low };
                    kept.push(KeptItem { image_id: id.clone(), label });
                }
            }
            None => ties.push(id.clone()),
        }
    }
    Ok(RobustSubset::from_kept(kept, excluded_mid, almost_perfect, ties))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub raw: AgreementReport,
    pub banded: AgreementReport,
    pub robust_subset: RobustSubset,
    pub band_counts: BTreeMap<Band, usize>,
}

pub fn summarize(annotations: &AnnotationTable) -> Result<AgreementSummary, AgreementError> {
    let banded = banded_table(annotations)?;
    let mut band_counts: BTreeMap<Band, usize> = [(Band::Low, 0), (Band::Mid, 0), (Band::High, 0)].into();
    for r in annotations.rows() {
        *band_counts.entry(band(r.score)?).or_default() += 1;
    }
    Ok(AgreementSummary {
        raw: AgreementReport::from_table(&raw_table(annotations)?)?,
        banded: AgreementReport::from_table(&banded)?,
        robust_subset: build_robust_subset(annotations)?,
        band_counts,
    })
}
