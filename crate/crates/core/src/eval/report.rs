use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{attention_overlap, attention_overlap_thresholded, validate_background, CounterfactualRecord};
use crate::error::{Error, Result};
use crate::synth::{QuestionType, Split};

/// Column order of the ℓ1 grid.
pub const GRID_COLUMNS: [&str; 9] = [
    "All",
    "Color",
    "Shape",
    "Same/All",
    "Same/Color",
    "Same/Shape",
    "Diff/All",
    "Diff/Color",
    "Diff/Shape",
];

pub const L1_CONVENTION: &str =
    "l1 = mean |I'-I| over pixels and channels, images in [0,1]; reference values come from a different \
     dataset and an unstated normalization, so the comparison is approximate";

/// Reference flip rates (all, color, shape) reported at VQA scale.
pub const PUBLISHED_FLIP_RATES: [f64; 3] = [0.3782, 0.3805, 0.2545];

/// Reference ℓ1 grid, indexed `[split][stat][column]` with split train/val
/// and stat μ/σ.
pub const PUBLISHED_L1: [[[f64; 9]; 2]; 2] = [
    [
        [0.0175, 0.0174, 0.0207, 0.0177, 0.0176, 0.0212, 0.0173, 0.0172, 0.0195],
        [0.0039, 0.0039, 0.0048, 0.0040, 0.0039, 0.0049, 0.0039, 0.0038, 0.0046],
    ],
    [
        [0.0175, 0.0174, 0.0208, 0.0177, 0.0176, 0.0212, 0.0173, 0.0173, 0.0198],
        [0.0041, 0.0040, 0.0047, 0.0041, 0.0041, 0.0048, 0.0038, 0.0038, 0.0042],
    ],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRates {
    pub n: usize,
    pub flipped: usize,
    pub all: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub color: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shape: Option<f64>,
}

/// Flip rates over all records and per split (absent when a split has no
/// records).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFlipRates {
    pub overall: FlipRates,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train: Option<FlipRates>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<FlipRates>,
}

fn flip_rates<'a>(records: impl Iterator<Item = &'a CounterfactualRecord>) -> Option<FlipRates> {
    let mut counts = [(0usize, 0usize); 2];
    for r in records {
        let slot = &mut counts[(r.question_type == QuestionType::Shape) as usize];
        slot.0 += r.flipped as usize;
        slot.1 += 1;
    }
    let n = counts[0].1 + counts[1].1;
    let flipped = counts[0].0 + counts[1].0;
    let rate = |(f, n): (usize, usize)| (n > 0).then(|| f as f64 / n as f64);
    (n > 0).then(|| FlipRates {
        n,
        flipped,
        all: flipped as f64 / n as f64,
        color: rate(counts[0]),
        shape: rate(counts[1]),
    })
}

/// Fraction of records with `A′ ≠ A`, overall and per question type.
pub fn semantic_change_rate(records: &[CounterfactualRecord]) -> Result<SplitFlipRates> {
    let overall = flip_rates(records.iter()).ok_or(Error::EmptyRecords)?;
    Ok(SplitFlipRates {
        overall,
        train: flip_rates(records.iter().filter(|r| r.split == Split::Train)),
        val: flip_rates(records.iter().filter(|r| r.split == Split::Val)),
    })
}

/// Population mean and standard deviation of one grid cell; both absent
/// when the cell is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Cell {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
}

impl L1Cell {
    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return L1Cell {
                n: 0,
                mean: None,
                std: None,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        L1Cell {
            n: values.len(),
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitGrid {
    /// One cell per entry of [`GRID_COLUMNS`].
    pub cells: Vec<L1Cell>,
    /// μ(different answers) − μ(same answers); negative means flipped
    /// counterfactuals needed fewer changes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diff_minus_same_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Grid {
    pub train: SplitGrid,
    pub val: SplitGrid,
}

impl L1Grid {
    pub fn split(&self, split: Split) -> &SplitGrid {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn split_grid(records: &[CounterfactualRecord], split: Split) -> SplitGrid {
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); GRID_COLUMNS.len()];
    for r in records.iter().filter(|r| r.split == split) {
        let kind = 1 + (r.question_type == QuestionType::Shape) as usize;
        let group = if r.flipped { 6 } else { 3 };
        for col in [0, kind, group, group + kind] {
            buckets[col].push(r.l1);
        }
    }
    let cells: Vec<L1Cell> = buckets.iter().map(|b| L1Cell::from_values(b)).collect();
    let diff_minus_same_mean = cells[6].mean.zip(cells[3].mean).map(|(d, s)| d - s);
    SplitGrid {
        cells,
        diff_minus_same_mean,
    }
}

/// Grid layout: {train, val} × {μ, σ} × [`GRID_COLUMNS`].
pub fn l1_stats(records: &[CounterfactualRecord]) -> L1Grid {
    L1Grid {
        train: split_grid(records, Split::Train),
        val: split_grid(records, Split::Val),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Records with a known target-object mask.
    pub n: usize,
    pub threshold: f64,
    /// Share of `M` whose argmax falls on the target object.
    pub hit_rate: f64,
    pub mean_mass_fraction: f64,
    pub mean_mass_fraction_thresholded: f64,
    /// The same statistics for `M′` on `I′`.
    pub cf_hit_rate: f64,
    pub cf_mean_mass_fraction: f64,
}

fn overlap_stats(records: &[CounterfactualRecord], threshold: f64) -> Result<Option<OverlapStats>> {
    let mut acc = [0.0f64; 5];
    let mut n = 0usize;
    for r in records {
        let Some(mask) = &r.target_mask else { continue };
        let o = attention_overlap(&r.attention, mask)?;
        let t = attention_overlap_thresholded(&r.attention, mask, threshold)?;
        let c = attention_overlap(&r.cf_attention, mask)?;
        for (a, v) in acc.iter_mut().zip([
            o.hit as u8 as f64,
            o.mass_fraction,
            t.mass_fraction,
            c.hit as u8 as f64,
            c.mass_fraction,
        ]) {
            *a += v;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let m = acc.map(|v| v / n as f64);
    Ok(Some(OverlapStats {
        n,
        threshold,
        hit_rate: m[0],
        mean_mass_fraction: m[1],
        mean_mass_fraction_thresholded: m[2],
        cf_hit_rate: m[3],
        cf_mean_mass_fraction: m[4],
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub color: usize,
    pub shape: usize,
    pub background_valid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub flip_rates: [f64; 3],
    /// `[split][stat][column]`, split train/val, stat μ/σ.
    pub l1: [[[f64; 9]; 2]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l1_convention: String,
    pub columns: Vec<String>,
    pub counts: Counts,
    pub flip_rates: SplitFlipRates,
    pub l1: L1Grid,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlap: Option<OverlapStats>,
    pub reference: PublishedReference,
}

pub fn build_report(records: &[CounterfactualRecord], mass_threshold: f64) -> Result<MetricsReport> {
    let flip_rates = semantic_change_rate(records)?;
    let count = |f: &dyn Fn(&CounterfactualRecord) -> bool| records.iter().filter(|r| f(r)).count();
    Ok(MetricsReport {
        l1_convention: L1_CONVENTION.to_string(),
        columns: GRID_COLUMNS.iter().map(|c| c.to_string()).collect(),
        counts: Counts {
            records: records.len(),
            train: count(&|r| r.split == Split::Train),
            val: count(&|r| r.split == Split::Val),
            color: count(&|r| r.question_type == QuestionType::Color),
            shape: count(&|r| r.question_type == QuestionType::Shape),
            background_valid: count(&|r| validate_background(r)),
        },
        flip_rates,
        l1: l1_stats(records),
        overlap: overlap_stats(records, mass_threshold)?,
        reference: PublishedReference {
            flip_rates: PUBLISHED_FLIP_RATES,
            l1: PUBLISHED_L1,
        },
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

/// Plain-text rendering: the ℓ1 grid with a reference row under each of
/// ours, followed by flip rates, overlap and counts.
pub fn render_table(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}", report.l1_convention);
    let _ = writeln!(s);
    let _ = write!(s, "{:<6} {:<5} {:<6}", "split", "stat", "source");
    for c in GRID_COLUMNS {
        let _ = write!(s, " {c:>10}");
    }
    let _ = writeln!(s);
    for (si, (split, grid)) in [("train", &report.l1.train), ("val", &report.l1.val)].into_iter().enumerate() {
        for (ti, stat) in ["mu", "sigma"].into_iter().enumerate() {
            let _ = write!(s, "{split:<6} {stat:<5} {:<6}", "ours");
            for cell in &grid.cells {
                let v = if ti == 0 { cell.mean } else { cell.std };
                let _ = write!(s, " {:>10}", fmt_opt(v, 4));
            }
            let _ = writeln!(s);
            let _ = write!(s, "{split:<6} {stat:<5} {:<6}", "ref");
            for v in report.reference.l1[si][ti] {
                let _ = write!(s, " {v:>10.4}");
            }
            let _ = writeln!(s);
        }
        let _ = write!(s, "{split:<6} {:<5} {:<6}", "n", "ours");
        for cell in &grid.cells {
            let _ = write!(s, " {:>10}", cell.n);
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{split:<6} mu(diff) - mu(same) = {}",
            fmt_opt(grid.diff_minus_same_mean, 5)
        );
    }
    let _ = writeln!(s);
    let f = &report.flip_rates;
    let p = &report.reference.flip_rates;
    let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10}", "flip rate", "All", "Color", "Shape");
    for (name, rates) in [("overall", Some(&f.overall)), ("train", f.train.as_ref()), ("val", f.val.as_ref())] {
        let _ = writeln!(
            s,
            "{name:<14} {:>10} {:>10} {:>10}",
            fmt_pct(rates.map(|r| r.all)),
            fmt_pct(rates.and_then(|r| r.color)),
            fmt_pct(rates.and_then(|r| r.shape))
        );
    }
    let _ = writeln!(
        s,
        "{:<14} {:>10} {:>10} {:>10}",
        "ref",
        fmt_pct(Some(p[0])),
        fmt_pct(Some(p[1])),
        fmt_pct(Some(p[2]))
    );
    let _ = writeln!(s);
    if let Some(o) = &report.overlap {
        let _ = writeln!(
            s,
            "attention on target object (n={}): hit {:.2}%, mass {:.3}, mass@{} {:.3}; on I': hit {:.2}%, mass {:.3}",
            o.n,
            100.0 * o.hit_rate,
            o.mean_mass_fraction,
            o.threshold,
            o.mean_mass_fraction_thresholded,
            100.0 * o.cf_hit_rate,
            o.cf_mean_mass_fraction
        );
    }
    let c = &report.counts;
    let _ = writeln!(
        s,
        "records {} (train {}, val {}; color {}, shape {}); background preserved {}/{}",
        c.records, c.train, c.val, c.color, c.shape, c.background_valid, c.records
    );
    s
}
