//! Classification metrics, attention/annotation overlap and latency timing.
//!
//! Class conventions: a class with no ground-truth samples has undefined
//! per-class metrics (`None`) and is left out of every macro mean. Precision
//! of a class that is never predicted counts as 0.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{top_k_bags, top_k_words, AttentionRecord, TilingConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row-major `classes x classes`; rows are ground truth, columns predictions.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Contract("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total().max(1) as f64
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape("confusion", &[preds.len()], &[labels.len()]));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in preds.iter().zip(labels) {
        for (what, v) in [("prediction", p), ("label", t)] {
            if v >= classes {
                return Err(Error::Index { what, index: v, bound: classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub precision: Option<f64>,
    /// Recall.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    /// One-vs-rest ROC-AUC; also `None` when the class has no negatives.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub macro_auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<u64>>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Area under the ROC curve of `scores` for `positives`, ties grouped so
/// that tied scores contribute half credit. `None` without both classes.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let pos = positives.iter().filter(|&&b| b).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]].total_cmp(&s).is_eq() {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (pos * neg) as f64)
}

/// Full metric set. `scores[i]` holds the class scores (probabilities) of sample `i`.
pub fn report(cm: &ConfusionMatrix, scores: &[Vec<f64>], labels: &[usize]) -> Result<MetricsReport> {
    let c = cm.classes;
    if cm.total() != labels.len() as u64 || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "report: confusion total {}, {} score rows and {} labels disagree",
            cm.total(),
            scores.len(),
            labels.len()
        )));
    }
    for class in 0..c {
        let n = labels.iter().filter(|&&l| l == class).count() as u64;
        if n != cm.support(class) {
            return Err(Error::Contract(format!("report: support of class {class} differs from the labels")));
        }
    }
    if let Some(row) = scores.iter().find(|r| r.len() != c) {
        return Err(Error::shape("report scores", &[row.len()], &[c]));
    }

    let total = cm.total();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|class| {
            let support = cm.support(class);
            if support == 0 {
                return ClassMetrics {
                    class,
                    support,
                    precision: None,
                    sensitivity: None,
                    specificity: None,
                    f1: None,
                    auc: None,
                };
            }
            let tp = cm.get(class, class) as f64;
            let fp = cm.predicted(class) as f64 - tp;
            let fneg = support as f64 - tp;
            let tn = total as f64 - tp - fp - fneg;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let sensitivity = tp / (tp + fneg);
            let specificity = (tn + fp > 0.0).then(|| tn / (tn + fp));
            let f1 = 2.0 * tp / (2.0 * tp + fp + fneg);
            let column: Vec<f64> = scores.iter().map(|r| r[class]).collect();
            let positives: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            ClassMetrics {
                class,
                support,
                precision: Some(precision),
                sensitivity: Some(sensitivity),
                specificity,
                f1: Some(f1),
                auc: roc_auc(&column, &positives),
            }
        })
        .collect();

    let defined = || per_class.iter().filter(|m| m.support > 0);
    let weighted_f1 = defined().map(|m| m.f1.unwrap_or(0.0) * m.support as f64).sum::<f64>() / total.max(1) as f64;
    Ok(MetricsReport {
        samples: total,
        accuracy: cm.accuracy(),
        macro_f1: mean(defined().filter_map(|m| m.f1)).unwrap_or(0.0),
        weighted_f1,
        macro_sensitivity: mean(defined().filter_map(|m| m.sensitivity)).unwrap_or(0.0),
        macro_specificity: mean(defined().filter_map(|m| m.specificity)).unwrap_or(0.0),
        macro_auc: mean(defined().filter_map(|m| m.auc)),
        per_class,
        confusion: cm.rows(),
    })
}

/// Resolution of an annotation or attention selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Bag,
    Word,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Bag => "bag",
            Level::Word => "word",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bag" => Ok(Level::Bag),
            "word" => Ok(Level::Word),
            _ => Err(Error::config("level", format!("expected bag or word, got `{s}`"))),
        }
    }
}

/// Binary annotation on the bag grid (`n` cells) or the word grid (`n * m`
/// cells, bag-major).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    pub level: Level,
    pub n: usize,
    pub m: usize,
    pub cells: Vec<bool>,
}

impl RegionMask {
    pub fn bags(cells: Vec<bool>) -> Self {
        Self {
            level: Level::Bag,
            n: cells.len(),
            m: 1,
            cells,
        }
    }

    pub fn words(n: usize, m: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != n * m {
            return Err(Error::shape("word mask", &[cells.len()], &[n * m]));
        }
        Ok(Self {
            level: Level::Word,
            n,
            m,
            cells,
        })
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Down-samples a pixel annotation of the `image_side x image_side`
    /// tiled image: a cell is marked when at least half its pixels are.
    pub fn rasterize(pixels: &[bool], tiling: &TilingConfig, level: Level) -> Result<Self> {
        tiling.validate_geometry()?;
        let side = tiling.image_side()?;
        if pixels.len() != side * side {
            return Err(Error::shape("pixel mask", &[pixels.len()], &[side * side]));
        }
        let covered = |x0: usize, y0: usize, w: usize, h: usize| {
            let hits: usize = (y0..y0 + h)
                .map(|y| pixels[y * side + x0..y * side + x0 + w].iter().filter(|&&b| b).count())
                .sum();
            2 * hits >= w * h
        };
        match level {
            Level::Bag => Ok(Self::bags(
                (0..tiling.n)
                    .map(|b| tiling.bag_rect(b).map(|r| covered(r.x, r.y, r.width, r.height)))
                    .collect::<Result<_>>()?,
            )),
            Level::Word => {
                let mut cells = Vec::with_capacity(tiling.n * tiling.m);
                for b in 0..tiling.n {
                    for w in 0..tiling.m {
                        let r = tiling.word_rect(b, w)?;
                        cells.push(covered(r.x, r.y, r.width, r.height));
                    }
                }
                Self::words(tiling.n, tiling.m, cells)
            }
        }
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dice", &[a.len()], &[b.len()]));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// How the top-k selection becomes a predicted region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    /// Only selected cells that fall inside the annotation count as predicted.
    Restricted,
    /// Every selected cell counts as predicted.
    Unrestricted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScore {
    pub dice: f64,
    pub selected: usize,
    pub predicted: usize,
    pub annotated: usize,
    /// Both predicted and annotated regions were empty, so `dice` is the 1.0 convention.
    pub both_empty: bool,
}

/// Top-`k_percent` cells of the record at `mask.level`, as a mask.
pub fn top_k_mask(rec: &AttentionRecord, k_percent: f64, level: Level) -> Result<Vec<bool>> {
    let (n, m) = (rec.n(), rec.m());
    match level {
        Level::Bag => {
            let mut sel = vec![false; n];
            for b in top_k_bags(rec, k_percent)? {
                sel[b] = true;
            }
            Ok(sel)
        }
        Level::Word => {
            let mut sel = vec![false; n * m];
            for (b, w) in top_k_words(rec, k_percent)? {
                sel[b * m + w] = true;
            }
            Ok(sel)
        }
    }
}

pub fn attention_overlap(rec: &AttentionRecord, mask: &RegionMask, k_percent: f64, mode: OverlapMode) -> Result<OverlapScore> {
    let expected = match mask.level {
        Level::Bag => [rec.n(), 1],
        Level::Word => [rec.n(), rec.m()],
    };
    if [mask.n, mask.m] != expected || mask.cells.len() != expected[0] * expected[1] {
        return Err(Error::shape("region mask", &[mask.n, mask.m], &expected));
    }
    let selected = top_k_mask(rec, k_percent, mask.level)?;
    let predicted: Vec<bool> = match mode {
        OverlapMode::Restricted => selected.iter().zip(&mask.cells).map(|(s, a)| *s && *a).collect(),
        OverlapMode::Unrestricted => selected.clone(),
    };
    let p = predicted.iter().filter(|&&b| b).count();
    let a = mask.count();
    Ok(OverlapScore {
        dice: dice(&predicted, &mask.cells)?,
        selected: selected.iter().filter(|&&b| b).count(),
        predicted: p,
        annotated: a,
        both_empty: p == 0 && a == 0,
    })
}

/// One line of a dice-versus-k sweep; `class == None` is the mean over all samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_percent: f64,
    pub class: Option<usize>,
    pub dice: f64,
    pub samples: usize,
}

/// Mean overlap per `k` over `(record, mask, label)` triples, overall and per class.
pub fn dice_sweep(
    items: &[(&AttentionRecord, &RegionMask, usize)],
    ks: &[f64],
    mode: OverlapMode,
) -> Result<Vec<SweepRow>> {
    let classes = items.iter().map(|it| it.2 + 1).max().unwrap_or(0);
    let mut rows = Vec::new();
    for &k in ks {
        let scores = items
            .iter()
            .map(|(rec, mask, _)| attention_overlap(rec, mask, k, mode).map(|s| s.dice))
            .collect::<Result<Vec<_>>>()?;
        let row = |class: Option<usize>| {
            let picked: Vec<f64> = scores
                .iter()
                .zip(items)
                .filter(|(_, it)| class.is_none_or(|c| it.2 == c))
                .map(|(s, _)| *s)
                .collect();
            SweepRow {
                k_percent: k,
                class,
                dice: mean(picked.iter().copied()).unwrap_or(f64::NAN),
                samples: picked.len(),
            }
        };
        rows.push(row(None));
        for c in 0..classes {
            if items.iter().any(|it| it.2 == c) {
                rows.push(row(Some(c)));
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k_percent,class,dice,samples\n");
    for r in rows {
        let class = r.class.map_or_else(|| "all".to_string(), |c| c.to_string());
        out.push_str(&format!("{},{},{:.6},{}\n", r.k_percent, class, r.dice, r.samples));
    }
    out
}

/// Passes run and discarded before timing starts.
pub const WARMUP_PASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub trials: usize,
    pub mean_s: f64,
    /// Sample standard deviation.
    pub std_s: f64,
    pub samples_s: Vec<f64>,
}

impl BenchStats {
    pub fn from_samples(samples_s: Vec<f64>) -> Result<Self> {
        let n = samples_s.len();
        if n < 2 {
            return Err(Error::config("trials", "need at least two timed trials"));
        }
        let mean_s = samples_s.iter().sum::<f64>() / n as f64;
        let var = samples_s.iter().map(|t| (t - mean_s).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            trials: n,
            mean_s,
            std_s: var.sqrt(),
            samples_s,
        })
    }

    pub fn coefficient_of_variation(&self) -> f64 {
        self.std_s / self.mean_s
    }

    /// `"X s ± Y ms"`.
    pub fn display(&self) -> String {
        format!("{:.3} s ± {:.1} ms", self.mean_s, self.std_s * 1e3)
    }
}

/// Times `pass` over `trials` runs after [`WARMUP_PASSES`] discarded runs.
pub fn benchmark<F: FnMut() -> Result<()>>(mut pass: F, trials: usize) -> Result<BenchStats> {
    if trials < 2 {
        return Err(Error::config("trials", "need at least two timed trials"));
    }
    for _ in 0..WARMUP_PASSES {
        pass()?;
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        pass()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    BenchStats::from_samples(samples)
}
