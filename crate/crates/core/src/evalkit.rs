//! Post-processing, detection metrics, and pseudo-label analysis.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numgrad::Array;

/// Sliding median with edge replication.
pub fn median_filter(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("median window {window} must be odd and positive")));
    }
    let n = x.len();
    if window == 1 || n == 0 {
        return Ok(x.to_vec());
    }
    let half = window / 2;
    let mut buf = vec![0.0; window];
    Ok((0..n)
        .map(|t| {
            for (o, b) in buf.iter_mut().enumerate() {
                let src = (t + o).saturating_sub(half).min(n - 1);
                *b = x[src];
            }
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect())
}

/// Median filter applied independently to every column of a `T × C` matrix.
pub fn median_filter_columns(probs: &Array, window: usize) -> Result<Array> {
    let (t, c) = probs.dims2();
    let mut out = Array::zeros(&[t, c]);
    for j in 0..c {
        let col: Vec<f64> = (0..t).map(|i| probs.get(i, j)).collect();
        for (i, v) in median_filter(&col, window)?.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Half-open `(onset, offset)` frame intervals per category.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EventList {
    pub per_category: Vec<Vec<(usize, usize)>>,
}

impl EventList {
    pub fn categories(&self) -> usize {
        self.per_category.len()
    }

    pub fn total(&self) -> usize {
        self.per_category.iter().map(Vec::len).sum()
    }

    /// Maximal runs of nonzero entries in each column.
    pub fn from_binary(active: &Array) -> Self {
        let (t, c) = active.dims2();
        let per_category = (0..c)
            .map(|j| {
                let mut runs = Vec::new();
                let mut start = None;
                for i in 0..=t {
                    let on = i < t && active.get(i, j) != 0.0;
                    match (on, start) {
                        (true, None) => start = Some(i),
                        (false, Some(s)) => {
                            runs.push((s, i));
                            start = None;
                        }
                        _ => {}
                    }
                }
                runs
            })
            .collect();
        Self { per_category }
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

/// `1` where `probs ≥ threshold`, else `0`.
pub fn binarize(probs: &Array, threshold: f64) -> Result<Array> {
    check_threshold(threshold)?;
    Ok(probs.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}

pub fn binarize_and_extract(probs: &Array, threshold: f64) -> Result<EventList> {
    Ok(EventList::from_binary(&binarize(probs, threshold)?))
}

/// Per-category frame counts pooled over clips.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl FrameCounts {
    pub fn new(categories: usize) -> Self {
        Self {
            tp: vec![0; categories],
            fp: vec![0; categories],
            fn_: vec![0; categories],
        }
    }

    pub fn add(&mut self, pred: &Array, truth: &Array) -> Result<()> {
        if pred.dims2() != truth.dims2() || pred.cols() != self.tp.len() {
            return Err(Error::Contract(format!(
                "prediction shape {:?} does not match truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        for (i, (&p, &y)) in pred.data().iter().zip(truth.data()).enumerate() {
            let c = i % self.tp.len();
            match (p != 0.0, y != 0.0) {
                (true, true) => self.tp[c] += 1,
                (true, false) => self.fp[c] += 1,
                (false, true) => self.fn_[c] += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    /// Mean of per-category `2TP / (2TP + FP + FN)`; a category with no
    /// positives on either side counts as 1.
    pub fn macro_f1(&self) -> f64 {
        let n = self.tp.len();
        if n == 0 {
            return 1.0;
        }
        (0..n)
            .map(|c| {
                let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
                if denom == 0 {
                    1.0
                } else {
                    2.0 * self.tp[c] as f64 / denom as f64
                }
            })
            .sum::<f64>()
            / n as f64
    }
}

pub fn frame_macro_f1(pred: &Array, truth: &Array) -> Result<f64> {
    let mut counts = FrameCounts::new(truth.cols());
    counts.add(pred, truth)?;
    Ok(counts.macro_f1())
}

/// Matched, predicted and reference event counts pooled over clips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub matched: u64,
    pub predicted: u64,
    pub reference: u64,
}

impl EventCounts {
    pub fn f1(&self) -> f64 {
        let denom = self.predicted + self.reference;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.matched as f64 / denom as f64
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Parameter(format!("rho {rho} outside (0, 1]")));
    }
    Ok(())
}

/// Greedy one-to-one matching in onset order: a prediction matches the
/// first unmatched reference of its category whose overlap covers at least
/// `rho` of both events.
pub fn match_events(pred: &EventList, truth: &EventList, rho: f64) -> Result<EventCounts> {
    check_rho(rho)?;
    if pred.categories() != truth.categories() {
        return Err(Error::Contract(format!(
            "{} predicted categories against {} reference categories",
            pred.categories(),
            truth.categories()
        )));
    }
    let mut counts = EventCounts::default();
    for (p_events, t_events) in pred.per_category.iter().zip(&truth.per_category) {
        let mut p_sorted = p_events.clone();
        p_sorted.sort_unstable();
        let mut t_sorted = t_events.clone();
        t_sorted.sort_unstable();
        let mut used = vec![false; t_sorted.len()];
        for &(ps, pe) in &p_sorted {
            for (j, &(ts, te)) in t_sorted.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let inter = pe.min(te).saturating_sub(ps.max(ts)) as f64;
                if inter > 0.0 && inter >= rho * (te - ts) as f64 && inter >= rho * (pe - ps) as f64 {
                    used[j] = true;
                    counts.matched += 1;
                    break;
                }
            }
        }
        counts.predicted += p_events.len() as u64;
        counts.reference += t_events.len() as u64;
    }
    Ok(counts)
}

pub fn event_f1_intersection(pred: &EventList, truth: &EventList, rho: f64) -> Result<f64> {
    Ok(match_events(pred, truth, rho)?.f1())
}

/// Detection scores over a set of clips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub frame_macro_f1: f64,
    pub event_f1: f64,
}

impl Metrics {
    pub fn report(&self) -> String {
        format!("frame_macro_f1: {}\nevent_f1: {}\n", self.frame_macro_f1, self.event_f1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostProcessing {
    pub threshold: f64,
    /// Median window; 1 disables filtering.
    pub median_window: usize,
    pub rho: f64,
}

impl Default for PostProcessing {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 7,
            rho: 0.5,
        }
    }
}

/// Scores `(probabilities, truth)` pairs, each `T × C`, after median
/// filtering and thresholding.
pub fn score_clips<'a>(
    clips: impl IntoIterator<Item = (&'a Array, &'a Array)>,
    post: &PostProcessing,
) -> Result<Metrics> {
    check_threshold(post.threshold)?;
    check_rho(post.rho)?;
    let mut frames: Option<FrameCounts> = None;
    let mut events = EventCounts::default();
    for (probs, truth) in clips {
        let filtered = median_filter_columns(probs, post.median_window)?;
        let pred = binarize(&filtered, post.threshold)?;
        frames.get_or_insert_with(|| FrameCounts::new(truth.cols())).add(&pred, truth)?;
        let c = match_events(&EventList::from_binary(&pred), &EventList::from_binary(truth), post.rho)?;
        events.matched += c.matched;
        events.predicted += c.predicted;
        events.reference += c.reference;
    }
    Ok(Metrics {
        frame_macro_f1: frames.map_or(1.0, |f| f.macro_f1()),
        event_f1: events.f1(),
    })
}

/// Point-biserial coefficients between category indicators (rows, with an
/// optional trailing no-event row) and prototype responsibilities (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Array,
    /// Entries whose indicator or responsibility column had zero variance
    /// and were reported as 0.
    pub undefined: Vec<bool>,
    pub has_none_row: bool,
}

impl CorrelationMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn prototypes(&self) -> usize {
        self.values.cols()
    }

    pub fn categories(&self) -> usize {
        self.rows() - usize::from(self.has_none_row)
    }

    pub fn get(&self, row: usize, k: usize) -> f64 {
        self.values.get(row, k)
    }

    pub fn is_undefined(&self, row: usize, k: usize) -> bool {
        self.undefined[row * self.prototypes() + k]
    }

    /// Tab-free CSV with a header of prototype indices; rows labelled by
    /// category index or `none`.
    pub fn to_csv(&self, prototype_labels: &[usize]) -> String {
        let mut s = String::from("category");
        for k in prototype_labels {
            let _ = write!(s, ",proto_{k}");
        }
        s.push('\n');
        for r in 0..self.rows() {
            if self.has_none_row && r == self.rows() - 1 {
                s.push_str("none");
            } else {
                let _ = write!(s, "{r}");
            }
            for k in 0..self.prototypes() {
                let _ = write!(s, ",{}", self.get(r, k));
            }
            s.push('\n');
        }
        s
    }
}

/// Pearson correlation, or `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if x.is_empty() || x.len() != y.len() || constant(x) || constant(y) {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `pseudo` is `N × K` and `truth` is `N × C` over the same frames.
pub fn point_biserial_matrix(pseudo: &Array, truth: &Array, include_none: bool) -> Result<CorrelationMatrix> {
    let (n, k) = pseudo.dims2();
    let (n2, c) = truth.dims2();
    if n != n2 {
        return Err(Error::Contract(format!("{n} pseudo-label frames against {n2} truth frames")));
    }
    let mut indicators: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..n).map(|t| if truth.get(t, j) != 0.0 { 1.0 } else { 0.0 }).collect())
        .collect();
    if include_none {
        indicators.push((0..n).map(|t| if truth.row(t).iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 }).collect());
    }
    let columns: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|t| pseudo.get(t, j)).collect()).collect();
    let rows = indicators.len();
    let mut values = Array::zeros(&[rows, k]);
    let mut undefined = vec![false; rows * k];
    for (r, ind) in indicators.iter().enumerate() {
        for (j, col) in columns.iter().enumerate() {
            match pearson(ind, col) {
                Some(v) => values.set(r, j, v),
                None => undefined[r * k + j] = true,
            }
        }
    }
    Ok(CorrelationMatrix {
        values,
        undefined,
        has_none_row: include_none,
    })
}

/// Greedy reordering: each category in turn takes the unassigned prototype
/// it correlates with most (ties to the lowest index); leftover prototypes
/// follow in index order. Returns the permuted matrix and, for each new
/// column, the original prototype index.
pub fn reorder_prototypes(m: &CorrelationMatrix) -> (CorrelationMatrix, Vec<usize>) {
    let k = m.prototypes();
    let mut taken = vec![false; k];
    let mut perm = Vec::with_capacity(k);
    for r in 0..m.categories() {
        let best = (0..k)
            .filter(|&j| !taken[j])
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if m.get(r, b) >= m.get(r, j) => Some(b),
                _ => Some(j),
            });
        if let Some(j) = best {
            taken[j] = true;
            perm.push(j);
        }
    }
    perm.extend((0..k).filter(|&j| !taken[j]));
    let rows = m.rows();
    let mut values = Array::zeros(&[rows, k]);
    let mut undefined = vec![false; rows * k];
    for r in 0..rows {
        for (new, &old) in perm.iter().enumerate() {
            values.set(r, new, m.get(r, old));
            undefined[r * k + new] = m.is_undefined(r, old);
        }
    }
    (
        CorrelationMatrix {
            values,
            undefined,
            has_none_row: m.has_none_row,
        },
        perm,
    )
}

/// Writes `frame, gamma_0..gamma_{K-1}, truth_0..truth_{C-1}` rows.
pub fn export_timeline(path: &Path, pseudo: &Array, truth: &Array) -> Result<()> {
    let (t, k) = pseudo.dims2();
    let (t2, c) = truth.dims2();
    if t != t2 {
        return Err(Error::Contract(format!("{t} pseudo-label frames against {t2} truth frames")));
    }
    let mut s = String::from("frame");
    (0..k).for_each(|j| {
        let _ = write!(s, ",gamma_{j}");
    });
    (0..c).for_each(|j| {
        let _ = write!(s, ",truth_{j}");
    });
    s.push('\n');
    for i in 0..t {
        let _ = write!(s, "{i}");
        for j in 0..k {
            let _ = write!(s, ",{}", pseudo.get(i, j));
        }
        for j in 0..c {
            let _ = write!(s, ",{}", truth.get(i, j) as u8);
        }
        s.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a timeline back as `(pseudo T × K, truth T × C)`.
pub fn parse_timeline(path: &Path) -> Result<(Array, Array)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::format(path, "empty timeline"))?.split(',').collect();
    let k = header.iter().filter(|h| h.starts_with("gamma_")).count();
    let c = header.iter().filter(|h| h.starts_with("truth_")).count();
    if header.first() != Some(&"frame") || header.len() != 1 + k + c {
        return Err(Error::format(path, "unexpected timeline header"));
    }
    let (mut pseudo, mut truth) = (Vec::new(), Vec::new());
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + k + c || fields[0] != i.to_string() {
            return Err(Error::format(path, format!("malformed row {i}")));
        }
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::format(path, format!("bad number '{f}' in row {i}")))?;
            if pseudo.len() < (rows + 1) * k {
                pseudo.push(v);
            } else {
                truth.push(v);
            }
        }
        rows += 1;
    }
    Ok((Array::new(&[rows, k], pseudo)?, Array::new(&[rows, c], truth)?))
}
