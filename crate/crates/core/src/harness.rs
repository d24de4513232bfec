//! Evaluation, efficiency/performance curves and CSV reports.
//!
//! Efficiency is the mean fraction of blocks executed per example. Every
//! CSV number is printed with nine significant digits in positional
//! notation, and rows are emitted in a fixed order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::backbone::Model;
use crate::baselines::{forward_baseline, BaselineConfig};
use crate::dact::{argmax, forward_adaptive, forward_full, TraceStep};
use crate::data::{Difficulty, Encoded};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodKind {
    Dact,
    Entropy,
    Patience,
    Static,
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::Dact => "dact",
            MethodKind::Entropy => "entropy",
            MethodKind::Patience => "patience",
            MethodKind::Static => "static",
        })
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dact" => Ok(MethodKind::Dact),
            "entropy" => Ok(MethodKind::Entropy),
            "patience" => Ok(MethodKind::Patience),
            "static" => Ok(MethodKind::Static),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// An inference procedure together with its knob.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Dact,
    Entropy(f64),
    Patience(usize),
    /// Every block, predicting with the last output head.
    Static,
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::Dact => MethodKind::Dact,
            Method::Entropy(_) => MethodKind::Entropy,
            Method::Patience(_) => MethodKind::Patience,
            Method::Static => MethodKind::Static,
        }
    }

    /// Entropy threshold or patience; 0 for methods without a knob.
    pub fn knob(&self) -> f64 {
        match *self {
            Method::Entropy(t) => t,
            Method::Patience(p) => p as f64,
            Method::Dact | Method::Static => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub method: MethodKind,
    /// tau for DACT, threshold for entropy, patience for patience.
    pub knob: f64,
    pub seed: u64,
    pub efficiency: f64,
    pub performance: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Accuracy,
    /// Binary F1 with class 1 as positive.
    F1,
    Matthews,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "f1" => Ok(Metric::F1),
            "mcc" | "matthews" => Ok(Metric::Matthews),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

pub fn score(metric: Metric, preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    match metric {
        Metric::Accuracy => preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64,
        Metric::F1 => {
            let (tp, fp, fn_, _) = confusion(preds, labels);
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        }
        Metric::Matthews => {
            let (tp, fp, fn_, tn) = confusion(preds, labels);
            let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
            if den == 0.0 {
                0.0
            } else {
                (tp * tn - fp * fn_) / den
            }
        }
    }
}

fn confusion(preds: &[usize], labels: &[usize]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    (tp, fp, fn_, tn)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleResult {
    pub prediction: usize,
    pub label: usize,
    pub layers_used: usize,
    pub difficulty: Option<Difficulty>,
    /// Per-block DACT trace; empty for other methods.
    pub trace: Vec<TraceStep>,
}

/// Per-block execution counts over an evaluation set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerHistogram {
    pub counts: Vec<usize>,
}

impl LayerHistogram {
    pub fn from_layers(num_blocks: usize, layers: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = vec![0; num_blocks];
        for used in layers {
            for c in &mut counts[..used] {
                *c += 1;
            }
        }
        LayerHistogram { counts }
    }

    pub fn is_non_increasing(&self) -> bool {
        self.counts.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub point: TradeoffPoint,
    pub results: Vec<ExampleResult>,
    pub histogram: LayerHistogram,
}

impl EvalReport {
    pub fn performance(&self, metric: Metric) -> f64 {
        let preds: Vec<usize> = self.results.iter().map(|r| r.prediction).collect();
        let labels: Vec<usize> = self.results.iter().map(|r| r.label).collect();
        score(metric, &preds, &labels)
    }

    /// Mean blocks executed over examples with the given tag.
    pub fn mean_layers(&self, tag: Difficulty) -> Option<f64> {
        let used: Vec<usize> = self
            .results
            .iter()
            .filter(|r| r.difficulty == Some(tag))
            .map(|r| r.layers_used)
            .collect();
        (!used.is_empty()).then(|| used.iter().sum::<usize>() as f64 / used.len() as f64)
    }
}

fn run_one(model: &Model, ex: &Encoded, method: Method) -> Result<ExampleResult> {
    let n = model.num_blocks();
    let (prediction, layers_used, trace) = match method {
        Method::Dact => {
            let out = forward_adaptive(model, &ex.ids)?;
            (out.prediction, out.layers_used, out.trace)
        }
        Method::Entropy(threshold) => {
            let out = forward_baseline(model, &ex.ids, BaselineConfig::Entropy { threshold })?;
            (out.prediction, out.layers_used, Vec::new())
        }
        Method::Patience(patience) => {
            let out = forward_baseline(model, &ex.ids, BaselineConfig::Patience { patience })?;
            (out.prediction, out.layers_used, Vec::new())
        }
        Method::Static => {
            let (_, readouts) = forward_full(model, &ex.ids)?;
            (argmax(&readouts[n - 1].y), n, Vec::new())
        }
    };
    Ok(ExampleResult {
        prediction,
        label: ex.label,
        layers_used,
        difficulty: ex.difficulty,
        trace,
    })
}

/// Runs `method` on every example (in parallel when `exec` allows) and
/// aggregates accuracy and efficiency.
pub fn evaluate(model: &Model, data: &[Encoded], method: Method, exec: Execution) -> Result<EvalReport> {
    let c = model.config().num_classes;
    if let Some(ex) = data.iter().find(|ex| ex.label >= c) {
        return Err(Error::contract(format!(
            "dataset label {} does not fit a model with {c} classes",
            ex.label
        )));
    }
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let results = par::map(exec, data, |ex| run_one(model, ex, method))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = model.num_blocks();
    let executed: usize = results.iter().map(|r| r.layers_used).sum();
    let histogram = LayerHistogram::from_layers(n, results.iter().map(|r| r.layers_used));
    let mut report = EvalReport {
        point: TradeoffPoint {
            method: method.kind(),
            knob: method.knob(),
            seed: 0,
            efficiency: executed as f64 / (n * data.len()) as f64,
            performance: 0.0,
        },
        results,
        histogram,
    };
    report.point.performance = report.performance(Metric::Accuracy);
    Ok(report)
}

pub fn layer_histogram(model: &Model, data: &[Encoded], method: Method, exec: Execution) -> Result<LayerHistogram> {
    Ok(evaluate(model, data, method, exec)?.histogram)
}

/// Mean over examples of the halting values summed over all blocks.
pub fn mean_ponder(model: &Model, data: &[Encoded], exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let sums = par::map(exec, data, |ex| {
        forward_full(model, &ex.ids).map(|(_, r)| r.iter().map(|b| b.h).sum::<f64>())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / sums.len() as f64)
}

/// Examples on which early-exit DACT inference predicts the same class as
/// the full-depth accumulated answer, and the number of examples.
pub fn early_exit_agreement(model: &Model, data: &[Encoded], exec: Execution) -> Result<(usize, usize)> {
    let same = par::map(exec, data, |ex| -> Result<bool> {
        let early = forward_adaptive(model, &ex.ids)?;
        let (full, _) = forward_full(model, &ex.ids)?;
        Ok(early.prediction == full.prediction())
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok((same.iter().filter(|&&s| s).count(), same.len()))
}

/// Mean and 95% half-width (`Z95 * s / sqrt(n)`, sample standard deviation).
pub fn band(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * var.sqrt() / n.sqrt())
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Trapezoid area under `(x, y)` points, which must be sorted by `x`.
/// Undefined for fewer than two points.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    Some(
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum(),
    )
}

/// Seed-aggregated statistics for one knob value.
#[derive(Clone, Debug, PartialEq)]
pub struct BandPoint {
    pub knob: f64,
    pub n: usize,
    pub efficiency: f64,
    pub efficiency_half_width: f64,
    pub efficiency_std: f64,
    pub performance: f64,
    pub performance_half_width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodCurve {
    pub method: MethodKind,
    /// Sorted by mean efficiency.
    pub points: Vec<BandPoint>,
    /// Area over the method's own observed efficiency range.
    pub auc: Option<f64>,
    pub efficiency_range: (f64, f64),
}

impl MethodCurve {
    /// Linear interpolation of mean performance at efficiency `e`; `None`
    /// outside the observed range.
    pub fn performance_at(&self, e: f64) -> Option<f64> {
        let (lo, hi) = self.efficiency_range;
        if e < lo || e > hi {
            return None;
        }
        for w in self.points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if e >= a.efficiency && e <= b.efficiency {
                if b.efficiency == a.efficiency {
                    return Some(a.performance.max(b.performance));
                }
                let t = (e - a.efficiency) / (b.efficiency - a.efficiency);
                return Some(a.performance + t * (b.performance - a.performance));
            }
        }
        self.points.first().map(|p| p.performance)
    }
}

/// Groups points by method and knob, aggregates seeds, sorts by efficiency
/// and integrates performance over efficiency.
pub fn curve(points: &[TradeoffPoint]) -> Vec<MethodCurve> {
    let mut groups: BTreeMap<MethodKind, BTreeMap<u64, Vec<&TradeoffPoint>>> = BTreeMap::new();
    for p in points {
        groups
            .entry(p.method)
            .or_default()
            .entry(knob_key(p.knob))
            .or_default()
            .push(p);
    }
    groups
        .into_iter()
        .map(|(method, knobs)| {
            let mut pts: Vec<BandPoint> = knobs
                .into_values()
                .map(|ps| {
                    let eff: Vec<f64> = ps.iter().map(|p| p.efficiency).collect();
                    let perf: Vec<f64> = ps.iter().map(|p| p.performance).collect();
                    let (e, eh) = band(&eff);
                    let (q, qh) = band(&perf);
                    BandPoint {
                        knob: ps[0].knob,
                        n: ps.len(),
                        efficiency: e,
                        efficiency_half_width: eh,
                        efficiency_std: std_dev(&eff),
                        performance: q,
                        performance_half_width: qh,
                    }
                })
                .collect();
            pts.sort_by(|a, b| a.efficiency.total_cmp(&b.efficiency).then(a.knob.total_cmp(&b.knob)));
            let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.efficiency, p.performance)).collect();
            let range = (xy[0].0, xy[xy.len() - 1].0);
            MethodCurve {
                method,
                auc: trapezoid_auc(&xy),
                efficiency_range: range,
                points: pts,
            }
        })
        .collect()
}

/// Order-preserving map from f64 to u64 so knobs sort numerically.
fn knob_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Nine significant digits in positional notation.
pub fn fmt9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.00000000".into();
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if exp < 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    } else if exp >= 8 {
        out.push_str(&digits);
        out.extend(std::iter::repeat_n('0', (exp - 8) as usize));
    } else {
        let split = exp as usize + 1;
        out.push_str(&digits[..split]);
        out.push('.');
        out.push_str(&digits[split..]);
    }
    out
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

pub fn write_tradeoff_csv<W: Write>(w: W, points: &[TradeoffPoint]) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record(["method", "knob", "seed", "efficiency", "performance"])?;
    for p in points {
        w.write_record([
            p.method.to_string(),
            fmt9(p.knob),
            p.seed.to_string(),
            fmt9(p.efficiency),
            fmt9(p.performance),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_tradeoff_csv<R: Read>(r: R) -> Result<Vec<TradeoffPoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::Data {
            line,
            msg: format!("bad or missing `{what}`"),
        };
        let num =
            |i: usize, what: &str| -> Result<f64> { rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad(what)) };
        out.push(TradeoffPoint {
            method: rec.get(0).ok_or_else(|| bad("method"))?.parse()?,
            knob: num(1, "knob")?,
            seed: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("seed"))?,
            efficiency: num(3, "efficiency")?,
            performance: num(4, "performance")?,
        });
    }
    Ok(out)
}

pub fn write_curve_csv<W: Write>(w: W, curves: &[MethodCurve]) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record([
        "method",
        "knob",
        "n",
        "efficiency_mean",
        "efficiency_lo",
        "efficiency_hi",
        "performance_mean",
        "performance_lo",
        "performance_hi",
    ])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.method.to_string(),
                fmt9(p.knob),
                p.n.to_string(),
                fmt9(p.efficiency),
                fmt9(p.efficiency - p.efficiency_half_width),
                fmt9(p.efficiency + p.efficiency_half_width),
                fmt9(p.performance),
                fmt9(p.performance - p.performance_half_width),
                fmt9(p.performance + p.performance_half_width),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_auc_csv<W: Write>(w: W, curves: &[MethodCurve]) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record(["method", "auc", "efficiency_min", "efficiency_max", "points"])?;
    for c in curves {
        w.write_record([
            c.method.to_string(),
            c.auc.map_or_else(|| "undefined".to_string(), fmt9),
            fmt9(c.efficiency_range.0),
            fmt9(c.efficiency_range.1),
            c.points.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn write_histogram_csv<W: Write>(w: W, hist: &LayerHistogram) -> Result<()> {
    let mut w = csv_writer(w);
    w.write_record(["block", "count"])?;
    for (b, c) in hist.counts.iter().enumerate() {
        w.write_record([(b + 1).to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// One row per executed block of every example. `halted` marks the row at
/// which inference stopped.
pub fn write_trace_csv<W: Write>(w: W, results: &[ExampleResult], num_classes: usize) -> Result<()> {
    let mut w = csv_writer(w);
    let mut header = vec!["example".to_string(), "block".into(), "h".into(), "p".into()];
    header.extend((0..num_classes).map(|k| format!("a_{k}")));
    header.extend((0..num_classes).map(|k| format!("y_{k}")));
    header.extend(["bound".to_string(), "halted".into()]);
    w.write_record(&header)?;
    for (i, r) in results.iter().enumerate() {
        for t in &r.trace {
            let mut row = vec![i.to_string(), t.block.to_string(), fmt9(t.h), fmt9(t.p)];
            row.extend(t.a.iter().map(|&v| fmt9(v)));
            row.extend(t.y.iter().map(|&v| fmt9(v)));
            row.push(u8::from(t.bound).to_string());
            row.push(u8::from(t.block == r.layers_used).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(method: MethodKind, knob: f64, seed: u64, e: f64, p: f64) -> TradeoffPoint {
        TradeoffPoint {
            method,
            knob,
            seed,
            efficiency: e,
            performance: p,
        }
    }

    #[test]
    fn fmt9_cases() {
        assert_eq!(fmt9(0.425), "0.425000000");
        assert_eq!(fmt9(1.0), "1.00000000");
        assert_eq!(fmt9(5e-5), "0.0000500000000");
        assert_eq!(fmt9(-12.5), "-12.5000000");
        assert_eq!(fmt9(123456789012.0), "123456789000");
        assert_eq!(fmt9(0.0), "0.00000000");
        assert_eq!(fmt9(2.0 / 3.0), "0.666666667");
    }

    #[test]
    fn two_point_auc() {
        assert!((trapezoid_auc(&[(0.5, 0.8), (1.0, 0.9)]).unwrap() - 0.425).abs() < 1e-15);
        assert!(trapezoid_auc(&[(0.5, 0.8)]).is_none());
    }

    #[test]
    fn identical_seeds_give_zero_band() {
        let pts: Vec<_> = (0..3).map(|s| pt(MethodKind::Dact, 0.5, s, 0.4, 0.9)).collect();
        let c = curve(&pts);
        assert_eq!(c[0].points[0].performance_half_width, 0.0);
        assert_eq!(c[0].points[0].efficiency_half_width, 0.0);
        assert!(c[0].auc.is_none());
    }

    #[test]
    fn band_matches_formula() {
        let (m, h) = band(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - 1.96 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dominance_gives_higher_auc() {
        let mut pts = Vec::new();
        for (i, e) in [0.2, 0.5, 0.9].iter().enumerate() {
            pts.push(pt(MethodKind::Dact, i as f64, 0, *e, 0.8 + 0.1 * e));
            pts.push(pt(MethodKind::Entropy, i as f64, 0, *e, 0.7 + 0.1 * e));
        }
        let c = curve(&pts);
        assert_eq!(c[0].method, MethodKind::Dact);
        assert!(c[0].auc.unwrap() > c[1].auc.unwrap());
        assert!((c[0].performance_at(0.35).unwrap() - 0.835).abs() < 1e-12);
        assert!(c[0].performance_at(0.1).is_none());
    }

    #[test]
    fn curve_sorts_by_efficiency() {
        let pts = vec![
            pt(MethodKind::Entropy, 0.1, 0, 0.9, 0.9),
            pt(MethodKind::Entropy, 0.6, 0, 0.2, 0.6),
            pt(MethodKind::Entropy, 0.3, 0, 0.5, 0.8),
        ];
        let c = curve(&pts);
        let effs: Vec<f64> = c[0].points.iter().map(|p| p.efficiency).collect();
        assert_eq!(effs, vec![0.2, 0.5, 0.9]);
    }

    #[test]
    fn metrics() {
        let preds = [1, 1, 0, 0, 1];
        let labels = [1, 0, 0, 1, 1];
        assert!((score(Metric::Accuracy, &preds, &labels) - 0.6).abs() < 1e-15);
        // tp=2 fp=1 fn=1 tn=1
        assert!((score(Metric::F1, &preds, &labels) - 4.0 / 6.0).abs() < 1e-15);
        let mcc = (2.0 * 1.0 - 1.0 * 1.0) / (3.0f64 * 3.0 * 2.0 * 2.0).sqrt();
        assert!((score(Metric::Matthews, &preds, &labels) - mcc).abs() < 1e-15);
    }

    #[test]
    fn histogram_from_layers() {
        let h = LayerHistogram::from_layers(4, [1, 4, 2, 2]);
        assert_eq!(h.counts, vec![4, 3, 1, 1]);
        assert!(h.is_non_increasing());
    }

    #[test]
    fn tradeoff_csv_round_trip() {
        let pts = vec![
            pt(MethodKind::Dact, 5e-5, 1, 0.75, 0.875),
            pt(MethodKind::Patience, 3.0, 0, 0.5, 0.625),
        ];
        let mut buf = Vec::new();
        write_tradeoff_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("method,knob,seed,efficiency,performance\n"));
        assert_eq!(read_tradeoff_csv(buf.as_slice()).unwrap(), pts);
    }
}
