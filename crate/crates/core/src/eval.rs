//! Evaluation protocol: flip test-time augmentation, training-set threshold
//! selection, pooled Dice, precision-recall curves with average precision,
//! and paired t-confidence intervals.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{resize_bilinear, Image, Mask};
use crate::error::{Error, Result};
use crate::train::predict_sample;
use crate::unet::UNetModel;

/// A probability map with its ground truth and field of view, all at the
/// same resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub prob: Image,
    pub gt: Mask,
    pub fov: Mask,
}

impl EvalItem {
    fn check(&self) -> Result<()> {
        let d = self.prob.dims();
        if self.prob.channels != 1 || self.gt.dims() != d || self.fov.dims() != d {
            return Err(Error::invalid(format!(
                "eval item shapes differ: prob {}x{}x{}, gt {}x{}, fov {}x{}",
                d.0, d.1, self.prob.channels, self.gt.height, self.gt.width, self.fov.height, self.fov.width
            )));
        }
        Ok(())
    }
}

/// Positive iff `p >= t`, compared in f64.
#[inline]
pub fn is_positive(p: f32, t: f64) -> bool {
    p as f64 >= t
}

/// Pooled confusion counts over in-FOV pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)`; 1 when prediction and truth are both empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn item_counts(item: &EvalItem, threshold: f64) -> Result<Counts> {
    item.check()?;
    let mut c = Counts::default();
    for ((&p, &g), &f) in item.prob.data.iter().zip(&item.gt.data).zip(&item.fov.data) {
        if f == 0 {
            continue;
        }
        match (is_positive(p, threshold), g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn pooled_counts(items: &[EvalItem], threshold: f64) -> Result<Counts> {
    let mut total = Counts::default();
    for it in items {
        total.add(&item_counts(it, threshold)?);
    }
    if total.total() == 0 {
        return Err(Error::EmptyFov("pooled_dice"));
    }
    Ok(total)
}

/// Dice of all in-FOV pixels of all items taken together.
pub fn pooled_dice(items: &[EvalItem], threshold: impl Into<f64>) -> Result<f64> {
    Ok(pooled_counts(items, threshold.into())?.dice())
}

pub const THRESHOLD_STEPS: usize = 100;

/// Grid threshold `i / 100`.
pub fn grid_threshold(i: usize) -> f64 {
    i as f64 / THRESHOLD_STEPS as f64
}

/// Largest grid index `i` with `p >= i / 100`, or `None` below the grid.
fn grid_bin(p: f32) -> Option<usize> {
    if !is_positive(p, 0.0) {
        return None;
    }
    let mut k = (libm::floor(p as f64 * THRESHOLD_STEPS as f64).max(0.0) as usize).min(THRESHOLD_STEPS);
    while k < THRESHOLD_STEPS && is_positive(p, grid_threshold(k + 1)) {
        k += 1;
    }
    while k > 0 && !is_positive(p, grid_threshold(k)) {
        k -= 1;
    }
    Some(k)
}

/// Pooled counts at every grid threshold in one pass.
pub fn grid_counts(items: &[EvalItem]) -> Result<Vec<Counts>> {
    let n = THRESHOLD_STEPS + 1;
    let (mut pos_bins, mut neg_bins) = (vec![0u64; n], vec![0u64; n]);
    let (mut pos, mut neg, mut pos_below, mut neg_below) = (0u64, 0u64, 0u64, 0u64);
    for it in items {
        it.check()?;
        for ((&p, &g), &f) in it.prob.data.iter().zip(&it.gt.data).zip(&it.fov.data) {
            if f == 0 {
                continue;
            }
            let bin = grid_bin(p);
            if g != 0 {
                pos += 1;
                match bin {
                    Some(k) => pos_bins[k] += 1,
                    None => pos_below += 1,
                }
            } else {
                neg += 1;
                match bin {
                    Some(k) => neg_bins[k] += 1,
                    None => neg_below += 1,
                }
            }
        }
    }
    if pos + neg == 0 {
        return Err(Error::EmptyFov("select_threshold"));
    }
    let _ = (pos_below, neg_below);
    // predicted positive at threshold i: every pixel whose bin is >= i
    let mut out = vec![Counts::default(); n];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..n).rev() {
        tp += pos_bins[i];
        fp += neg_bins[i];
        out[i] = Counts {
            tp,
            fp,
            fn_: pos - tp,
            tn: neg - fp,
        };
    }
    Ok(out)
}

/// Grid threshold maximising pooled Dice; ties resolve to the lowest.
pub fn select_threshold(items: &[EvalItem]) -> Result<f64> {
    let counts = grid_counts(items)?;
    if counts[0].tp + counts[0].fn_ == 0 {
        return Err(Error::NoPositives("select_threshold"));
    }
    let mut best = 0;
    for (i, c) in counts.iter().enumerate() {
        if c.dice() > counts[best].dice() {
            best = i;
        }
    }
    Ok(grid_threshold(best))
}

/// Average of the four flip variants `{id, h, v, hv}`: each flips the input,
/// predicts, and flips the output back.
pub fn predict_tta(model: &UNetModel, image: &Image) -> Result<Image> {
    let variants: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];
    let mut preds = Vec::with_capacity(4);
    for (h, v) in variants {
        let mut x = image.clone();
        if h {
            x = x.flip_h();
        }
        if v {
            x = x.flip_v();
        }
        let mut p = predict_sample(model, &x)?;
        if v {
            p = p.flip_v();
        }
        if h {
            p = p.flip_h();
        }
        preds.push(p.data);
    }
    // summing in sorted order makes the mean independent of variant order,
    // so flipping the input flips the output bit for bit
    let data = (0..image.height * image.width)
        .map(|i| {
            let mut v = [preds[0][i], preds[1][i], preds[2][i], preds[3][i]];
            v.sort_unstable_by(f32::total_cmp);
            (v.iter().map(|&x| x as f64).sum::<f64>() / 4.0) as f32
        })
        .collect();
    Image::new(image.height, image.width, 1, data)
}

/// Probability map at the model's input size, optionally with TTA, resized
/// bilinearly to `(height, width)`.
pub fn predict_at(model: &UNetModel, input: &Image, height: usize, width: usize, tta: bool) -> Result<Image> {
    let p = if tta {
        predict_tta(model, input)?
    } else {
        predict_sample(model, input)?
    };
    Ok(resize_bilinear(&p, height, width))
}

/// Precision-recall points at every distinct score, in descending score
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f32>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn pr_curve(scores: &[f32], labels: &[u8]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "pr_curve",
            axis: "labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l != 0).count() as u64;
    if positives == 0 {
        return Err(Error::NoPositives("pr_curve"));
    }
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
    let mut curve = PrCurve {
        thresholds: Vec::new(),
        precision: Vec::new(),
        recall: Vec::new(),
    };
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k] as usize];
        while k < order.len() && scores[order[k] as usize] == s {
            if labels[order[k] as usize] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.thresholds.push(s);
        curve.precision.push(tp as f64 / (tp + fp) as f64);
        curve.recall.push(tp as f64 / positives as f64);
    }
    Ok(curve)
}

/// Step-wise average precision `sum_n (R_n - R_{n-1}) P_n`, `R_0 = 0`.
pub fn auprc(curve: &PrCurve) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (&p, &r) in curve.precision.iter().zip(&curve.recall) {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// In-FOV scores and labels of all items, concatenated.
pub fn pooled_scores(items: &[EvalItem]) -> Result<(Vec<f32>, Vec<u8>)> {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for it in items {
        it.check()?;
        for ((&p, &g), &f) in it.prob.data.iter().zip(&it.gt.data).zip(&it.fov.data) {
            if f != 0 {
                s.push(p);
                l.push(g);
            }
        }
    }
    Ok((s, l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sided {
    One,
    Two,
}

/// Confidence interval for the mean of paired differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    /// `+inf` for one-sided intervals.
    pub upper: f64,
    pub std_dev: f64,
    pub t_critical: f64,
    pub n: usize,
}

impl Interval {
    /// Zero lies outside the interval.
    pub fn significant(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

/// Student-t interval: one-sided `[mean - t_{level} s / sqrt(n), inf)`,
/// two-sided `mean -+ t_{(1 + level) / 2} s / sqrt(n)`.
pub fn paired_tci(diffs: &[f64], sided: Sided, level: f64) -> Result<Interval> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::invalid(format!("paired_tci needs >= 2 differences, got {n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = libm::sqrt(var);
    let df = (n - 1) as f64;
    let q = match sided {
        Sided::One => level,
        Sided::Two => 0.5 * (1.0 + level),
    };
    let t = student_t_quantile(q, df);
    let half = t * sd / libm::sqrt(n as f64);
    let (lower, upper) = match sided {
        Sided::One => (mean - half, f64::INFINITY),
        Sided::Two => (mean - half, mean + half),
    };
    Ok(Interval {
        mean,
        lower,
        upper,
        std_dev: sd,
        t_critical: t,
        n,
    })
}

/// Regularised incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * libm::log(x) + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// CDF of Student's t with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Inverse CDF by bisection.
pub fn student_t_quantile(p: f64, df: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0 && df > 0.0, "quantile needs p in (0, 1), df > 0");
    if p < 0.5 {
        return -student_t_quantile(1.0 - p, df);
    }
    let mut hi = 1.0;
    while student_t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Auprc,
}

/// Outcome of evaluating one model on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub metric: Metric,
    pub threshold: f64,
    pub counts: Counts,
    pub dice: f64,
    pub auprc: Option<f64>,
    pub per_image_dice: Vec<(String, f64)>,
}

impl EvalReport {
    /// Thresholds at `threshold`, pools counts, and computes AUPRC when the
    /// metric asks for it.
    pub fn compute(name: &str, metric: Metric, ids: &[String], items: &[EvalItem], threshold: f64) -> Result<Self> {
        let counts = pooled_counts(items, threshold)?;
        let per_image_dice = ids
            .iter()
            .zip(items)
            .map(|(id, it)| Ok((id.clone(), item_counts(it, threshold)?.dice())))
            .collect::<Result<Vec<_>>>()?;
        let auprc = match metric {
            Metric::Dice => None,
            Metric::Auprc => {
                let (s, l) = pooled_scores(items)?;
                Some(auprc(&pr_curve(&s, &l)?))
            }
        };
        Ok(Self {
            name: name.into(),
            metric,
            threshold,
            counts,
            dice: counts.dice(),
            auprc,
            per_image_dice,
        })
    }

    pub const CSV_HEADER: &'static str = "name,metric,threshold,tp,fp,fn,tn,dice,auprc";

    pub fn csv_row(&self) -> String {
        let metric = match self.metric {
            Metric::Dice => "dice",
            Metric::Auprc => "auprc",
        };
        let c = &self.counts;
        format!(
            "{},{},{:.2},{},{},{},{},{:.6},{}",
            self.name,
            metric,
            self.threshold,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            self.dice,
            self.auprc.map_or(String::new(), |a| format!("{a:.6}"))
        )
    }

    pub fn text(&self) -> String {
        let c = &self.counts;
        let mut s = format!(
            "evaluation: {}\nthreshold: {:.2}\ncounts: tp={} fp={} fn={} tn={}\ndice: {:.6}\n",
            self.name, self.threshold, c.tp, c.fp, c.fn_, c.tn, self.dice
        );
        if let Some(a) = self.auprc {
            s += &format!("auprc: {a:.6}\n");
        }
        s += "per-image dice:\n";
        for (id, d) in &self.per_image_dice {
            s += &format!("  {id}: {d:.6}\n");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(p: &[f32], g: &[u8]) -> EvalItem {
        let n = p.len();
        EvalItem {
            prob: Image::new(1, n, 1, p.to_vec()).unwrap(),
            gt: Mask::new(1, n, g.to_vec()).unwrap(),
            fov: Mask::ones(1, n),
        }
    }

    #[test]
    fn dice_hand_cases() {
        assert_eq!(pooled_dice(&[item(&[1.0, 0.0], &[1, 0])], 0.5).unwrap(), 1.0);
        assert_eq!(pooled_dice(&[item(&[1.0, 0.0], &[0, 1])], 0.5).unwrap(), 0.0);
        assert_eq!(pooled_dice(&[item(&[1.0, 1.0, 0.0], &[1, 0, 1])], 0.5).unwrap(), 0.5);
        let empty = EvalItem {
            fov: Mask::zeros(1, 2),
            ..item(&[1.0, 0.0], &[1, 0])
        };
        assert!(matches!(pooled_dice(&[empty], 0.5), Err(Error::EmptyFov(_))));
    }

    #[test]
    fn threshold_toy_cases() {
        assert_eq!(select_threshold(&[item(&[0.2, 0.6, 0.9], &[0, 1, 1])]).unwrap(), 0.21);
        assert_eq!(select_threshold(&[item(&[0.0, 1.0, 1.0], &[0, 1, 1])]).unwrap(), 0.01);
        assert!(matches!(
            select_threshold(&[item(&[0.3], &[0])]),
            Err(Error::NoPositives(_))
        ));
    }

    #[test]
    fn grid_bins_agree_with_comparison() {
        for k in 0..=1000 {
            let p = k as f32 / 1000.0;
            let bin = grid_bin(p).unwrap();
            for i in 0..=100 {
                assert_eq!(i <= bin, is_positive(p, grid_threshold(i)), "p={p} i={i}");
            }
        }
        assert_eq!(grid_bin(-0.1), None);
    }

    #[test]
    fn pr_hand_case() {
        let c = pr_curve(&[0.9, 0.8, 0.7, 0.6], &[1, 1, 0, 1]).unwrap();
        assert_eq!(c.precision, vec![1.0, 1.0, 2.0 / 3.0, 0.75]);
        assert_eq!(c.recall, vec![1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!((auprc(&c) - 11.0 / 12.0).abs() < 1e-15);
        let tied = pr_curve(&[0.5; 4], &[1, 0, 0, 1]).unwrap();
        assert_eq!((tied.precision.clone(), tied.recall.clone()), (vec![0.5], vec![1.0]));
        assert!(pr_curve(&[0.1], &[0]).is_err());
    }

    #[test]
    fn t_interval_hand_case() {
        let ci = paired_tci(&[1.0, 2.0, 3.0, 4.0], Sided::One, 0.95).unwrap();
        assert!((ci.t_critical - 2.353363).abs() < 1e-5);
        assert!((ci.lower - 0.981).abs() < 1e-3);
        assert!(ci.upper.is_infinite() && ci.significant());
        let two = paired_tci(&[1.0, 2.0, 3.0, 4.0], Sided::Two, 0.95).unwrap();
        assert!(((two.upper - two.mean) - (two.mean - two.lower)).abs() < 1e-12);
        let flat = paired_tci(&[0.3; 5], Sided::One, 0.95).unwrap();
        assert_eq!((flat.lower, flat.mean), (0.3, 0.3));
        assert!(paired_tci(&[1.0], Sided::One, 0.95).is_err());
    }

    #[test]
    fn report_recomputable_from_counts() {
        let items = [item(&[0.9, 0.2, 0.7], &[1, 1, 0])];
        let r = EvalReport::compute("x", Metric::Auprc, &["a".into()], &items, 0.5).unwrap();
        let c = r.counts;
        assert_eq!(r.dice, (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64);
        assert!(r.csv_row().starts_with("x,auprc,0.50,1,1,1,0,"));
        assert!(r.text().contains("auprc"));
    }
}
