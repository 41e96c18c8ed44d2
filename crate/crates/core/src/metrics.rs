//! Overlap and surface-distance metrics for binary masks.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::losses::FOREGROUND;
use crate::network::ProbabilityMap;

/// Foreground iff the foreground probability is strictly above one half.
pub fn binarize(map: &ProbabilityMap) -> Array2<u8> {
    let fg = map.0.index_axis(ndarray::Axis(0), FOREGROUND);
    fg.mapv(|p| u8::from(p > 0.5))
}

fn check_same_shape(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks agree perfectly.
pub fn dsc(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// Foreground pixels with at least one background (or out-of-image) 4-neighbour.
pub fn boundary(mask: &Array2<u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if mask[(r, c)] == 0 {
            return false;
        }
        let bg = |rr: isize, cc: isize| {
            rr < 0
                || cc < 0
                || rr >= h as isize
                || cc >= w as isize
                || mask[(rr as usize, cc as usize)] == 0
        };
        let (r, c) = (r as isize, c as isize);
        bg(r - 1, c) || bg(r + 1, c) || bg(r, c - 1) || bg(r, c + 1)
    })
}

/// One-dimensional squared distance transform (lower envelope of parabolas)
/// over sample positions `i * spacing`.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let pos = |i: usize| i as f64 * spacing;
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + pos(q).powi(2)) - (f[p] + pos(p).powi(2))) / (2.0 * (pos(q) - pos(p)));
            // z[0] is -inf, so this stops at k = 0.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        *o = (pos(q) - pos(v[k])).powi(2) + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest `true` pixel of `sites`,
/// with per-axis pixel spacing `(row, col)`.
pub fn distance_transform(sites: &Array2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = sites.dim();
    let mut grid = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_in[r] = grid[(r, c)];
        }
        edt_1d(&col_in, spacing.0, &mut col_out);
        for r in 0..h {
            grid[(r, c)] = col_out[r];
        }
    }
    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        for c in 0..w {
            row_in[c] = grid[(r, c)];
        }
        edt_1d(&row_in, spacing.1, &mut row_out);
        for c in 0..w {
            grid[(r, c)] = row_out[c];
        }
    }
    grid.mapv_into(f64::sqrt)
}

fn mean_boundary_distance(from: &Array2<bool>, to_distance: &Array2<f64>) -> f64 {
    let (sum, count) = from
        .iter()
        .zip(to_distance.iter())
        .filter(|(&b, _)| b)
        .fold((0.0, 0usize), |(s, n), (_, &d)| (s + d, n + 1));
    sum / count as f64
}

/// Average symmetric surface distance: the mean of the two directed mean
/// boundary-to-boundary distances.
pub fn asd(pred: &Array2<u8>, gt: &Array2<u8>, spacing: (f64, f64)) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if pred.iter().all(|&v| v == 0) {
        return Err(Error::EmptyMask("prediction has no foreground".into()));
    }
    if gt.iter().all(|&v| v == 0) {
        return Err(Error::EmptyMask("ground truth has no foreground".into()));
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let to_gt = distance_transform(&bg, spacing);
    let to_pred = distance_transform(&bp, spacing);
    Ok(0.5 * (mean_boundary_distance(&bp, &to_gt) + mean_boundary_distance(&bg, &to_pred)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub sample_id: String,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub asd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Per-sample scores plus dataset summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Free-form provenance, written as a `#` comment line.
    pub note: String,
    pub samples: Vec<SampleEval>,
}

impl EvalReport {
    pub fn dsc(&self) -> MeanStd {
        MeanStd::of(&self.samples.iter().map(|s| s.dsc).collect::<Vec<_>>())
    }

    /// Summary over samples with a defined ASD.
    pub fn asd(&self) -> MeanStd {
        MeanStd::of(
            &self
                .samples
                .iter()
                .filter_map(|s| s.asd)
                .collect::<Vec<_>>(),
        )
    }

    pub fn asd_excluded(&self) -> usize {
        self.samples.iter().filter(|s| s.asd.is_none()).count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if !self.note.is_empty() {
            let _ = writeln!(out, "# {}", self.note);
        }
        let _ = writeln!(out, "# asd_excluded={}", self.asd_excluded());
        out.push_str("sample_id\tdsc\tasd\n");
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.9}"));
        for s in &self.samples {
            let _ = writeln!(out, "{}\t{:.9}\t{}", s.sample_id, s.dsc, fmt_opt(s.asd));
        }
        let (d, a) = (self.dsc(), self.asd());
        let finite = |v: f64| v.is_finite().then_some(v);
        let _ = writeln!(out, "mean\t{:.9}\t{}", d.mean, fmt_opt(finite(a.mean)));
        let _ = writeln!(out, "std\t{:.9}\t{}", d.std, fmt_opt(finite(a.std)));
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores one predicted mask against its ground truth.
pub fn evaluate_masks(
    sample_id: &str,
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    spacing: (f64, f64),
) -> Result<SampleEval> {
    let d = dsc(pred, gt)?;
    let a = match asd(pred, gt, spacing) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask(reason)) => {
            log::debug!("asd undefined for {sample_id}: {reason}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(SampleEval {
        sample_id: sample_id.to_string(),
        dsc: d,
        asd: a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask_from(rows: &[&str]) -> Array2<u8> {
        let h = rows.len();
        let w = rows[0].len();
        Array2::from_shape_fn((h, w), |(r, c)| u8::from(rows[r].as_bytes()[c] == b'#'))
    }

    #[test]
    fn dsc_examples() {
        let a = mask_from(&["##..", "##..", "....", "...."]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask_from(&["....", "....", "..##", "..##"]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = mask_from(&[".##.", ".##.", "....", "...."]);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
        let empty = Array2::zeros((4, 4));
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
        assert!(dsc(&a, &Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn asd_examples() {
        let a = mask_from(&["#...", "....", "....", "...."]);
        let b = mask_from(&["...#", "....", "....", "...."]);
        assert_eq!(asd(&a, &b, (1.0, 1.0)).unwrap(), 3.0);
        assert_eq!(asd(&a, &a, (1.0, 1.0)).unwrap(), 0.0);
        assert_eq!(asd(&a, &b, (1.0, 0.5)).unwrap(), 1.5);
        assert!(matches!(
            asd(&a, &Array2::zeros((4, 4)), (1.0, 1.0)),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn boundary_uses_four_connectivity() {
        let m = mask_from(&["#####", "#####", "#####", "#####", "#####"]);
        let b = boundary(&m);
        assert!(!b[(2, 2)]);
        assert!(b[(0, 2)] && b[(2, 0)]);
        let inner = mask_from(&[".....", ".###.", ".###.", ".###.", "....."]);
        let bi = boundary(&inner);
        assert!(!bi[(2, 2)] && bi[(1, 1)] && bi[(2, 1)]);
    }

    #[test]
    fn binarize_uses_strict_threshold() {
        let map = |fg: f32| {
            ProbabilityMap(Array3::from_shape_fn((2, 3, 3), |(k, _, _)| {
                if k == 1 {
                    fg
                } else {
                    1.0 - fg
                }
            }))
        };
        assert!(binarize(&map(0.6)).iter().all(|&v| v == 1));
        assert!(binarize(&map(0.4)).iter().all(|&v| v == 0));
        assert!(binarize(&map(0.5)).iter().all(|&v| v == 0));
    }

    #[test]
    fn report_tsv_layout() {
        let report = EvalReport {
            note: "model=teacher".into(),
            samples: vec![
                SampleEval {
                    sample_id: "s1".into(),
                    dsc: 0.5,
                    asd: Some(1.0),
                },
                SampleEval {
                    sample_id: "s2".into(),
                    dsc: 1.0,
                    asd: None,
                },
            ],
        };
        let tsv = report.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "# model=teacher");
        assert_eq!(lines[1], "# asd_excluded=1");
        assert_eq!(lines[2], "sample_id\tdsc\tasd");
        assert!(lines[4].ends_with("\tNA"));
        assert!(lines[5].starts_with("mean\t0.750000000\t1.000000000"));
        assert_eq!(lines.len(), 7);
    }
}
