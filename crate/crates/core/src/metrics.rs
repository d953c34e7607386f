//! Overlap and detection metrics for binary masks, as percentages.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predicted lesion components overlapping a true lesion with at least this
/// IoU count as a detection.
pub const LESION_IOU: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[allow(clippy::struct_field_names)]
    pub fn_: u64,
    pub iou: f64,
    pub dice: f64,
    pub specificity: f64,
    pub f1_pixel: f64,
    pub f1_lesion: f64,
    pub fpr: f64,
}

fn binary(t: &Tensor, what: &str) -> Result<Vec<bool>> {
    t.data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::InvalidArgument(format!(
                    "{what} mask holds non-binary value {v}"
                )))
            }
        })
        .collect()
}

/// `100·num/den`, with `empty` when the denominator is zero.
fn pct(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Pixel confusion counts and metrics for one `H×W` pair of 0/1 masks.
///
/// Conventions for empty denominators: IoU, Dice and lesion F1 are 100 when
/// both masks are empty; specificity is 100 and FPR 0 when there is no
/// background.
pub fn compute_metrics(pred: &Tensor, truth: &Tensor) -> Result<MetricsRecord> {
    if pred.shape() != truth.shape() || pred.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "compute_metrics",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let p = binary(pred, "predicted")?;
    let t = binary(truth, "truth")?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&a, &b) in p.iter().zip(&t) {
        match (a, b) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let dice = pct(2 * tp, 2 * tp + fp + fn_, 100.0);
    let specificity = pct(tn, tn + fp, 100.0);
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    Ok(MetricsRecord {
        tp,
        fp,
        tn,
        fn_,
        iou: pct(tp, tp + fp + fn_, 100.0),
        dice,
        specificity,
        f1_pixel: dice,
        f1_lesion: lesion_f1(&p, &t, h, w),
        fpr: 100.0 - specificity,
    })
}

/// 4-connected component label per pixel (`usize::MAX` for background) and
/// the number of components.
pub fn components(mask: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut label = vec![usize::MAX; mask.len()];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = n;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (y, x) = (k / w, k % w);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = n;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(k - w);
            }
            if y + 1 < h {
                visit(k + w);
            }
            if x > 0 {
                visit(k - 1);
            }
            if x + 1 < w {
                visit(k + 1);
            }
        }
        n += 1;
    }
    (label, n)
}

/// Detection F1 over connected components.
///
/// A true lesion is detected when some predicted component has IoU ≥
/// [`LESION_IOU`] with it; a predicted component is a true positive when it
/// reaches that IoU with some true lesion.
fn lesion_f1(pred: &[bool], truth: &[bool], h: usize, w: usize) -> f64 {
    let (pl, np) = components(pred, h, w);
    let (tl, nt) = components(truth, h, w);
    if np == 0 && nt == 0 {
        return 100.0;
    }
    if np == 0 || nt == 0 {
        return 0.0;
    }
    let mut inter = vec![0u64; np * nt];
    let mut psize = vec![0u64; np];
    let mut tsize = vec![0u64; nt];
    for k in 0..pred.len() {
        if pl[k] != usize::MAX {
            psize[pl[k]] += 1;
        }
        if tl[k] != usize::MAX {
            tsize[tl[k]] += 1;
        }
        if pl[k] != usize::MAX && tl[k] != usize::MAX {
            inter[pl[k] * nt + tl[k]] += 1;
        }
    }
    let hit = |i: usize, j: usize| {
        let n = inter[i * nt + j];
        n > 0 && n as f64 / (psize[i] + tsize[j] - n) as f64 >= LESION_IOU
    };
    let detected = (0..nt).filter(|&j| (0..np).any(|i| hit(i, j))).count() as f64;
    let correct = (0..np).filter(|&i| (0..nt).any(|j| hit(i, j))).count() as f64;
    let recall = detected / nt as f64;
    let precision = correct / np as f64;
    if recall + precision == 0.0 {
        0.0
    } else {
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Per-image metrics with their identifiers.
#[derive(Clone, Debug, Default)]
pub struct MetricsTable {
    pub rows: Vec<(String, MetricsRecord)>,
}

impl MetricsTable {
    pub fn push(&mut self, id: impl Into<String>, r: MetricsRecord) {
        self.rows.push((id.into(), r));
    }

    /// Macro average: percentages averaged over images, counts summed.
    pub fn mean(&self) -> Option<MetricsRecord> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg =
            |f: fn(&MetricsRecord) -> f64| self.rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
        let sum = |f: fn(&MetricsRecord) -> u64| self.rows.iter().map(|(_, r)| f(r)).sum();
        let specificity = avg(|r| r.specificity);
        Some(MetricsRecord {
            tp: sum(|r| r.tp),
            fp: sum(|r| r.fp),
            tn: sum(|r| r.tn),
            fn_: sum(|r| r.fn_),
            iou: avg(|r| r.iou),
            dice: avg(|r| r.dice),
            specificity,
            f1_pixel: avg(|r| r.f1_pixel),
            f1_lesion: avg(|r| r.f1_lesion),
            fpr: avg(|r| r.fpr),
        })
    }

    /// One row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("image_id,tp,fp,tn,fn,iou,dice,specificity,f1_pixel,f1_lesion,fpr\n");
        let mut row = |id: &str, r: &MetricsRecord| {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.tp,
                r.fp,
                r.tn,
                r.fn_,
                r.iou,
                r.dice,
                r.specificity,
                r.f1_pixel,
                r.f1_lesion,
                r.fpr
            );
        };
        for (id, r) in &self.rows {
            row(id, r);
        }
        if let Some(m) = self.mean() {
            row("mean", &m);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> Tensor {
        Tensor::new(vec![h, w], bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Tensor {
        let d: Vec<f64> = (0..256)
            .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![16, 16], d).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = mask(2, 3, &[1, 0, 1, 1, 0, 0]);
        let r = compute_metrics(&m, &m).unwrap();
        assert_eq!(
            (r.iou, r.dice, r.fpr, r.f1_lesion),
            (100.0, 100.0, 0.0, 100.0)
        );
    }

    #[test]
    fn disjoint_masks() {
        let r = compute_metrics(&mask(1, 4, &[1, 1, 0, 0]), &mask(1, 4, &[0, 0, 1, 1])).unwrap();
        assert_eq!((r.iou, r.dice, r.f1_lesion), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_conventions() {
        let z = mask(2, 2, &[0; 4]);
        let r = compute_metrics(&z, &z).unwrap();
        assert_eq!(
            (r.iou, r.dice, r.specificity, r.fpr, r.f1_lesion),
            (100.0, 100.0, 100.0, 0.0, 100.0)
        );
        let full = mask(2, 2, &[1; 4]);
        let r = compute_metrics(&full, &full).unwrap();
        assert_eq!((r.specificity, r.fpr), (100.0, 0.0));
    }

    #[test]
    fn bad_inputs() {
        assert!(compute_metrics(&mask(2, 2, &[0; 4]), &mask(1, 4, &[0; 4])).is_err());
        let odd = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(compute_metrics(&odd, &mask(1, 2, &[0, 1])).is_err());
    }

    #[test]
    fn matches_brute_force_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (a, b) = (random_mask(&mut rng, 0.3), random_mask(&mut rng, 0.3));
            let r = compute_metrics(&a, &b).unwrap();
            let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
            for y in 0..16 {
                for x in 0..16 {
                    let (p, t) = (a.at(&[y, x]) == 1.0, b.at(&[y, x]) == 1.0);
                    if p && t {
                        tp += 1.0;
                    } else if p {
                        fp += 1.0;
                    } else if t {
                        fn_ += 1.0;
                    } else {
                        tn += 1.0;
                    }
                }
            }
            assert_eq!(
                (r.tp, r.fp, r.tn, r.fn_),
                (tp as u64, fp as u64, tn as u64, fn_ as u64)
            );
            assert!((r.iou - 100.0 * tp / (tp + fp + fn_)).abs() <= 1e-12);
            assert!((r.dice - 100.0 * 2.0 * tp / (2.0 * tp + fp + fn_)).abs() <= 1e-12);
            assert!((r.specificity - 100.0 * tn / (tn + fp)).abs() <= 1e-12);
            assert!((r.fpr - 100.0 * fp / (fp + tn)).abs() <= 1e-12);
            assert_eq!(r.f1_pixel, r.dice);
            let (i, d) = (r.iou / 100.0, r.dice / 100.0);
            assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
            assert_eq!(r.specificity + r.fpr, 100.0);
        }
    }

    #[test]
    fn swapping_classes_swaps_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flip = |t: &Tensor| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| 1.0 - v).collect(),
            )
            .unwrap()
        };
        for _ in 0..100 {
            let (a, b) = (random_mask(&mut rng, 0.4), random_mask(&mut rng, 0.4));
            let r = compute_metrics(&a, &b).unwrap();
            let s = compute_metrics(&flip(&a), &flip(&b)).unwrap();
            assert_eq!((r.tp, r.tn, r.fp, r.fn_), (s.tn, s.tp, s.fn_, s.fp));
        }
    }

    #[test]
    fn lesion_f1_counts_components() {
        // truth: two lesions; prediction hits one of them and adds one false blob
        let truth = mask(
            3,
            7,
            &[
                1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0,
            ],
        );
        let pred = mask(
            3,
            7,
            &[
                1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
            ],
        );
        let r = compute_metrics(&pred, &truth).unwrap();
        // recall 1/2, precision 1/2
        assert!((r.f1_lesion - 50.0).abs() < 1e-12);
        // a sliver below the overlap threshold does not count
        let big = mask(1, 12, &[1; 12]);
        let sliver = mask(1, 12, &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(compute_metrics(&sliver, &big).unwrap().f1_lesion, 0.0);
    }

    #[test]
    fn components_are_four_connected() {
        let m: Vec<bool> = [1, 0, 0, 0, 1, 0, 0, 0, 1]
            .iter()
            .map(|&b| b == 1)
            .collect();
        let (_, n) = components(&m, 3, 3);
        assert_eq!(n, 3);
    }

    #[test]
    fn csv_has_rows_and_mean() {
        let mut t = MetricsTable::default();
        t.push(
            "a",
            compute_metrics(&mask(1, 2, &[1, 0]), &mask(1, 2, &[1, 0])).unwrap(),
        );
        t.push(
            "b",
            compute_metrics(&mask(1, 2, &[0, 0]), &mask(1, 2, &[1, 0])).unwrap(),
        );
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "image_id,tp,fp,tn,fn,iou,dice,specificity,f1_pixel,f1_lesion,fpr"
        );
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,1,0,2,1,50.000000,50.000000"));
    }
}
