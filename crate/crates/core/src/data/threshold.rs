//! Single-threshold intensity classifier used to check that lesions cannot be
//! found from pixel values alone.

use super::phantom::Sample;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdResult {
    pub threshold: f64,
    /// `true`: pixels strictly above the threshold are lesion; `false`:
    /// pixels at or below it are.
    pub above: bool,
    /// Pooled lesion-pixel F1 over all samples, in percent.
    pub f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        200.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Best pooled lesion-pixel F1 over every threshold between distinct pixel
/// values, in both polarities.
pub fn best_threshold_f1(samples: &[Sample]) -> ThresholdResult {
    let mut px: Vec<(f64, bool)> = samples
        .iter()
        .flat_map(|s| {
            s.image
                .data()
                .iter()
                .zip(s.mask.data())
                .map(|(&v, &m)| (v, m == 1.0))
        })
        .collect();
    px.sort_by(|a, b| a.0.total_cmp(&b.0));
    let positives = px.iter().filter(|p| p.1).count();
    let negatives = px.len() - positives;
    let mut best = ThresholdResult {
        threshold: f64::NEG_INFINITY,
        above: true,
        f1: f1(positives, negatives, 0),
    };
    // `pos_below`/`neg_below` count pixels at or below the current cut.
    let (mut pos_below, mut neg_below) = (0, 0);
    let mut i = 0;
    while i < px.len() {
        let v = px[i].0;
        while i < px.len() && px[i].0 == v {
            if px[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let above = f1(positives - pos_below, negatives - neg_below, pos_below);
        let below = f1(pos_below, neg_below, positives - pos_below);
        if above > best.f1 {
            best = ThresholdResult {
                threshold: v,
                above: true,
                f1: above,
            };
        }
        if below > best.f1 {
            best = ThresholdResult {
                threshold: v,
                above: false,
                f1: below,
            };
        }
    }
    best
}
