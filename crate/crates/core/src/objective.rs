//! Losses and evaluation metrics.
//!
//! The training objective is BCE over predicted probabilities plus a
//! multi-label circle loss over raw logits, each with masked-label support:
//! a label of -1 marks an unannotated class and is excluded from the BCE
//! average, from both circle-loss index sets, and from F1 counts. With no
//! masks the formulas reduce to the plain 1/12-averaged forms.

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Real;
use crate::NUM_AU;
use serde::{Deserialize, Serialize};

/// Probability clamp for logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Decision threshold for binarizing probabilities.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-frame annotation: one of {-1, 0, 1} per AU class, -1 = unannotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector([i8; NUM_AU]);

impl LabelVector {
    pub fn new(values: [i8; NUM_AU]) -> Result<Self> {
        if values.iter().any(|&v| !(-1..=1).contains(&v)) {
            return Err(Error::Config(format!(
                "label values must be in {{-1,0,1}}, got {values:?}"
            )));
        }
        Ok(LabelVector(values))
    }

    pub fn values(&self) -> &[i8; NUM_AU] {
        &self.0
    }

    pub fn get(&self, i: usize) -> i8 {
        self.0[i]
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn is_negative(&self, i: usize) -> bool {
        self.0[i] == 0
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.0[i] == -1
    }

    pub fn unmasked_count(&self) -> usize {
        self.0.iter().filter(|&&v| v != -1).count()
    }

    /// Indices with label 1 (the positive set of the circle loss).
    pub fn positive_indices(&self) -> Vec<usize> {
        (0..NUM_AU).filter(|&i| self.0[i] == 1).collect()
    }

    /// Indices with label 0 (the negative set of the circle loss).
    pub fn negative_indices(&self) -> Vec<usize> {
        (0..NUM_AU).filter(|&i| self.0[i] == 0).collect()
    }
}

/// Loss components for one sample or one averaged batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub circle: f64,
    pub total: f64,
    /// True when every class was masked, so the losses are vacuous zeros.
    pub all_masked: bool,
}

fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::of_f64(PROB_EPS);
    let hi = T::of_f64(1.0 - PROB_EPS);
    p.max(lo).min(hi)
}

/// Binary cross-entropy, averaged over unmasked classes.
/// Returns (loss, unmasked count); zero loss when everything is masked.
pub fn bce_loss<T: Real>(probs: &[T], labels: &LabelVector) -> (T, usize) {
    debug_assert_eq!(probs.len(), NUM_AU);
    let mut acc = T::zero();
    let mut n = 0usize;
    for i in 0..NUM_AU {
        if labels.is_masked(i) {
            continue;
        }
        let p = clamp_prob(probs[i]);
        let term = if labels.is_positive(i) {
            p.ln()
        } else {
            (T::one() - p).ln()
        };
        acc = acc + term;
        n += 1;
    }
    if n == 0 {
        (T::zero(), 0)
    } else {
        (-acc / T::of_f64(n as f64), n)
    }
}

/// Multi-label circle loss over raw logits, overflow-safe:
/// log(1 + sum_neg e^{s_i}) + log(1 + sum_pos e^{-s_j}).
pub fn circle_loss<T: Real>(logits: &[T], labels: &LabelVector) -> T {
    debug_assert_eq!(logits.len(), NUM_AU);
    let neg: Vec<T> = labels.negative_indices().iter().map(|&i| logits[i]).collect();
    let pos: Vec<T> = labels.positive_indices().iter().map(|&i| -logits[i]).collect();
    log1p_sum_exp(&neg) + log1p_sum_exp(&pos)
}

/// ln(1 + sum_i e^{x_i}) with the max shifted out. Empty input gives 0.
fn log1p_sum_exp<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = xs.iter().copied().fold(T::zero(), T::max);
    let mut sum = (-m).exp();
    for &x in xs {
        sum = sum + (x - m).exp();
    }
    sum.ln() + m
}

/// Combined objective. `use_circle = false` drops the circle term.
pub fn total_loss<T: Real>(
    probs: &[T],
    logits: &[T],
    labels: &LabelVector,
    use_circle: bool,
) -> LossBreakdown {
    let (bce, n) = bce_loss(probs, labels);
    let circle = if use_circle {
        circle_loss(logits, labels)
    } else {
        T::zero()
    };
    let total = bce + circle;
    LossBreakdown {
        bce: bce.as_f64(),
        circle: circle.as_f64(),
        total: total.as_f64(),
        all_masked: n == 0,
    }
}

/// Handles to the loss values recorded on a training tape.
#[derive(Debug, Clone, Copy)]
pub struct TapedLoss {
    pub bce: Val,
    pub circle: Val,
    pub total: Val,
}

/// Record the BCE term on the tape as a weighted sum of log-probabilities,
/// so gradients flow back through `probs`.
pub fn bce_on_tape<T: Real>(tape: &mut Tape<T>, probs: Val, labels: &LabelVector) -> Result<Val> {
    let n = labels.unmasked_count();
    if n == 0 {
        return Ok(tape.scalar(T::zero()));
    }
    let inv = -1.0 / n as f64;
    let mut w_pos = vec![T::zero(); NUM_AU];
    let mut w_neg = vec![T::zero(); NUM_AU];
    for i in 0..NUM_AU {
        if labels.is_positive(i) {
            w_pos[i] = T::of_f64(inv);
        } else if labels.is_negative(i) {
            w_neg[i] = T::of_f64(inv);
        }
    }
    let clamped = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.ln(clamped)?;
    let one_minus = tape.affine(clamped, -1.0, 1.0)?;
    let log_q = tape.ln(one_minus)?;
    let pos_term = tape.dot_const(log_p, &w_pos)?;
    let neg_term = tape.dot_const(log_q, &w_neg)?;
    tape.add(pos_term, neg_term)
}

/// Record the circle loss on the tape from raw logits.
pub fn circle_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Val,
    labels: &LabelVector,
) -> Result<Val> {
    let neg_idx = labels.negative_indices();
    let pos_idx = labels.positive_indices();
    let neg_term = if neg_idx.is_empty() {
        tape.scalar(T::zero())
    } else {
        let gathered = tape.gather(logits, &neg_idx)?;
        tape.log1p_sum_exp(gathered)?
    };
    let pos_term = if pos_idx.is_empty() {
        tape.scalar(T::zero())
    } else {
        let gathered = tape.gather(logits, &pos_idx)?;
        let negated = tape.affine(gathered, -1.0, 0.0)?;
        tape.log1p_sum_exp(negated)?
    };
    tape.add(neg_term, pos_term)
}

/// Record the full objective; `probs` must be the sigmoid of `logits`.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    probs: Val,
    logits: Val,
    labels: &LabelVector,
    use_circle: bool,
) -> Result<TapedLoss> {
    let bce = bce_on_tape(tape, probs, labels)?;
    let circle = if use_circle {
        circle_on_tape(tape, logits, labels)?
    } else {
        tape.scalar(T::zero())
    };
    let total = tape.add(bce, circle)?;
    Ok(TapedLoss { bce, circle, total })
}

/// Threshold probabilities into per-class decisions.
pub fn binarize<T: Real>(probs: &[T], threshold: f64) -> [bool; NUM_AU] {
    let mut out = [false; NUM_AU];
    for i in 0..NUM_AU {
        out[i] = probs[i].as_f64() >= threshold;
    }
    out
}

/// Confusion counts for one class.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Per-AU F1 plus their unweighted mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct F1Report {
    pub per_au: [f64; NUM_AU],
    pub macro_f1: f64,
    pub counts: [ClassCounts; NUM_AU],
}

/// F1 over a prediction set. Masked labels are excluded per class;
/// 0/0 is defined as 0. Errors on an empty evaluation set.
pub fn f1_scores(preds: &[[bool; NUM_AU]], labels: &[LabelVector]) -> Result<F1Report> {
    if preds.is_empty() {
        return Err(Error::EmptyEval);
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "f1_scores",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut counts = [ClassCounts::default(); NUM_AU];
    for (p, l) in preds.iter().zip(labels) {
        for i in 0..NUM_AU {
            if l.is_masked(i) {
                continue;
            }
            match (p[i], l.is_positive(i)) {
                (true, true) => counts[i].tp += 1,
                (true, false) => counts[i].fp += 1,
                (false, true) => counts[i].fn_ += 1,
                (false, false) => counts[i].tn += 1,
            }
        }
    }
    let mut per_au = [0.0; NUM_AU];
    for i in 0..NUM_AU {
        let denom = 2 * counts[i].tp + counts[i].fp + counts[i].fn_;
        per_au[i] = if denom == 0 {
            0.0
        } else {
            2.0 * counts[i].tp as f64 / denom as f64
        };
    }
    let macro_f1 = per_au.iter().sum::<f64>() / NUM_AU as f64;
    Ok(F1Report {
        per_au,
        macro_f1,
        counts,
    })
}

/// Render the report as a one-row table: 12 per-AU columns plus Avg,
/// percentages with two decimals.
pub fn format_report(report: &F1Report) -> String {
    let mut header = String::from("Val Set ");
    let mut row = String::from("scores  ");
    for (i, name) in crate::AU_NAMES.iter().enumerate() {
        header.push_str(&format!("{name:>7}"));
        row.push_str(&format!("{:>7.2}", report.per_au[i] * 100.0));
    }
    header.push_str(&format!("{:>7}", "Avg."));
    row.push_str(&format!("{:>7.2}", report.macro_f1 * 100.0));
    format!("{header}\n{row}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn labels(v: [i8; 12]) -> LabelVector {
        LabelVector::new(v).unwrap()
    }

    #[test]
    fn bce_uniform_half_is_ln2() {
        let probs = [0.5f64; 12];
        let (loss, n) = bce_loss(&probs, &labels([1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0]));
        assert_eq!(n, 12);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_mixed_hand_case() {
        // y = [1, 0 x11], probs = [0.9, 0.1, 0.5 x10]
        let mut probs = [0.5f64; 12];
        probs[0] = 0.9;
        probs[1] = 0.1;
        let (loss, _) = bce_loss(&probs, &labels([1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]));
        let expect = -(0.9f64.ln() + 0.9f64.ln() + 10.0 * 0.5f64.ln()) / 12.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.59518).abs() < 1e-4);
    }

    #[test]
    fn bce_perfect_confident_is_tiny() {
        let mut probs = [1.0f64; 12];
        probs[6] = 0.0;
        let mut y = [1i8; 12];
        y[6] = 0;
        let (loss, _) = bce_loss(&probs, &labels(y));
        assert!(loss > 0.0 && loss <= -(1.0 - PROB_EPS).ln() + 1e-12);
    }

    #[test]
    fn bce_all_masked_is_zero_with_flag() {
        let (loss, n) = bce_loss(&[0.3f64; 12], &labels([-1; 12]));
        assert_eq!(loss, 0.0);
        assert_eq!(n, 0);
        let br = total_loss(&[0.3f64; 12], &[0.0f64; 12], &labels([-1; 12]), true);
        assert!(br.all_masked);
        assert_eq!(br.total, 0.0);
    }

    #[test]
    fn circle_hand_case() {
        // s = [2, -1], y = [1, 0], rest masked
        let mut s = [0.0f64; 12];
        s[0] = 2.0;
        s[1] = -1.0;
        let mut y = [-1i8; 12];
        y[0] = 1;
        y[1] = 0;
        let loss = circle_loss(&s, &labels(y));
        let expect = (1.0 + (-1.0f64).exp()).ln() + (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.44019).abs() < 1e-4);
    }

    #[test]
    fn circle_single_very_negative_score() {
        let mut s = [0.0f64; 12];
        s[3] = -10.0;
        let mut y = [-1i8; 12];
        y[3] = 0;
        let loss = circle_loss(&s, &labels(y));
        assert!((loss - 4.539_89e-5).abs() < 1e-9);
    }

    #[test]
    fn circle_all_masked_is_zero() {
        assert_eq!(circle_loss(&[3.0f64; 12], &labels([-1; 12])), 0.0);
    }

    #[test]
    fn total_is_sum_of_components() {
        let mut probs = [0.5f64; 12];
        probs[0] = 0.9;
        probs[1] = 0.1;
        let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let y = labels([1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let br = total_loss(&probs, &logits, &y, true);
        assert!((br.total - (br.bce + br.circle)).abs() < 1e-12);
        let br_off = total_loss(&probs, &logits, &y, false);
        assert_eq!(br_off.circle, 0.0);
        assert_eq!(br_off.total, br_off.bce);
    }

    #[test]
    fn derived_component_sum() {
        let bce = 0.59518f64;
        let circle = 0.44019f64;
        assert!((bce + circle - 1.0354).abs() < 1e-4);
    }

    #[test]
    fn taped_losses_match_pure_functions() {
        use crate::tensor::{rand_tensor, seeded_rng};
        let mut rng = seeded_rng(31, 0);
        for _ in 0..50 {
            let logits_t = rand_tensor::<f64>(&mut rng, vec![12], 6.0);
            let mut lv = [0i8; 12];
            for v in lv.iter_mut() {
                *v = match rng.next_u32() % 4 {
                    0 => 1,
                    1 => -1,
                    _ => 0,
                };
            }
            let y = labels(lv);

            let mut tape = Tape::new();
            let lg = tape.constant(logits_t.clone());
            let pr = tape.sigmoid(lg).unwrap();
            let tl = loss_on_tape(&mut tape, pr, lg, &y, true).unwrap();

            let probs: Vec<f64> = logits_t
                .data()
                .iter()
                .map(|&x| 1.0 / (1.0 + (-x).exp()))
                .collect();
            let br = total_loss(&probs, logits_t.data(), &y, true);
            assert!((tape.value(tl.bce).item() - br.bce).abs() < 1e-10);
            assert!((tape.value(tl.circle).item() - br.circle).abs() < 1e-10);
            assert!((tape.value(tl.total).item() - br.total).abs() < 1e-10);
        }
    }

    #[test]
    fn circle_gradient_signs() {
        // loss decreases in positive-class logits, increases in negative ones
        use crate::tensor::{rand_tensor, seeded_rng};
        let mut rng = seeded_rng(17, 0);
        for _ in 0..20 {
            let logits_t = rand_tensor::<f64>(&mut rng, vec![12], 3.0);
            let y = labels([1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0]);
            let mut tape = Tape::new();
            let lg = tape.constant(logits_t);
            let loss = circle_on_tape(&mut tape, lg, &y).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(lg).unwrap();
            for i in 0..12 {
                if y.is_positive(i) {
                    assert!(g[i] < 0.0, "positive-class grad should be negative");
                } else {
                    assert!(g[i] > 0.0, "negative-class grad should be positive");
                }
            }
        }
    }

    #[test]
    fn f1_hand_confusion_case() {
        // one class with TP=2, FP=1, FN=1 over four samples
        let mut pos_pred = [false; 12];
        pos_pred[0] = true;
        let preds = vec![pos_pred, pos_pred, pos_pred, [false; 12]];
        let ls = vec![
            labels([1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]),
            labels([1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]),
            labels([0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]),
            labels([1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]),
        ];
        let r = f1_scores(&preds, &ls).unwrap();
        assert!((r.per_au[0] - 2.0 * 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.counts[0].tp, 2);
        assert_eq!(r.counts[0].fp, 1);
        assert_eq!(r.counts[0].fn_, 1);
    }

    #[test]
    fn f1_perfect_predictions() {
        // every class sees at least one positive, so 0/0 never kicks in
        let ls = vec![
            labels([1; 12]),
            labels([0; 12]),
            labels([1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0]),
            labels([0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]),
        ];
        let preds: Vec<[bool; 12]> = ls
            .iter()
            .map(|l| {
                let mut p = [false; 12];
                for i in 0..12 {
                    p[i] = l.is_positive(i);
                }
                p
            })
            .collect();
        let r = f1_scores(&preds, &ls).unwrap();
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn f1_empty_set_is_error() {
        assert!(matches!(f1_scores(&[], &[]), Err(Error::EmptyEval)));
    }

    #[test]
    fn label_vector_rejects_out_of_domain() {
        assert!(LabelVector::new([2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn binarize_threshold_semantics() {
        let probs = [0.49f64, 0.5, 0.51, 0.0, 1.0, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3];
        let b = binarize(&probs, 0.5);
        assert!(!b[0] && b[1] && b[2] && !b[3] && b[4]);
    }

    #[test]
    fn report_layout_has_thirteen_columns() {
        let mut report = F1Report {
            per_au: [0.5; 12],
            macro_f1: 0.5,
            counts: [ClassCounts::default(); 12],
        };
        report.per_au[0] = 0.5641;
        let text = format_report(&report);
        let header = text.lines().next().unwrap();
        assert!(header.contains("AU1") && header.contains("AU26") && header.contains("Avg."));
        assert!(text.lines().nth(1).unwrap().contains("56.41"));
    }
}
