//! Softmax cross-entropy and smooth-L1 regression losses over row batches.
//!
//! Rows are laid out as (rows, width, 1, 1) tensors.

use crate::error::{Error, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[label] - lse
}

fn row_layout(op: &'static str, shape: Shape) -> Result<(usize, usize)> {
    if shape.h != 1 || shape.w != 1 {
        return Err(Error::invalid(op, format!("expected (rows, width, 1, 1), got {shape}")));
    }
    Ok((shape.n, shape.c))
}

/// Cross-entropy of a single logit vector against `label`.
pub fn softmax_xent_value(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(
            "softmax_xent",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    Ok(-log_softmax_at(logits, label))
}

struct XentRule {
    labels: Vec<usize>,
}

impl Backward for XentRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let (rows, width) = (logits.shape().n, logits.shape().c);
        let scale = grad.item() / rows as f64;
        let mut d = Tensor::zeros(logits.shape());
        for (r, &label) in self.labels.iter().enumerate() {
            let row = &logits.data()[r * width..(r + 1) * width];
            let probs = softmax(row);
            let out = &mut d.data_mut()[r * width..(r + 1) * width];
            for (c, (o, p)) in out.iter_mut().zip(probs).enumerate() {
                *o = scale * (p - if c == label { 1.0 } else { 0.0 });
            }
        }
        Ok(vec![Some(d)])
    }
}

/// Mean over rows of `-log softmax(row)[label]`. Gradient per row is `softmax - onehot`.
pub fn softmax_xent(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (rows, width) = row_layout("softmax_xent", tape.shape(logits))?;
    if rows != labels.len() {
        return Err(Error::invalid(
            "softmax_xent",
            format!("{rows} rows but {} labels", labels.len()),
        ));
    }
    let data = tape.value(logits).data();
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        total += softmax_xent_value(&data[r * width..(r + 1) * width], label)?;
    }
    let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
    Ok(tape.push(
        "softmax_xent",
        Tensor::scalar(loss),
        vec![logits],
        Box::new(XentRule {
            labels: labels.to_vec(),
        }),
    ))
}

/// `0.5 d^2` when `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_slope(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Summed smooth-L1 between two equal-length vectors.
pub fn smooth_l1_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::invalid(
            "smooth_l1",
            format!("lengths differ: {} vs {}", pred.len(), target.len()),
        ));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| smooth_l1_scalar(p - t)).sum())
}

struct SmoothL1Rule {
    target: Tensor,
    scale: f64,
}

impl Backward for SmoothL1Rule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let k = grad.item() * self.scale;
        let data = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(p, t)| k * smooth_l1_slope(p - t))
            .collect();
        Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), data)?)])
    }
}

/// `scale * sum smooth_l1(pred - target)` over every element.
pub fn smooth_l1(tape: &mut Tape, pred: Var, target: Tensor, scale: f64) -> Result<Var> {
    let ps = tape.shape(pred);
    if ps != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "smooth_l1",
            left: ps,
            right: target.shape(),
        });
    }
    let loss = scale * smooth_l1_value(tape.value(pred).data(), target.data())?;
    Ok(tape.push(
        "smooth_l1",
        Tensor::scalar(loss),
        vec![pred],
        Box::new(SmoothL1Rule { target, scale }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln2() {
        for label in 0..2 {
            assert!((softmax_xent_value(&[0.0, 0.0], label).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_correct_logit_costs_nothing() {
        assert!(softmax_xent_value(&[800.0, -5.0], 0).unwrap() < 1e-300);
    }

    #[test]
    fn label_out_of_range() {
        assert!(softmax_xent_value(&[0.0, 1.0], 2).is_err());
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(softmax_xent(&mut tape, l, &[5]).is_err());
    }

    #[test]
    fn smooth_l1_zones() {
        assert_eq!(smooth_l1_value(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1_value(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.5);
        assert_eq!(smooth_l1_value(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 1.5);
        assert!(smooth_l1_value(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, -3.0, 0.5, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
