//! In-batch softmax losses over dense row-major batches.
//!
//! For a batch of `B` rows with user vectors `u_o`, item-side vectors `x_r`
//! (the raw item embedding for the auxiliary loss, the quantized one for the
//! index loss) and item biases `b_r`:
//!
//! ```text
//! logit[o][r] = u_o . x_r + b_r - offset_r
//! loss        = sum_o weight_o * (logsumexp_r logit[o][r] - logit[o][o])
//! ```
//!
//! Rows with zero weight are skipped as anchors but their items still act as
//! negatives for the other rows.

/// Inputs of one in-batch softmax evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxBatch<'a> {
    pub dim: usize,
    /// `B x dim` user vectors.
    pub users: &'a [f64],
    /// `B x dim` item-side vectors.
    pub items: &'a [f64],
    /// `B` item biases.
    pub bias: &'a [f64],
    /// Per-row loss weights; `None` weighs every row by 1.
    pub weights: Option<&'a [f64]>,
    /// Per-column values subtracted from the logits (sampling correction).
    pub offsets: Option<&'a [f64]>,
}

impl SoftmaxBatch<'_> {
    pub fn rows(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxOutput {
    pub loss: f64,
    pub d_users: Vec<f64>,
    pub d_items: Vec<f64>,
    pub d_bias: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss value and gradients of the weighted in-batch softmax.
pub fn in_batch_softmax(batch: SoftmaxBatch<'_>) -> SoftmaxOutput {
    let b = batch.rows();
    let d = batch.dim;
    debug_assert_eq!(batch.users.len(), b * d);
    debug_assert_eq!(batch.items.len(), b * d);
    let mut out = SoftmaxOutput {
        loss: 0.0,
        d_users: vec![0.0; b * d],
        d_items: vec![0.0; b * d],
        d_bias: vec![0.0; b],
    };
    let mut logits = vec![0.0; b];
    for o in 0..b {
        let w = batch.weights.map_or(1.0, |w| w[o]);
        if w == 0.0 {
            continue;
        }
        let u = &batch.users[o * d..(o + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (r, l) in logits.iter_mut().enumerate() {
            *l = dot(u, &batch.items[r * d..(r + 1) * d]) + batch.bias[r]
                - batch.offsets.map_or(0.0, |off| off[r]);
            max = max.max(*l);
        }
        let target = logits[o];
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        // logits now hold unnormalized probabilities
        let log_z = z.ln() + max;
        out.loss += w * (log_z - target);
        for r in 0..b {
            let p = logits[r] / z;
            let g = w * (p - if r == o { 1.0 } else { 0.0 });
            if g == 0.0 {
                continue;
            }
            out.d_bias[r] += g;
            let x = &batch.items[r * d..(r + 1) * d];
            let du = &mut out.d_users[o * d..(o + 1) * d];
            for (a, xi) in du.iter_mut().zip(x) {
                *a += g * xi;
            }
            let dx = &mut out.d_items[r * d..(r + 1) * d];
            for (a, ui) in dx.iter_mut().zip(u) {
                *a += g * ui;
            }
        }
    }
    out
}

/// Sampling-probability correction: `ln(1 / delta)` per column, where the
/// occurrence interval `delta` estimates an item's inverse frequency.
pub fn logq_offsets(deltas: &[f64]) -> Vec<f64> {
    deltas.iter().map(|d| -d.ln()).collect()
}

/// `sum_o ||v_o - e_o||^2` and its gradient with respect to `v`.
pub fn similarity_loss(dim: usize, items: &[f64], quantized: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(items.len(), quantized.len());
    debug_assert_eq!(items.len() % dim.max(1), 0);
    let mut loss = 0.0;
    let grad = items
        .iter()
        .zip(quantized)
        .map(|(v, e)| {
            let diff = v - e;
            loss += diff * diff;
            2.0 * diff
        })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch<'a>(users: &'a [f64], items: &'a [f64], bias: &'a [f64], dim: usize) -> SoftmaxBatch<'a> {
        SoftmaxBatch {
            dim,
            users,
            items,
            bias,
            weights: None,
            offsets: None,
        }
    }

    #[test]
    fn single_row_has_zero_loss() {
        let out = in_batch_softmax(batch(&[0.3, -0.2], &[1.0, 4.0], &[0.5], 2));
        assert_eq!(out.loss, 0.0);
        assert!(out.d_users.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn equal_logits_give_log_two() {
        let out = in_batch_softmax(batch(&[0.0, 0.0], &[1.0, -1.0], &[0.0, 0.0], 1));
        assert!((out.loss - 2.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let users = [0.2, -0.4, 1.0, 0.3, 0.0, 0.7];
        let items = [0.5, 0.1, -0.3, 0.9, 0.2, -0.6];
        let bias = [0.1, -0.2, 0.05];
        let base = in_batch_softmax(batch(&users, &items, &bias, 2));
        let offsets = [3.5; 3];
        let shifted = in_batch_softmax(SoftmaxBatch {
            offsets: Some(&offsets),
            ..batch(&users, &items, &bias, 2)
        });
        assert!((base.loss - shifted.loss).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_rows_contribute_nothing() {
        let users = [0.2, -0.4, 1.0, 0.3];
        let items = [0.5, 0.1, -0.3, 0.9];
        let bias = [0.1, -0.2];
        let w = [0.0, 1.0];
        let out = in_batch_softmax(SoftmaxBatch {
            weights: Some(&w),
            ..batch(&users, &items, &bias, 2)
        });
        assert_eq!(&out.d_users[..2], &[0.0, 0.0]);
        // row 0's item still acts as a negative for row 1
        assert!(out.d_items[..2].iter().any(|g| *g != 0.0));
    }

    #[test]
    fn popular_items_get_larger_subtraction() {
        let off = logq_offsets(&[1.0, 100.0]);
        assert!(off[0] > off[1]);
        assert_eq!(off[0], 0.0);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity_loss(2, &[1.0, 2.0], &[1.0, 2.0]).0, 0.0);
        let (l, g) = similarity_loss(2, &[2.0, 3.0], &[1.0, 2.0]);
        assert_eq!(l, 2.0);
        assert_eq!(g, vec![2.0, 2.0]);
    }
}
