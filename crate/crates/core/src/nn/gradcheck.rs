//! Central-difference gradient oracle.
//!
//! Evaluates the loss with plain `f64` loops that share no code with the
//! batched `f32` path in the parent module, so agreement between the two is
//! meaningful.

use super::{Batch, ModelParams};

/// Mean softmax cross-entropy computed in `f64` with naive loops.
pub fn loss_f64(sizes: &[usize], values: &[f64], batch: &Batch) -> f64 {
    evaluate(sizes, values, batch, None)
}

/// The loss, optionally recording which hidden units are active.
fn evaluate(sizes: &[usize], values: &[f64], batch: &Batch, mut active: Option<&mut Vec<bool>>) -> f64 {
    let mut total = 0.0;
    for (row, &label) in batch.inputs.rows().into_iter().zip(&batch.labels) {
        let mut a: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let mut offset = 0;
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (cols, rows) = (sizes[l], sizes[l + 1]);
            let bias = offset + rows * cols;
            let mut z = vec![0.0; rows];
            for (r, zr) in z.iter_mut().enumerate() {
                let w = &values[offset + r * cols..offset + (r + 1) * cols];
                *zr = values[bias + r] + w.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>();
                if l + 1 < layers {
                    if let Some(act) = active.as_deref_mut() {
                        act.push(*zr > 0.0);
                    }
                    *zr = zr.max(0.0);
                }
            }
            offset = bias + rows;
            a = z;
        }
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + a.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - a[label as usize];
    }
    total / batch.len() as f64
}

/// `(F(w + h e_i) - F(w - h e_i)) / 2h` for each requested coordinate.
pub fn finite_diff_grad(params: &ModelParams, batch: &Batch, coords: &[usize], h: f64) -> Vec<f64> {
    let w: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    central_differences(&params.sizes(), &w, batch, coords, h)
        .into_iter()
        .map(|e| e.value)
        .collect()
}

/// One central-difference estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// Some ReLU switched between `w - h e_i` and `w + h e_i`, so the loss is
    /// not differentiable inside the stencil and `value` is unreliable.
    pub crosses_kink: bool,
}

/// Central differences of the `f64` reference loss at `w`.
pub fn central_differences(sizes: &[usize], w: &[f64], batch: &Batch, coords: &[usize], h: f64) -> Vec<Estimate> {
    assert!(h > 0.0, "step must be positive");
    let mut w = w.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = w[i];
            let (mut up, mut down) = (Vec::new(), Vec::new());
            w[i] = orig + h;
            let plus = evaluate(sizes, &w, batch, Some(&mut up));
            w[i] = orig - h;
            let minus = evaluate(sizes, &w, batch, Some(&mut down));
            w[i] = orig;
            Estimate {
                value: (plus - minus) / (2.0 * h),
                crosses_kink: up != down,
            }
        })
        .collect()
}

/// Central differences of an arbitrary scalar function.
pub fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, w: &mut [f64], coords: &[usize], h: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = w[i];
            w[i] = orig + h;
            let plus = f(w);
            w[i] = orig - h;
            let minus = f(w);
            w[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let mut w = vec![0.5, -1.25, 3.0, 0.0];
        let f = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let g = finite_diff(f, &mut w, &[0, 1, 2, 3], 1e-3);
        for (gi, wi) in g.iter().zip(&w) {
            assert!((gi - wi).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_coords() {
        let p = crate::nn::init_params(0);
        let batch = Batch::new(ndarray::Array2::zeros((1, 784)), vec![3]).unwrap();
        assert!(finite_diff_grad(&p, &batch, &[], 1e-4).is_empty());
    }

    #[test]
    fn f64_loss_agrees_with_f32_loss() {
        let p = crate::nn::init_params(5);
        let inputs = ndarray::Array2::from_shape_fn((3, 784), |(i, j)| ((i * 7 + j * 3) % 11) as f32 / 11.0);
        let batch = Batch::new(inputs, vec![1, 5, 8]).unwrap();
        let w: Vec<f64> = p.values().iter().map(|&v| v as f64).collect();
        let reference = loss_f64(&p.sizes(), &w, &batch);
        assert!((crate::nn::loss(&p, &batch).unwrap() - reference).abs() < 1e-5);
    }

    #[test]
    fn kink_crossings_are_flagged() {
        // 1 -> 1 -> 1: loss depends on relu(w0 * x + b0); x = 1, w0 + b0 = 0
        let sizes = [1, 1, 2];
        let w = [0.5, -0.5, 1.0, 0.0, 0.0, 0.0];
        let batch = Batch::new(ndarray::Array2::ones((1, 1)), vec![0]).unwrap();
        let e = central_differences(&sizes, &w, &batch, &[0, 2], 1e-3);
        assert!(e[0].crosses_kink);
        assert!(!e[1].crosses_kink);
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
