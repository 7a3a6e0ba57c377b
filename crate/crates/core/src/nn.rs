//! Fully connected ReLU classifier with hand-derived backpropagation.
//!
//! The default architecture is the 784-200-200-10 "2NN" MNIST model. Other
//! layer stacks are accepted so that small instances can be checked by hand.
//! All parameters live in one flat `f32` vector; each layer stores its weight
//! matrix (row-major, `out x in`) followed by its bias vector.

use ndarray::linalg::general_mat_mul;
use ndarray::LinalgScalar;
use num_traits::Float;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod gradcheck;

/// Layer widths of the MNIST 2NN: input, two hidden layers, output.
pub const MNIST_2NN: [usize; 4] = [784, 200, 200, 10];

/// Parameter count of [`MNIST_2NN`].
pub const MNIST_2NN_PARAMS: usize = 784 * 200 + 200 + 200 * 200 + 200 + 200 * 10 + 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("a network needs at least an input and an output width, got {0:?}")]
    BadArchitecture(Vec<usize>),
}

/// Shape of one dense layer: `rows` outputs, `cols` inputs, `rows` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened parameter vector of a dense network plus its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    values: Vec<f32>,
    shapes: Vec<LayerShape>,
}

fn shapes_for(sizes: &[usize]) -> Result<Vec<LayerShape>, NnError> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(NnError::BadArchitecture(sizes.to_vec()));
    }
    Ok(sizes
        .windows(2)
        .map(|w| LayerShape {
            rows: w[1],
            cols: w[0],
        })
        .collect())
}

impl ModelParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        let shapes = shapes_for(sizes)?;
        let len = shapes.iter().map(LayerShape::len).sum();
        Ok(Self {
            values: vec![0.0; len],
            shapes,
        })
    }

    pub fn from_values(sizes: &[usize], values: Vec<f32>) -> Result<Self, NnError> {
        let shapes = shapes_for(sizes)?;
        let len: usize = shapes.iter().map(LayerShape::len).sum();
        if values.len() != len {
            return Err(NnError::DimensionMismatch {
                expected: len,
                found: values.len(),
            });
        }
        Ok(Self { values, shapes })
    }

    /// Per-layer uniform fan-in initialization: every weight and bias of a
    /// layer with `cols` inputs is drawn from `U[-1/sqrt(cols), 1/sqrt(cols))`.
    ///
    /// Values are drawn layer by layer (weights row-major, then biases) from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        let mut params = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for shape in &params.shapes {
            let bound = 1.0 / (shape.cols as f32).sqrt();
            let dist = Uniform::new(-bound, bound);
            for v in &mut params.values[offset..offset + shape.len()] {
                *v = dist.sample(&mut rng);
            }
            offset += shape.len();
        }
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Layer widths, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.shapes[0].cols];
        sizes.extend(self.shapes.iter().map(|s| s.rows));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].rows
    }

    /// Same layout, new values. Panics if the length differs.
    pub fn with_values(&self, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), self.values.len(), "parameter length changed");
        Self {
            values,
            shapes: self.shapes.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for shape in &self.shapes {
            offsets.push(offset);
            offset += shape.len();
        }
        offsets
    }

    fn layer(&self, offset: usize, shape: LayerShape) -> (ArrayView2<'_, f32>, ArrayView1<'_, f32>) {
        layer_view(&self.values, offset, shape)
    }
}

/// The initial parameters of the MNIST 2NN for `seed`.
pub fn init_params(seed: u64) -> ModelParams {
    ModelParams::init(&MNIST_2NN, seed).expect("2NN architecture is valid")
}

/// A mini-batch: one input row per sample and its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f32>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(inputs: Array2<f32>, labels: Vec<u8>) -> Result<Self, NnError> {
        if labels.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if inputs.nrows() != labels.len() {
            return Err(NnError::DimensionMismatch {
                expected: labels.len(),
                found: inputs.nrows(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
    pub grad: Vec<f32>,
}

fn check_input(params: &ModelParams, inputs: &ArrayView2<f32>) -> Result<(), NnError> {
    if inputs.ncols() != params.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: params.input_dim(),
            found: inputs.ncols(),
        });
    }
    Ok(())
}

fn check_labels(params: &ModelParams, labels: &[u8]) -> Result<(), NnError> {
    let classes = params.output_dim();
    match labels.iter().find(|&&l| l as usize >= classes) {
        Some(&label) => Err(NnError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Scalar types the dense kernels run in: `f32` for training, `f64` for
/// checking the same code against finite differences.
pub trait Scalar: LinalgScalar + Float + Into<f64> {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `a * W^T + b`, with ReLU applied unless `last`.
fn dense<F: Scalar>(a: &ArrayView2<F>, w: &ArrayView2<F>, b: &ArrayView1<F>, last: bool) -> Array2<F> {
    let mut z = Array2::<F>::zeros((a.nrows(), w.nrows()));
    general_mat_mul(F::one(), a, &w.t(), F::zero(), &mut z);
    for mut row in z.rows_mut() {
        row.zip_mut_with(b, |v, &bias| {
            *v = *v + bias;
            if !last {
                *v = v.max(F::zero());
            }
        });
    }
    z
}

/// Logits (`B x classes`) for every input row.
pub fn forward(params: &ModelParams, inputs: ArrayView2<f32>) -> Result<Array2<f32>, NnError> {
    check_input(params, &inputs)?;
    let offsets = params.offsets();
    let last = params.shapes.len() - 1;
    let mut a: Option<Array2<f32>> = None;
    for (l, (&offset, &shape)) in offsets.iter().zip(params.shapes.iter()).enumerate() {
        let (w, b) = params.layer(offset, shape);
        let z = match &a {
            None => dense(&inputs, &w, &b, l == last),
            Some(prev) => dense(&prev.view(), &w, &b, l == last),
        };
        a = Some(z);
    }
    Ok(a.expect("at least one layer"))
}

/// Index of the largest logit per row; the first maximum wins ties.
pub fn predict(params: &ModelParams, inputs: ArrayView2<f32>) -> Result<Vec<u8>, NnError> {
    let logits = forward(params, inputs)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect())
}

/// Row-wise log-sum-exp with the row max subtracted first.
fn log_sum_exp<F: Scalar>(row: ArrayView1<F>) -> F {
    let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
    max + row.fold(F::zero(), |s, &v| s + (v - max).exp()).ln()
}

/// Mean softmax cross-entropy of the batch.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64, NnError> {
    check_labels(params, &batch.labels)?;
    let logits = forward(params, batch.inputs.view())?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .map(|(row, &y)| (log_sum_exp(row) - row[y as usize]) as f64)
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean softmax cross-entropy and its exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<LossAndGrad, NnError> {
    check_input(params, &batch.inputs.view())?;
    check_labels(params, &batch.labels)?;
    let (loss, grad) = backprop(&params.shapes, &params.values, batch.inputs.view(), &batch.labels);
    Ok(LossAndGrad { loss, grad })
}

/// [`loss_and_grad`] evaluated in `f64` at `values`, for precision-sensitive
/// checks of the backpropagation code.
pub fn loss_and_grad_f64(sizes: &[usize], values: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>), NnError> {
    let shapes = shapes_for(sizes)?;
    let len: usize = shapes.iter().map(LayerShape::len).sum();
    if values.len() != len {
        return Err(NnError::DimensionMismatch {
            expected: len,
            found: values.len(),
        });
    }
    if batch.inputs.ncols() != sizes[0] {
        return Err(NnError::DimensionMismatch {
            expected: sizes[0],
            found: batch.inputs.ncols(),
        });
    }
    if let Some(&label) = batch.labels.iter().find(|&&l| l as usize >= sizes[sizes.len() - 1]) {
        return Err(NnError::LabelOutOfRange {
            label,
            classes: sizes[sizes.len() - 1],
        });
    }
    let inputs = batch.inputs.mapv(f64::from);
    Ok(backprop(&shapes, values, inputs.view(), &batch.labels))
}

fn layer_view<F>(values: &[F], offset: usize, shape: LayerShape) -> (ArrayView2<'_, F>, ArrayView1<'_, F>) {
    let w = &values[offset..offset + shape.weight_len()];
    let b = &values[offset + shape.weight_len()..offset + shape.len()];
    (
        ArrayView2::from_shape((shape.rows, shape.cols), w).expect("layer layout"),
        ArrayView1::from(b),
    )
}

fn backprop<F: Scalar>(shapes: &[LayerShape], values: &[F], inputs: ArrayView2<F>, labels: &[u8]) -> (f64, Vec<F>) {
    let depth = shapes.len();
    let offsets: Vec<usize> = shapes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.len();
            Some(o)
        })
        .collect();

    // hidden[l] is the post-ReLU output of layer l, for l < depth - 1
    let mut hidden: Vec<Array2<F>> = Vec::with_capacity(depth - 1);
    let mut logits = None;
    for l in 0..depth {
        let (w, b) = layer_view(values, offsets[l], shapes[l]);
        let a = if l == 0 { inputs.view() } else { hidden[l - 1].view() };
        let z = dense(&a, &w, &b, l == depth - 1);
        if l == depth - 1 {
            logits = Some(z);
        } else {
            hidden.push(z);
        }
    }
    let mut delta = logits.expect("output layer");

    // softmax - onehot, scaled by 1/B for the mean reduction
    let inv_b = F::one() / F::from(labels.len()).expect("batch size fits");
    let mut total = 0.0f64;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        let lse = log_sum_exp(row.view());
        total += (lse - row[y as usize]).into();
        row.mapv_inplace(|v| (v - lse).exp() * inv_b);
        row[y as usize] = row[y as usize] - inv_b;
    }

    let mut grad = vec![F::zero(); values.len()];
    for l in (0..depth).rev() {
        let shape = shapes[l];
        let offset = offsets[l];
        let a = if l == 0 { inputs.view() } else { hidden[l - 1].view() };
        {
            let (gw, gb) = grad[offset..offset + shape.len()].split_at_mut(shape.weight_len());
            let mut gw = ArrayViewMut2::from_shape((shape.rows, shape.cols), gw).expect("layer layout");
            general_mat_mul(F::one(), &delta.t(), &a, F::zero(), &mut gw);
            ArrayViewMut1::from(gb).assign(&delta.sum_axis(Axis(0)));
        }
        if l > 0 {
            let (w, _) = layer_view(values, offset, shape);
            let mut prev = delta.dot(&w);
            ndarray::Zip::from(&mut prev).and(&hidden[l - 1]).for_each(|d, &h| {
                if h <= F::zero() {
                    *d = F::zero();
                }
            });
            delta = prev;
        }
    }

    (total / labels.len() as f64, grad)
}

/// Rows `range` of a batch as a new batch; used to evaluate large sets in chunks.
pub(crate) fn slice_rows(inputs: &Array2<f32>, start: usize, end: usize) -> ArrayView2<'_, f32> {
    inputs.slice(s![start..end, ..])
}
