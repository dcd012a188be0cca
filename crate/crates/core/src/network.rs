//! The shared dense head: three Linear layers, the first two followed by
//! ReLU and BatchNorm, with a hand-written reverse pass.
//!
//! ```text
//! x -> Linear(d, 512) -> ReLU -> BatchNorm
//!   -> Linear(512, 256) -> ReLU -> BatchNorm   (embedding)
//!   -> Linear(256, C)                           (logits)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Logits, Matrix};

/// Output widths of the two hidden Linear layers.
pub const HIDDEN_WIDTHS: [usize; 2] = [512, 256];
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            running_mean: Matrix::zeros(1, width),
            running_var: Matrix::filled(1, width, 1.0),
        }
    }
}

/// Weights, biases and BatchNorm state of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: [Linear; 3],
    pub norms: [BatchNorm; 2],
}

/// Names of the trainable tensors, in the order used by
/// [`NetworkParams::trainable_mut`] and [`NetworkGrads::trainable`].
pub const PARAM_NAMES: [&str; 10] = [
    "fc1.weight",
    "fc1.bias",
    "bn1.gamma",
    "bn1.beta",
    "fc2.weight",
    "fc2.bias",
    "bn2.gamma",
    "bn2.beta",
    "fc3.weight",
    "fc3.bias",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Initializes the head with the standard hidden widths.
pub fn init_params(input_dim: usize, classes: usize, seed: u64) -> Result<NetworkParams> {
    init_params_with_widths(input_dim, HIDDEN_WIDTHS, classes, seed)
}

/// Initializes a head with custom hidden widths (benchmarks and small
/// experiments). Weights are `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases 0,
/// `gamma = 1`, `beta = 0`, running mean 0 and running variance 1.
pub fn init_params_with_widths(
    input_dim: usize,
    hidden: [usize; 2],
    classes: usize,
    seed: u64,
) -> Result<NetworkParams> {
    if input_dim == 0 {
        return Err(Error::config("input dimension must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if hidden.contains(&0) {
        return Err(Error::config("hidden widths must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut linear = |fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
        Linear {
            weight,
            bias: Matrix::zeros(1, fan_out),
        }
    };
    let layers = [
        linear(input_dim, hidden[0]),
        linear(hidden[0], hidden[1]),
        linear(hidden[1], classes),
    ];
    Ok(NetworkParams {
        layers,
        norms: [BatchNorm::new(hidden[0]), BatchNorm::new(hidden[1])],
    })
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn hidden_widths(&self) -> [usize; 2] {
        [self.layers[0].weight.cols(), self.layers[1].weight.cols()]
    }

    pub fn classes(&self) -> usize {
        self.layers[2].weight.cols()
    }

    pub fn trainable(&self) -> [&Matrix; 10] {
        let [l1, l2, l3] = &self.layers;
        let [n1, n2] = &self.norms;
        [
            &l1.weight, &l1.bias, &n1.gamma, &n1.beta, &l2.weight, &l2.bias, &n2.gamma, &n2.beta,
            &l3.weight, &l3.bias,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Matrix; 10] {
        let [l1, l2, l3] = &mut self.layers;
        let [n1, n2] = &mut self.norms;
        [
            &mut l1.weight,
            &mut l1.bias,
            &mut n1.gamma,
            &mut n1.beta,
            &mut l2.weight,
            &mut l2.bias,
            &mut n2.gamma,
            &mut n2.beta,
            &mut l3.weight,
            &mut l3.bias,
        ]
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::config("empty input batch"));
        }
        Ok(())
    }

    /// Forward pass. Train mode normalizes with batch statistics and folds
    /// them into the running statistics; eval mode leaves `self` untouched.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Logits, ForwardCache)> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                self.check_input(x)?;
                if x.rows() < 2 {
                    return Err(Error::config(
                        "train-mode forward needs a batch of at least 2 samples",
                    ));
                }
                let (logits, cache) = self.run(x, Mode::Train);
                for (norm, block) in self.norms.iter_mut().zip(&cache.blocks) {
                    update_running(&mut norm.running_mean, &block.mean);
                    update_running(&mut norm.running_var, &block.var);
                }
                Ok((logits, cache))
            }
        }
    }

    /// Eval-mode forward; a pure function of `(self, x)`.
    pub fn forward_eval(&self, x: &Matrix) -> Result<(Logits, ForwardCache)> {
        self.check_input(x)?;
        Ok(self.run(x, Mode::Eval))
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Matrix) -> Result<Logits> {
        self.forward_eval(x).map(|(logits, _)| logits)
    }

    fn run(&self, x: &Matrix, mode: Mode) -> (Logits, ForwardCache) {
        let b1 = self.block(0, x, mode);
        let b2 = self.block(1, &b1.output, mode);
        let l3 = &self.layers[2];
        let logits = b2.output.matmul(&l3.weight).add_row_broadcast(&l3.bias);
        let cache = ForwardCache {
            mode,
            input: x.clone(),
            blocks: [b1, b2],
        };
        (logits, cache)
    }

    fn block(&self, idx: usize, x: &Matrix, mode: Mode) -> BlockCache {
        let layer = &self.layers[idx];
        let norm = &self.norms[idx];
        let pre = x.matmul(&layer.weight).add_row_broadcast(&layer.bias);
        let post = pre.map(|v| v.max(0.0));
        let n = post.rows() as f64;
        let width = post.cols();

        let (mean, var) = match mode {
            Mode::Train => {
                let mean = post.column_means().into_vec();
                let mut var = vec![0.0; width];
                for row in post.iter_rows() {
                    for ((v, &a), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (a - m) * (a - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var)
            }
            Mode::Eval => (
                norm.running_mean.as_slice().to_vec(),
                norm.running_var.as_slice().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();

        let mut normalized = post.clone();
        let mut output = post.clone();
        let gamma = norm.gamma.as_slice();
        let beta = norm.beta.as_slice();
        for r in 0..post.rows() {
            let xh = normalized.row_mut(r);
            let out = output.row_mut(r);
            for j in 0..width {
                xh[j] = (xh[j] - mean[j]) * inv_std[j];
                out[j] = gamma[j] * xh[j] + beta[j];
            }
        }
        BlockCache {
            pre,
            normalized,
            output,
            mean,
            var,
            inv_std,
        }
    }

    /// Reverse pass through a train-mode cache.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<NetworkGrads> {
        self.backward_with_embedding(cache, dlogits, None)
    }

    /// Reverse pass with an extra upstream gradient injected at the
    /// embedding (the 256-wide output of the second block).
    pub fn backward_with_embedding(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        dembedding: Option<&Matrix>,
    ) -> Result<NetworkGrads> {
        if cache.mode != Mode::Train {
            return Err(Error::config("backward requires a train-mode forward cache"));
        }
        self.backward_impl(cache, dlogits, dembedding)
    }

    /// Reverse pass through an eval-mode cache, treating the running
    /// statistics as constants (BatchNorm reduces to a per-feature affine
    /// map). Used when a batch is too small for batch statistics.
    pub fn backward_frozen(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        dembedding: Option<&Matrix>,
    ) -> Result<NetworkGrads> {
        if cache.mode != Mode::Eval {
            return Err(Error::config("backward_frozen requires an eval-mode forward cache"));
        }
        self.backward_impl(cache, dlogits, dembedding)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        dembedding: Option<&Matrix>,
    ) -> Result<NetworkGrads> {
        let n = cache.input.rows();
        if dlogits.shape() != (n, self.classes()) {
            return Err(Error::config(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                n,
                self.classes()
            )));
        }
        let [b1, b2] = &cache.blocks;

        // fc3
        let dw3 = b2.output.t_matmul(dlogits);
        let db3 = dlogits.column_sums();
        let mut dz2 = dlogits.matmul_t(&self.layers[2].weight);
        if let Some(extra) = dembedding {
            extra.ensure_same_shape(&dz2, "embedding gradient")?;
            dz2.add_scaled_in_place(extra, 1.0);
        }

        let (dh2, dgamma2, dbeta2) = self.block_backward(1, b2, &dz2, cache.mode);
        let dw2 = b1.output.t_matmul(&dh2);
        let db2 = dh2.column_sums();
        let dz1 = dh2.matmul_t(&self.layers[1].weight);

        let (dh1, dgamma1, dbeta1) = self.block_backward(0, b1, &dz1, cache.mode);
        let dw1 = cache.input.t_matmul(&dh1);
        let db1 = dh1.column_sums();
        let dinput = dh1.matmul_t(&self.layers[0].weight);

        Ok(NetworkGrads {
            weights: [dw1, dw2, dw3],
            biases: [db1, db2, db3],
            gammas: [dgamma1, dgamma2],
            betas: [dbeta1, dbeta2],
            input: dinput,
        })
    }

    /// Gradient w.r.t. the Linear output (pre-ReLU) of block `idx`, plus the
    /// BatchNorm scale and shift gradients.
    fn block_backward(
        &self,
        idx: usize,
        block: &BlockCache,
        dout: &Matrix,
        mode: Mode,
    ) -> (Matrix, Matrix, Matrix) {
        let gamma = self.norms[idx].gamma.as_slice();
        let rows = dout.rows();
        let width = dout.cols();
        let n = rows as f64;

        let mut dgamma = vec![0.0; width];
        let mut dbeta = vec![0.0; width];
        for r in 0..rows {
            let d = dout.row(r);
            let xh = block.normalized.row(r);
            for j in 0..width {
                dgamma[j] += d[j] * xh[j];
                dbeta[j] += d[j];
            }
        }

        // dxhat = dout * gamma
        let mut dpost = Matrix::zeros(rows, width);
        match mode {
            Mode::Train => {
                // sum_i dxhat_i = gamma * dbeta; sum_i dxhat_i * xhat_i = gamma * dgamma
                for r in 0..rows {
                    let d = dout.row(r);
                    let xh = block.normalized.row(r);
                    let out = dpost.row_mut(r);
                    for j in 0..width {
                        let g = gamma[j];
                        out[j] = block.inv_std[j] / n
                            * (n * d[j] * g - g * dbeta[j] - xh[j] * g * dgamma[j]);
                    }
                }
            }
            Mode::Eval => {
                for r in 0..rows {
                    let d = dout.row(r);
                    let out = dpost.row_mut(r);
                    for j in 0..width {
                        out[j] = d[j] * gamma[j] * block.inv_std[j];
                    }
                }
            }
        }

        // ReLU: zero gradient where the pre-activation is not positive
        let dpre = dpost.zip_map(&block.pre, |g, p| if p > 0.0 { g } else { 0.0 });
        (
            dpre,
            Matrix::from_raw(1, width, dgamma),
            Matrix::from_raw(1, width, dbeta),
        )
    }
}

fn update_running(running: &mut Matrix, batch: &[f64]) {
    for (r, &b) in running.as_mut_slice().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    pre: Matrix,
    normalized: Matrix,
    output: Matrix,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Intermediate values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    input: Matrix,
    blocks: [BlockCache; 2],
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Linear output before ReLU of block 0 or 1.
    pub fn pre_activation(&self, block: usize) -> &Matrix {
        &self.blocks[block].pre
    }

    /// Output of the second BatchNorm, the input to the final Linear layer.
    pub fn embedding(&self) -> &Matrix {
        &self.blocks[1].output
    }

    /// Mean and (biased) variance used to normalize block 0 or 1.
    pub fn normalization_stats(&self, block: usize) -> (&[f64], &[f64]) {
        let b = &self.blocks[block];
        (&b.mean, &b.var)
    }

    /// Active-unit pattern of both ReLUs, row-major, block 0 then block 1.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.pre.as_slice().iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Gradients for every trainable tensor and for the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub weights: [Matrix; 3],
    pub biases: [Matrix; 3],
    pub gammas: [Matrix; 2],
    pub betas: [Matrix; 2],
    pub input: Matrix,
}

impl NetworkGrads {
    pub fn trainable(&self) -> [&Matrix; 10] {
        let [w1, w2, w3] = &self.weights;
        let [b1, b2, b3] = &self.biases;
        let [g1, g2] = &self.gammas;
        let [e1, e2] = &self.betas;
        [w1, b1, g1, e1, w2, b2, g2, e2, w3, b3]
    }

    /// `self += k * other` over the trainable tensors. Input gradients are
    /// not accumulated because they belong to different batches.
    pub fn accumulate(&mut self, other: &NetworkGrads, k: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled_in_place(b, k);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.add_scaled_in_place(b, k);
        }
        for (a, b) in self.gammas.iter_mut().zip(&other.gammas) {
            a.add_scaled_in_place(b, k);
        }
        for (a, b) in self.betas.iter_mut().zip(&other.betas) {
            a.add_scaled_in_place(b, k);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.trainable().iter().fold(0.0, |m, g| m.max(g.max_abs()))
    }
}

/// Adam over all trainable tensors of a [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct NetworkOptimizer {
    states: Vec<AdamState>,
    pub learning_rate: f64,
}

impl NetworkOptimizer {
    pub fn new(params: &NetworkParams, learning_rate: f64) -> Self {
        let states = params
            .trainable()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(p, name)| AdamState::for_param(p).with_label(name))
            .collect();
        Self {
            states,
            learning_rate,
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkGrads) -> Result<()> {
        for ((p, g), state) in params
            .trainable_mut()
            .into_iter()
            .zip(grads.trainable())
            .zip(&mut self.states)
        {
            adam_step(p, g, state, self.learning_rate)?;
        }
        Ok(())
    }
}

/// Row-wise softmax, computed with max subtraction.
pub fn softmax(logits: &Logits) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot)/n`
/// w.r.t. the logits.
pub fn cross_entropy(logits: &Logits, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::config(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::config("cross-entropy of an empty batch"));
    }
    let classes = logits.cols();
    if let Some(row) = labels.iter().position(|&y| y >= classes) {
        return Err(Error::data(format!(
            "label {} at row {row} is out of range for {classes} classes",
            labels[row]
        )));
    }
    let mut grad = softmax(logits);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.row_mut(r)[y] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    Ok((loss * inv_n, grad.scale(inv_n)))
}
