//! Embedding networks (dense MLPs with manual forward/backward), the
//! angular-margin classification head, and the SGD optimizer.
//!
//! Embeddings are the L2-normalized output of the final linear layer, so
//! inner products between rows are cosines. The backward pass propagates
//! through that normalization with the exact Jacobian `(I - u u^T) / norm`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{EkdError, Result};
use crate::numeric::{row_l2_normalize, row_l2_normalize_vjp, Matrix};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in_dim x out_dim`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Dense network parameters: linear -> ReLU -> ... -> linear, then row
/// L2 normalization. The same shape doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.cols()
    }

    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }
}

/// Cached intermediate values of one forward pass, enough for backward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    /// Pre-activation of every layer.
    pre_activations: Vec<Matrix>,
    /// Post-ReLU activations of every hidden layer.
    activations: Vec<Matrix>,
    /// Row norms of the final linear output.
    norms: Vec<f64>,
    /// Normalized embeddings (same as the forward return value).
    normalized: Matrix,
}

/// He-style initialization: weights scaled by sqrt(2 / fan_in), biases at a
/// small positive constant so no ReLU unit (and no embedding row) is dead
/// at step zero.
pub fn init_params(dims: &[usize], rng: &mut RngState) -> Result<MlpParams> {
    if dims.len() < 2 {
        return Err(EkdError::InvalidConfig(format!(
            "need at least [input, output] dims, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(EkdError::InvalidConfig(format!(
            "layer dims must be nonzero, got {dims:?}"
        )));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = (2.0 / fan_in as f64).sqrt();
        let mut weights = Matrix::zeros(fan_in, fan_out);
        for v in weights.data_mut() {
            *v = rng.normal() * scale;
        }
        layers.push(DenseLayer {
            weights,
            bias: vec![0.01; fan_out],
        });
    }
    Ok(MlpParams { layers })
}

/// Forward pass: returns L2-normalized embeddings and the trace needed for
/// backward. Errors if any row reaches the normalization degenerate.
pub fn forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    assert_eq!(
        x.cols(),
        params.input_dim(),
        "input dim {} does not match first layer in-dim {}",
        x.cols(),
        params.input_dim()
    );
    let depth = params.layers.len();
    let mut pre_activations = Vec::with_capacity(depth);
    let mut activations = Vec::with_capacity(depth.saturating_sub(1));
    let mut h = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = h.matmul(&layer.weights);
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        pre_activations.push(z.clone());
        if l + 1 < depth {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(z.clone());
            h = z;
        } else {
            h = z;
        }
    }
    let (normalized, norms) = row_l2_normalize(&h)?;
    let trace = ForwardTrace {
        input: x.clone(),
        pre_activations,
        activations,
        norms,
        normalized: normalized.clone(),
    };
    Ok((normalized, trace))
}

/// Exact parameter gradients for a cotangent on the normalized embeddings.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, grad_embeddings: &Matrix) -> MlpParams {
    assert_eq!(grad_embeddings.rows(), trace.normalized.rows());
    assert_eq!(grad_embeddings.cols(), trace.normalized.cols());
    let depth = params.layers.len();
    let mut grads = params.zeros_like();

    // through the normalization
    let mut g = row_l2_normalize_vjp(&trace.normalized, &trace.norms, grad_embeddings);

    for l in (0..depth).rev() {
        let input = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        grads.layers[l].weights = input.transpose().matmul(&g);
        let bias = &mut grads.layers[l].bias;
        for i in 0..g.rows() {
            for (bj, v) in bias.iter_mut().zip(g.row(i)) {
                *bj += v;
            }
        }
        if l > 0 {
            let mut upstream = g.matmul(&params.layers[l].weights.transpose());
            let pre = &trace.pre_activations[l - 1];
            for (v, z) in upstream.data_mut().iter_mut().zip(pre.data()) {
                if *z <= 0.0 {
                    *v = 0.0;
                }
            }
            g = upstream;
        }
    }
    grads
}

/// Angular-margin softmax head: unit-norm class centers, scaled cosine
/// logits, additive margin on the target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceHead {
    /// `num_classes x embed_dim`, rows unit-norm.
    pub centers: Matrix,
    pub scale: f64,
    pub margin: f64,
    /// Apply the margin only where cos(theta) > 0.
    pub easy_margin: bool,
}

impl ArcFaceHead {
    pub fn new(num_classes: usize, embed_dim: usize, scale: f64, margin: f64, rng: &mut RngState) -> Result<Self> {
        if scale <= 0.0 {
            return Err(EkdError::InvalidConfig(format!("scale must be > 0, got {scale}")));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(EkdError::InvalidConfig(format!(
                "margin must be in [0, pi/2), got {margin}"
            )));
        }
        let mut centers = Matrix::zeros(num_classes, embed_dim);
        for v in centers.data_mut() {
            *v = rng.normal();
        }
        let (centers, _) = row_l2_normalize(&centers)?;
        Ok(ArcFaceHead {
            centers,
            scale,
            margin,
            easy_margin: true,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    /// Re-normalize centers to unit rows (called after each optimizer step).
    pub fn renormalize_centers(&mut self) -> Result<()> {
        let (renorm, _) = row_l2_normalize(&self.centers)?;
        self.centers = renorm;
        Ok(())
    }
}

/// Mean cross-entropy over scaled margin logits, with exact gradients with
/// respect to the (unit) embeddings and the centers.
pub fn arcface_loss_and_grad(
    head: &ArcFaceHead,
    embeddings: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix, Matrix)> {
    let b = embeddings.rows();
    if labels.len() != b {
        return Err(EkdError::LengthMismatch {
            context: "labels vs embeddings",
            left: labels.len(),
            right: b,
        });
    }
    let c = head.num_classes();
    for &y in labels {
        if y >= c {
            return Err(EkdError::LabelOutOfRange {
                label: y,
                num_classes: c,
            });
        }
    }
    let cos_m = head.margin.cos();
    let sin_m = head.margin.sin();

    let cos = embeddings.matmul(&head.centers.transpose()); // B x C
    let mut logits = cos.clone();
    logits.scale(head.scale);
    // margin on the target class, with the derivative of the adjusted logit
    let mut dphi = vec![1.0; b];
    for (i, &y) in labels.iter().enumerate() {
        let cy = cos.get(i, y).clamp(-1.0, 1.0);
        if head.margin > 0.0 && (!head.easy_margin || cy > 0.0) {
            let sin_y = (1.0 - cy * cy).max(0.0).sqrt();
            logits.set(i, y, head.scale * (cy * cos_m - sin_y * sin_m));
            dphi[i] = cos_m + sin_m * cy / sin_y.max(1e-8);
        }
    }

    // softmax cross-entropy, row-stable
    let mut loss = 0.0;
    let mut dlogits = Matrix::zeros(b, c);
    for i in 0..b {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln() + max;
        loss += log_sum - row[labels[i]];
        for j in 0..c {
            let p = (row[j] - max).exp() / sum;
            let delta = if j == labels[i] { 1.0 } else { 0.0 };
            dlogits.set(i, j, (p - delta) / b as f64);
        }
    }
    loss /= b as f64;

    // chain through the logit scaling and the margin adjustment
    let mut dcos = dlogits;
    for i in 0..b {
        for j in 0..c {
            let mut v = dcos.get(i, j) * head.scale;
            if j == labels[i] {
                v *= dphi[i];
            }
            dcos.set(i, j, v);
        }
    }
    let grad_embeddings = dcos.matmul(&head.centers);
    let grad_centers = dcos.transpose().matmul(embeddings);
    Ok((loss, grad_embeddings, grad_centers))
}

/// SGD-with-momentum buffers and hyperparameters for one model (and
/// optionally its head).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: MlpParams,
    head_velocity: Option<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, head: Option<&ArcFaceHead>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
            head_velocity: head.map(|h| Matrix::zeros(h.centers.rows(), h.centers.cols())),
        }
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpParams, opt: &mut OptimizerState) {
    assert_eq!(params.layers.len(), grads.layers.len());
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let grad = &grads.layers[l];
        let vel = &mut opt.velocity.layers[l];
        for ((p, g), v) in layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(grad.weights.data())
            .zip(vel.weights.data_mut())
        {
            *v = opt.momentum * *v + g + opt.weight_decay * *p;
            *p -= opt.lr * *v;
        }
        for ((p, g), v) in layer.bias.iter_mut().zip(&grad.bias).zip(vel.bias.iter_mut()) {
            *v = opt.momentum * *v + g + opt.weight_decay * *p;
            *p -= opt.lr * *v;
        }
    }
}

/// Same update rule for the head centers, followed by re-normalization so
/// logits stay cosines.
pub fn sgd_step_head(head: &mut ArcFaceHead, grad_centers: &Matrix, opt: &mut OptimizerState) -> Result<()> {
    let vel = opt
        .head_velocity
        .as_mut()
        .expect("optimizer was built without a head");
    for ((p, g), v) in head
        .centers
        .data_mut()
        .iter_mut()
        .zip(grad_centers.data())
        .zip(vel.data_mut())
    {
        *v = opt.momentum * *v + g + opt.weight_decay * *p;
        *p -= opt.lr * *v;
    }
    head.renormalize_centers()
}

/// Step decay: base learning rate divided by 10 for every milestone epoch
/// already reached.
pub fn lr_schedule(epoch: usize, base_lr: f64, milestones: &[usize]) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * 10f64.powi(-(passed as i32))
}

const CKPT_MAGIC: &[u8; 8] = b"EKDCKPT1";

/// Serialize parameters (and optionally the head) with an embedded config
/// hash: magic, layer count, per-layer dims and f64 payload, head dims and
/// payload, config hash. All integers little-endian.
pub fn save_checkpoint(
    params: &MlpParams,
    head: Option<&ArcFaceHead>,
    config_hash: u64,
    path: &Path,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        buf.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
        for v in layer.weights.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &layer.bias {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match head {
        Some(h) => {
            buf.extend_from_slice(&(h.centers.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(h.centers.cols() as u32).to_le_bytes());
            buf.extend_from_slice(&h.scale.to_le_bytes());
            buf.extend_from_slice(&h.margin.to_le_bytes());
            buf.push(h.easy_margin as u8);
            for v in h.centers.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => {
            buf.extend_from_slice(&0u32.to_le_bytes());
            buf.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    buf.extend_from_slice(&config_hash.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub head: Option<ArcFaceHead>,
    pub config_hash: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let format_err = |message: String| EkdError::FileFormat {
        path: path.display().to_string(),
        message,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(EkdError::FileFormat {
                path: path.display().to_string(),
                message: "truncated checkpoint".to_string(),
            });
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let read_u32 = |cursor: &mut usize| -> Result<usize> {
        let s = take(cursor, 4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize)
    };
    let read_f64 = |cursor: &mut usize| -> Result<f64> {
        let s = take(cursor, 8)?;
        Ok(f64::from_le_bytes([s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7]]))
    };

    if take(&mut cursor, 8)? != CKPT_MAGIC {
        return Err(format_err("not a checkpoint (bad magic)".to_string()));
    }
    let num_layers = read_u32(&mut cursor)?;
    if num_layers == 0 || num_layers > 64 {
        return Err(format_err(format!("implausible layer count {num_layers}")));
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut prev_out: Option<usize> = None;
    for l in 0..num_layers {
        let rows = read_u32(&mut cursor)?;
        let cols = read_u32(&mut cursor)?;
        if rows == 0 || cols == 0 {
            return Err(format_err(format!("layer {l} has zero dimension")));
        }
        if let Some(prev) = prev_out {
            if prev != rows {
                return Err(format_err(format!(
                    "layer {l} in-dim {rows} does not chain from previous out-dim {prev}"
                )));
            }
        }
        prev_out = Some(cols);
        let mut weights = Matrix::zeros(rows, cols);
        for v in weights.data_mut() {
            *v = read_f64(&mut cursor)?;
        }
        let mut bias = vec![0.0; cols];
        for v in &mut bias {
            *v = read_f64(&mut cursor)?;
        }
        layers.push(DenseLayer { weights, bias });
    }
    let head_rows = read_u32(&mut cursor)?;
    let head_cols = read_u32(&mut cursor)?;
    let head = if head_rows > 0 && head_cols > 0 {
        let scale = read_f64(&mut cursor)?;
        let margin = read_f64(&mut cursor)?;
        let easy_margin = take(&mut cursor, 1)?[0] != 0;
        let mut centers = Matrix::zeros(head_rows, head_cols);
        for v in centers.data_mut() {
            *v = read_f64(&mut cursor)?;
        }
        Some(ArcFaceHead {
            centers,
            scale,
            margin,
            easy_margin,
        })
    } else {
        None
    };
    let hash_bytes = take(&mut cursor, 8)?;
    let config_hash = u64::from_le_bytes(hash_bytes.try_into().expect("8 bytes"));
    if cursor != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after payload",
            bytes.len() - cursor
        )));
    }
    let params = MlpParams { layers };
    for layer in &params.layers {
        if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
            return Err(format_err("non-finite parameter".to_string()));
        }
    }
    Ok(Checkpoint {
        params,
        head,
        config_hash,
    })
}

/// Load and verify the embedded config hash.
pub fn load_checkpoint_expecting(path: &Path, expected_hash: u64) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash != expected_hash {
        return Err(EkdError::ConfigHashMismatch {
            found: ckpt.config_hash,
            expected: expected_hash,
        });
    }
    Ok(ckpt)
}
