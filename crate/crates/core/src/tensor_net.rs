//! Small fully-connected feed-forward network with exact forward, backward
//! and directional-derivative (R-operator) passes over batches of frames.
//!
//! Hidden layers use the logistic sigmoid; the network output is the vector
//! of *linear* output activations. Softmax, when a criterion needs it, is
//! applied downstream.
//!
//! # Parameter layout
//!
//! Parameters live in one flat `f64` vector, layer-major. For the transition
//! from `layer_dims[l]` inputs to `layer_dims[l+1]` outputs the block is:
//! the weight matrix in row-major order (`out` rows of `in` columns, so
//! `W[o][i]` is the weight from input `i` to output `o`), immediately
//! followed by the `out` biases. Blocks for successive transitions are
//! concatenated in order. `Network::layer_range` exposes the block offsets
//! so other modules can build explicit matrices or clip per-layer blocks.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Mat;

/// Feed-forward topology: input dim, hidden dims, output dim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    layer_dims: Vec<usize>,
}

impl Network {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::config(
                "network needs at least an input and an output layer",
            ));
        }
        if layer_dims.contains(&0) {
            return Err(Error::config("layer dimensions must be positive"));
        }
        Ok(Network { layer_dims })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Number of weight-matrix/bias transitions.
    pub fn num_transitions(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Total parameter count: sum of `(fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Flat-vector range holding transition `l` (weights then bias).
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        assert!(l < self.num_transitions(), "layer index out of range");
        let mut start = 0;
        for t in 0..l {
            start += (self.layer_dims[t] + 1) * self.layer_dims[t + 1];
        }
        let len = (self.layer_dims[l] + 1) * self.layer_dims[l + 1];
        start..start + len
    }

    /// Splits a layer block into its weight and bias parts.
    fn split_layer<'a>(&self, theta: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let range = self.layer_range(l);
        let block = &theta[range];
        let w_len = self.layer_dims[l] * self.layer_dims[l + 1];
        (&block[..w_len], &block[w_len..])
    }

    /// CE pre-training initialization: weights uniform in `(-r, r)` with
    /// `r = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector {
        let mut values = vec![0.0; self.param_count()];
        for l in 0..self.num_transitions() {
            let fan_in = self.layer_dims[l];
            let fan_out = self.layer_dims[l + 1];
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let range = self.layer_range(l);
            let w_len = fan_in * fan_out;
            for w in &mut values[range.start..range.start + w_len] {
                *w = rng.random_range(-r..r);
            }
        }
        ParameterVector::from_vec(values)
    }

    pub fn zero_params(&self) -> ParameterVector {
        ParameterVector::zeros(self.param_count())
    }

    fn check_theta(&self, theta: &ParameterVector) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::shape(format!(
                "parameter vector length {} does not match network parameter count {}",
                theta.len(),
                self.param_count()
            )));
        }
        if !theta.is_finite() {
            return Err(Error::numeric(
                "parameter vector contains non-finite values",
            ));
        }
        Ok(())
    }
}

/// Flat parameter vector; the theta every pass and optimizer works on.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(n: usize) -> Self {
        ParameterVector {
            values: vec![0.0; n],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParameterVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &ParameterVector) -> f64 {
        crate::math::dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &ParameterVector) {
        crate::math::axpy(&mut self.values, alpha, &x.values);
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParameterVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// Order-insensitive only in the trivial sense: any change to any bit
    /// changes the fingerprint with overwhelming probability (FNV-1a over
    /// the raw bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// A batch of feature frames for one utterance.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    frames: Mat,
    utterance_id: String,
}

impl FrameBatch {
    pub fn new(frames: Mat, utterance_id: impl Into<String>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::data("frame batch must contain at least one frame"));
        }
        if !frames.is_finite() {
            return Err(Error::numeric("frame batch contains non-finite values"));
        }
        Ok(FrameBatch {
            frames,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Mat {
        &self.frames
    }

    pub fn utterance_id(&self) -> &str {
        &self.utterance_id
    }
}

/// Cached intermediates from one forward pass: enough state for the
/// backward pass and the R-operator without recomputation.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    theta_fingerprint: u64,
    input: Mat,
    /// Post-sigmoid hidden activations, one matrix per hidden transition.
    hidden: Vec<Mat>,
    output: Mat,
}

impl ActivationRecord {
    /// Per-frame linear output activations, `T x D_out`.
    pub fn output(&self) -> &Mat {
        &self.output
    }

    pub fn num_frames(&self) -> usize {
        self.input.rows()
    }

    fn check_fresh(&self, theta: &ParameterVector) -> Result<()> {
        if self.theta_fingerprint != theta.fingerprint() {
            return Err(Error::usage(
                "activation record is stale: parameters changed since forward()",
            ));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Affine map of one frame: `z = W x + b`.
fn affine(w: &[f64], b: &[f64], x: &[f64], z: &mut [f64]) {
    let d_in = x.len();
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &w[o * d_in..(o + 1) * d_in];
        *zo = b[o] + crate::math::dot(row, x);
    }
}

/// Forward pass over a frame batch, caching hidden activations.
#[allow(clippy::needless_range_loop)] // the layer index drives several parallel structures
pub fn forward(
    net: &Network,
    theta: &ParameterVector,
    batch: &FrameBatch,
) -> Result<ActivationRecord> {
    net.check_theta(theta)?;
    if batch.dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "feature dim {} does not match network input dim {}",
            batch.dim(),
            net.input_dim()
        )));
    }
    let t_frames = batch.num_frames();
    let n_trans = net.num_transitions();
    let mut hidden: Vec<Mat> = (0..n_trans.saturating_sub(1))
        .map(|l| Mat::zeros(t_frames, net.layer_dims[l + 1]))
        .collect();
    let mut output = Mat::zeros(t_frames, net.output_dim());

    for t in 0..t_frames {
        let mut cur: Vec<f64> = batch.frames().row(t).to_vec();
        for l in 0..n_trans {
            let (w, b) = net.split_layer(theta.as_slice(), l);
            let mut z = vec![0.0; net.layer_dims[l + 1]];
            affine(w, b, &cur, &mut z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite activation at layer {l}, frame {t}"
                )));
            }
            if l + 1 < n_trans {
                for v in &mut z {
                    *v = sigmoid(*v);
                }
                hidden[l].row_mut(t).copy_from_slice(&z);
                cur = z;
            } else {
                output.row_mut(t).copy_from_slice(&z);
            }
        }
    }

    Ok(ActivationRecord {
        theta_fingerprint: theta.fingerprint(),
        input: batch.frames().clone(),
        hidden,
        output,
    })
}

/// Backward pass: gradient of `sum_t dF_da[t] . a_t` with respect to theta.
///
/// Because every criterion enters only through the linear output
/// activations, this *is* the Jacobian-transpose product `J^T u` with
/// `u = dF_da` (see [`rop_transpose`]).
pub fn backward(
    net: &Network,
    theta: &ParameterVector,
    record: &ActivationRecord,
    df_da: &Mat,
) -> Result<ParameterVector> {
    net.check_theta(theta)?;
    record.check_fresh(theta)?;
    let t_frames = record.num_frames();
    if df_da.rows() != t_frames || df_da.cols() != net.output_dim() {
        return Err(Error::shape(format!(
            "dF/da is {}x{}, expected {}x{}",
            df_da.rows(),
            df_da.cols(),
            t_frames,
            net.output_dim()
        )));
    }
    let n_trans = net.num_transitions();
    let mut grad = vec![0.0; net.param_count()];

    for t in 0..t_frames {
        let mut delta: Vec<f64> = df_da.row(t).to_vec();
        for l in (0..n_trans).rev() {
            let input_row: &[f64] = if l == 0 {
                record.input.row(t)
            } else {
                record.hidden[l - 1].row(t)
            };
            let d_in = net.layer_dims[l];
            let d_out = net.layer_dims[l + 1];
            let range = net.layer_range(l);
            let w_len = d_in * d_out;
            {
                let block = &mut grad[range.clone()];
                for o in 0..d_out {
                    let row = &mut block[o * d_in..(o + 1) * d_in];
                    crate::math::axpy(row, delta[o], input_row);
                    block[w_len + o] += delta[o];
                }
            }
            if l > 0 {
                let (w, _) = net.split_layer(theta.as_slice(), l);
                let mut prev = vec![0.0; d_in];
                for o in 0..d_out {
                    let row = &w[o * d_in..(o + 1) * d_in];
                    crate::math::axpy(&mut prev, delta[o], row);
                }
                let h = record.hidden[l - 1].row(t);
                for (p, &hv) in prev.iter_mut().zip(h) {
                    *p *= hv * (1.0 - hv);
                }
                delta = prev;
            }
        }
    }

    Ok(ParameterVector::from_vec(grad))
}

/// R-operator: directional derivative `J v` of the output activations along
/// a parameter direction `v`, per frame.
pub fn rop(
    net: &Network,
    theta: &ParameterVector,
    record: &ActivationRecord,
    v: &ParameterVector,
) -> Result<Mat> {
    net.check_theta(theta)?;
    record.check_fresh(theta)?;
    if v.len() != net.param_count() {
        return Err(Error::shape(format!(
            "direction length {} does not match parameter count {}",
            v.len(),
            net.param_count()
        )));
    }
    let t_frames = record.num_frames();
    let n_trans = net.num_transitions();
    let mut out = Mat::zeros(t_frames, net.output_dim());

    for t in 0..t_frames {
        // rz: R{pre-activation} of the current layer; rh: R{post-activation}.
        let mut rh: Vec<f64> = Vec::new();
        for l in 0..n_trans {
            let input_row: &[f64] = if l == 0 {
                record.input.row(t)
            } else {
                record.hidden[l - 1].row(t)
            };
            let d_in = net.layer_dims[l];
            let d_out = net.layer_dims[l + 1];
            let (w, _) = net.split_layer(theta.as_slice(), l);
            let (vw, vb) = net.split_layer(v.as_slice(), l);
            let mut rz = vec![0.0; d_out];
            for o in 0..d_out {
                let vrow = &vw[o * d_in..(o + 1) * d_in];
                let mut acc = vb[o] + crate::math::dot(vrow, input_row);
                if l > 0 {
                    let wrow = &w[o * d_in..(o + 1) * d_in];
                    acc += crate::math::dot(wrow, &rh);
                }
                rz[o] = acc;
            }
            if l + 1 < n_trans {
                let h = record.hidden[l].row(t);
                rh = rz
                    .iter()
                    .zip(h)
                    .map(|(&r, &hv)| r * hv * (1.0 - hv))
                    .collect();
            } else {
                out.row_mut(t).copy_from_slice(&rz);
            }
        }
    }

    Ok(out)
}

/// Jacobian-transpose product `J^T u`. Identical to [`backward`] by
/// construction; kept as a named operation for the curvature pipeline.
pub fn rop_transpose(
    net: &Network,
    theta: &ParameterVector,
    record: &ActivationRecord,
    u: &Mat,
) -> Result<ParameterVector> {
    backward(net, theta, record, u)
}

/// Writes a checkpoint: a versioned text container with the layer dims and
/// the flat parameter vector. `f64` values are printed with Rust's shortest
/// round-trip formatting, so load(save(theta)) == theta exactly.
pub fn save_checkpoint(path: &Path, net: &Network, theta: &ParameterVector) -> Result<()> {
    if theta.len() != net.param_count() {
        return Err(Error::shape(
            "checkpoint parameter length does not match network".to_string(),
        ));
    }
    let mut text = String::new();
    writeln!(text, "seqtrain-checkpoint v1").unwrap();
    let dims: Vec<String> = net.layer_dims().iter().map(|d| d.to_string()).collect();
    writeln!(text, "dims {}", dims.join(" ")).unwrap();
    writeln!(text, "params {}", theta.len()).unwrap();
    for v in theta.as_slice() {
        writeln!(text, "{v}").unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, ParameterVector)> {
    let text = std::fs::read_to_string(path)?;
    let ctx = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, message: &str| Error::Parse {
        context: ctx.clone(),
        line: line + 1,
        message: message.to_string(),
    };

    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty checkpoint file"))?;
    if header.trim() != "seqtrain-checkpoint v1" {
        return Err(parse_err(ln, "unrecognized checkpoint header"));
    }
    let (ln, dims_line) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing dims line"))?;
    let mut parts = dims_line.split_whitespace();
    if parts.next() != Some("dims") {
        return Err(parse_err(ln, "expected `dims ...`"));
    }
    let dims: Vec<usize> = parts
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(ln, "bad dimension value"))?;
    let net = Network::new(dims)?;

    let (ln, count_line) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing params line"))?;
    let mut parts = count_line.split_whitespace();
    if parts.next() != Some("params") {
        return Err(parse_err(ln, "expected `params N`"));
    }
    let count: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| parse_err(ln, "bad parameter count"))?;
    if count != net.param_count() {
        return Err(parse_err(ln, "parameter count does not match dims"));
    }

    let mut values = Vec::with_capacity(count);
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| parse_err(ln, "bad parameter value"))?;
        values.push(v);
    }
    if values.len() != count {
        return Err(Error::Data(format!(
            "checkpoint {} has {} values, expected {}",
            ctx,
            values.len(),
            count
        )));
    }
    Ok((net, ParameterVector::from_vec(values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn batch(rows: &[Vec<f64>]) -> FrameBatch {
        FrameBatch::new(Mat::from_rows(rows).unwrap(), "test").unwrap()
    }

    fn random_theta(net: &Network, seed: u64, scale: f64) -> ParameterVector {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut v = net.init_params(&mut rng);
        for x in v.as_mut_slice() {
            *x += scale * crate::math::sample_standard_normal(&mut rng) * 0.1;
        }
        v
    }

    #[test]
    fn param_count_and_layout_chain() {
        let net = Network::new(vec![8, 32, 32, 12]).unwrap();
        assert_eq!(net.param_count(), 9 * 32 + 33 * 32 + 33 * 12);
        assert_eq!(net.layer_range(0), 0..288);
        assert_eq!(net.layer_range(1), 288..288 + 1056);
        assert_eq!(net.layer_range(2), 288 + 1056..288 + 1056 + 396);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::new(vec![3, 4, 2]).unwrap();
        let theta = net.zero_params();
        let rec = forward(&net, &theta, &batch(&[vec![0.3, -1.0, 2.0]])).unwrap();
        for &v in rec.output().data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let net = Network::new(vec![3, 3]).unwrap();
        let mut theta = net.zero_params();
        for i in 0..3 {
            theta.as_mut_slice()[i * 3 + i] = 1.0;
        }
        let rec = forward(&net, &theta, &batch(&[vec![0.5, -2.0, 7.25]])).unwrap();
        assert_eq!(rec.output().row(0), &[0.5, -2.0, 7.25]);
    }

    #[test]
    fn two_two_two_matches_hand_computed_chain() {
        // W0 = [[0.5, -1.0], [0.25, 0.75]], b0 = [0.1, -0.2]
        // W1 = [[1.5, -0.5], [2.0, 0.0]],   b1 = [0.0, 0.3]
        let net = Network::new(vec![2, 2, 2]).unwrap();
        let theta = ParameterVector::from_vec(vec![
            0.5, -1.0, 0.25, 0.75, 0.1, -0.2, // layer 0
            1.5, -0.5, 2.0, 0.0, 0.0, 0.3, // layer 1
        ]);
        let x = [0.4, -0.6];
        let rec = forward(&net, &theta, &batch(&[x.to_vec()])).unwrap();

        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let h0 = s(0.5 * x[0] - 1.0 * x[1] + 0.1);
        let h1 = s(0.25 * x[0] + 0.75 * x[1] - 0.2);
        let a0 = 1.5 * h0 - 0.5 * h1;
        let a1 = 2.0 * h0 + 0.3;
        assert!((rec.output()[(0, 0)] - a0).abs() < 1e-15);
        assert!((rec.output()[(0, 1)] - a1).abs() < 1e-15);
    }

    #[test]
    fn backward_zero_sensitivity_gives_zero_gradient() {
        let net = Network::new(vec![3, 5, 2]).unwrap();
        let theta = random_theta(&net, 1, 1.0);
        let b = batch(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let g = backward(&net, &theta, &rec, &Mat::zeros(2, 2)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_one_one_net() {
        // Single affine 1->1: dF/dw = x, dF/db = 1 when dF/da = 1.
        let net = Network::new(vec![1, 1]).unwrap();
        let theta = ParameterVector::from_vec(vec![0.7, -0.3]);
        let b = batch(&[vec![2.5]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let mut df = Mat::zeros(1, 1);
        df[(0, 0)] = 1.0;
        let g = backward(&net, &theta, &rec, &df).unwrap();
        assert!((g.as_slice()[0] - 2.5).abs() < 1e-15);
        assert!((g.as_slice()[1] - 1.0).abs() < 1e-15);
    }

    /// Central finite differences of `sum_t c . a_t` for a fixed random c.
    fn fd_gradient_of_projection(
        net: &Network,
        theta: &ParameterVector,
        b: &FrameBatch,
        c: &Mat,
        eps: f64,
    ) -> Vec<f64> {
        let eval = |th: &ParameterVector| -> f64 {
            let rec = forward(net, th, b).unwrap();
            let mut acc = 0.0;
            for t in 0..rec.num_frames() {
                acc += crate::math::dot(rec.output().row(t), c.row(t));
            }
            acc
        };
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.clone();
                plus.as_mut_slice()[i] += eps;
                let mut minus = theta.clone();
                minus.as_mut_slice()[i] -= eps;
                (eval(&plus) - eval(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::new(vec![3, 6, 4, 2]).unwrap();
        let theta = random_theta(&net, 2, 1.0);
        let b = batch(&[
            vec![0.2, -0.5, 1.1],
            vec![0.9, 0.3, -0.7],
            vec![0.0, 1.0, 0.5],
        ]);
        let mut rng = StdRng::seed_from_u64(3);
        let mut c = Mat::zeros(3, 2);
        for v in c.data_mut() {
            *v = crate::math::sample_standard_normal(&mut rng);
        }
        let rec = forward(&net, &theta, &b).unwrap();
        let analytic = backward(&net, &theta, &rec, &c).unwrap();
        let numeric = fd_gradient_of_projection(&net, &theta, &b, &c, 1e-4);
        let diff: f64 = analytic
            .as_slice()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = crate::math::norm2(&numeric).max(1e-12);
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }

    #[test]
    fn rop_zero_direction_is_zero() {
        let net = Network::new(vec![2, 3, 2]).unwrap();
        let theta = random_theta(&net, 4, 1.0);
        let b = batch(&[vec![1.0, -1.0]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let jv = rop(&net, &theta, &rec, &net.zero_params()).unwrap();
        assert!(jv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rop_linear_single_layer_applies_direction_weights() {
        let net = Network::new(vec![2, 2]).unwrap();
        let theta = random_theta(&net, 5, 1.0);
        let x = [0.3, -0.9];
        let b = batch(&[x.to_vec()]);
        let rec = forward(&net, &theta, &b).unwrap();
        let v = ParameterVector::from_vec(vec![1.0, 2.0, -0.5, 0.25, 0.1, -0.1]);
        let jv = rop(&net, &theta, &rec, &v).unwrap();
        // For a pure affine map, Jv is the direction's own affine map.
        assert!((jv[(0, 0)] - (1.0 * x[0] + 2.0 * x[1] + 0.1)).abs() < 1e-15);
        assert!((jv[(0, 1)] - (-0.5 * x[0] + 0.25 * x[1] - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn rop_matches_finite_differences() {
        let net = Network::new(vec![3, 5, 4]).unwrap();
        let theta = random_theta(&net, 6, 1.0);
        let b = batch(&[vec![0.5, 0.1, -0.4], vec![-1.2, 0.8, 0.3]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let v = ParameterVector::from_vec(
            (0..net.param_count())
                .map(|_| crate::math::sample_standard_normal(&mut rng))
                .collect(),
        );
        let jv = rop(&net, &theta, &rec, &v).unwrap();

        let eps = 1e-4;
        let mut plus = theta.clone();
        plus.axpy(eps, &v);
        let mut minus = theta.clone();
        minus.axpy(-eps, &v);
        let a_plus = forward(&net, &plus, &b).unwrap();
        let a_minus = forward(&net, &minus, &b).unwrap();
        let mut num = 0.0;
        let mut den = 0.0_f64;
        for t in 0..2 {
            for o in 0..4 {
                let fd = (a_plus.output()[(t, o)] - a_minus.output()[(t, o)]) / (2.0 * eps);
                num += (jv[(t, o)] - fd) * (jv[(t, o)] - fd);
                den += fd * fd;
            }
        }
        assert!(num.sqrt() / den.sqrt().max(1e-12) < 1e-5);
    }

    #[test]
    fn rop_is_linear_in_direction() {
        let net = Network::new(vec![2, 4, 3]).unwrap();
        let theta = random_theta(&net, 8, 1.0);
        let b = batch(&[vec![0.7, -0.2]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let rand_vec = |rng: &mut StdRng| {
            ParameterVector::from_vec(
                (0..net.param_count())
                    .map(|_| crate::math::sample_standard_normal(rng))
                    .collect(),
            )
        };
        let v1 = rand_vec(&mut rng);
        let v2 = rand_vec(&mut rng);
        let (alpha, beta) = (0.37, -1.4);
        let mut combo = v1.scaled(alpha);
        combo.axpy(beta, &v2);
        let lhs = rop(&net, &theta, &rec, &combo).unwrap();
        let j1 = rop(&net, &theta, &rec, &v1).unwrap();
        let j2 = rop(&net, &theta, &rec, &v2).unwrap();
        for (i, &l) in lhs.data().iter().enumerate() {
            let r = alpha * j1.data()[i] + beta * j2.data()[i];
            assert!((l - r).abs() < 1e-13 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let net = Network::new(vec![3, 4, 4, 2]).unwrap();
        let theta = random_theta(&net, 10, 1.0);
        let b = batch(&[vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.9]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..5 {
            let v = ParameterVector::from_vec(
                (0..net.param_count())
                    .map(|_| crate::math::sample_standard_normal(&mut rng))
                    .collect(),
            );
            let mut u = Mat::zeros(2, 2);
            for x in u.data_mut() {
                *x = crate::math::sample_standard_normal(&mut rng);
            }
            let jv = rop(&net, &theta, &rec, &v).unwrap();
            let jtu = rop_transpose(&net, &theta, &rec, &u).unwrap();
            let lhs = crate::math::dot(u.data(), jv.data());
            let rhs = jtu.dot(&v);
            assert!(
                (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0),
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn rop_transpose_matches_explicit_jacobian() {
        let net = Network::new(vec![2, 3, 2]).unwrap();
        let theta = random_theta(&net, 12, 1.0);
        let b = batch(&[vec![0.6, -0.3]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let d = net.param_count();
        // Explicit Jacobian, one rop per basis vector.
        let mut jac = Mat::zeros(2, d); // rows: output nodes (single frame)
        for i in 0..d {
            let mut e = net.zero_params();
            e.as_mut_slice()[i] = 1.0;
            let col = rop(&net, &theta, &rec, &e).unwrap();
            for o in 0..2 {
                jac[(o, i)] = col[(0, o)];
            }
        }
        let mut u = Mat::zeros(1, 2);
        u[(0, 0)] = 0.8;
        u[(0, 1)] = -1.7;
        let jtu = rop_transpose(&net, &theta, &rec, &u).unwrap();
        for i in 0..d {
            let expect = jac[(0, i)] * 0.8 + jac[(1, i)] * -1.7;
            assert!((jtu.as_slice()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_record_is_rejected() {
        let net = Network::new(vec![2, 2]).unwrap();
        let theta = random_theta(&net, 13, 1.0);
        let b = batch(&[vec![1.0, 1.0]]);
        let rec = forward(&net, &theta, &b).unwrap();
        let mut moved = theta.clone();
        moved.as_mut_slice()[0] += 1.0;
        let err = backward(&net, &moved, &rec, &Mat::zeros(1, 2));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let net = Network::new(vec![4, 3, 2]).unwrap();
        let theta = random_theta(&net, 14, 1.0);
        let dir = std::env::temp_dir().join("seqtrain_test_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        save_checkpoint(&path, &net, &theta).unwrap();
        let (net2, theta2) = load_checkpoint(&path).unwrap();
        assert_eq!(net, net2);
        assert_eq!(theta, theta2);
    }
}
