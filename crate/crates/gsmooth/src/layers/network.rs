//! Network construction, loss graphs, and the dataset-backed objective.

use super::{window_cover_counts, LayerSpec, NetworkConfig, R1Coefficient, RegSign, Shape};
use crate::error::{Error, Result};
use crate::optim::ComponentObjective;
use crate::tensor::{kernels, Tape, Tensor, ValueId};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct ParamSlot {
    theta_offset: usize,
    theta_shape: Vec<usize>,
    bias_offset: usize,
    bias_len: usize,
}

/// A validated layer chain with its parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    shapes: Vec<Shape>, // output shape per layer
    slots: Vec<Option<ParamSlot>>,
    param_count: usize,
}

/// Handles into a built loss graph, for gradient extraction.
pub struct LossGraph {
    pub loss: ValueId,
    /// `(theta, bias)` tape ids per parameterized layer, in layer order.
    pub params: Vec<(ValueId, ValueId)>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let mut shapes = Vec::with_capacity(config.layers.len());
        let mut slots = Vec::with_capacity(config.layers.len());
        let mut cur = config.input;
        let mut offset = 0usize;
        for (idx, layer) in config.layers.iter().enumerate() {
            if layer.lambda() < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {idx}: regularizer weight must be >= 0"
                )));
            }
            let slot;
            match *layer {
                LayerSpec::Conv {
                    kernels: n,
                    size,
                    stride,
                    ..
                } => {
                    let (c, h, w) = match cur {
                        Shape::Image { c, h, w } => (c, h, w),
                        Shape::Flat(_) => {
                            return Err(Error::InvalidArgument(format!(
                                "layer {idx}: conv needs an image input, got a flat vector"
                            )))
                        }
                    };
                    if n == 0 || size == 0 || stride == 0 || size > h || size > w {
                        return Err(Error::InvalidArgument(format!(
                            "layer {idx}: conv {n}x{size}x{size} stride {stride} does not fit {h}x{w}"
                        )));
                    }
                    let ho = kernels::valid_out_extent(h, size, stride);
                    let wo = kernels::valid_out_extent(w, size, stride);
                    let theta_len = n * c * size * size;
                    slot = Some(ParamSlot {
                        theta_offset: offset,
                        theta_shape: vec![n, c, size, size],
                        bias_offset: offset + theta_len,
                        bias_len: n,
                    });
                    offset += theta_len + n;
                    cur = Shape::Image { c: n, h: ho, w: wo };
                }
                LayerSpec::Dense { units, .. } => {
                    let d_in = match cur {
                        Shape::Flat(d) => d,
                        Shape::Image { .. } => {
                            return Err(Error::InvalidArgument(format!(
                                "layer {idx}: dense needs a flat input; add a flatten layer first"
                            )))
                        }
                    };
                    if units == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {idx}: dense layer needs at least one unit"
                        )));
                    }
                    slot = Some(ParamSlot {
                        theta_offset: offset,
                        theta_shape: vec![d_in, units],
                        bias_offset: offset + d_in * units,
                        bias_len: units,
                    });
                    offset += d_in * units + units;
                    cur = Shape::Flat(units);
                }
                LayerSpec::Activation { .. } => {
                    slot = None;
                }
                LayerSpec::AvgPool { window, stride } => {
                    let (c, h, w) = match cur {
                        Shape::Image { c, h, w } => (c, h, w),
                        Shape::Flat(_) => {
                            return Err(Error::InvalidArgument(format!(
                                "layer {idx}: pooling needs an image input"
                            )))
                        }
                    };
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::InvalidArgument(format!(
                            "layer {idx}: pool {window}x{window} stride {stride} does not fit {h}x{w}"
                        )));
                    }
                    slot = None;
                    cur = Shape::Image {
                        c,
                        h: kernels::valid_out_extent(h, window, stride),
                        w: kernels::valid_out_extent(w, window, stride),
                    };
                }
                LayerSpec::Flatten => {
                    slot = None;
                    cur = Shape::Flat(cur.len());
                }
                LayerSpec::Dropout { p, .. } => {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidArgument(format!(
                            "layer {idx}: dropout keep probability must lie in [0,1], got {p}"
                        )));
                    }
                    slot = None;
                }
            }
            slots.push(slot);
            shapes.push(cur);
        }
        if shapes.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if !matches!(cur, Shape::Flat(_)) {
            return Err(Error::InvalidArgument(
                "network must end in a flat output layer".into(),
            ));
        }
        Ok(Network {
            config,
            shapes,
            slots,
            param_count: offset,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn output_width(&self) -> usize {
        match *self.shapes.last().unwrap() {
            Shape::Flat(d) => d,
            Shape::Image { .. } => unreachable!("validated in new"),
        }
    }

    pub fn input_len(&self) -> usize {
        self.config.input.len()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.param_count];
        for slot in self.slots.iter().flatten() {
            let (fan_in, fan_out) = match slot.theta_shape.as_slice() {
                [n, c, k, _] => (c * k * k, n * k * k),
                [d_in, d_out] => (*d_in, *d_out),
                _ => unreachable!(),
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let len: usize = slot.theta_shape.iter().product();
            for v in &mut params[slot.theta_offset..slot.theta_offset + len] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        params
    }

    fn input_node(&self, tape: &mut Tape, images: &[f64], batch: usize) -> Result<ValueId> {
        let shape = match self.config.input {
            Shape::Image { c, h, w } => vec![batch, c, h, w],
            Shape::Flat(d) => vec![batch, d],
        };
        Ok(tape.constant(Tensor::new(shape, images.to_vec())?))
    }

    fn one_hot(&self, labels: &[u8]) -> Result<Tensor> {
        let width = self.output_width();
        let mut data = vec![0.0; labels.len() * width];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= width {
                return Err(Error::InvalidArgument(format!(
                    "label {l} does not fit the {width}-wide output layer"
                )));
            }
            data[i * width + l as usize] = 1.0;
        }
        Tensor::new(vec![labels.len(), width], data)
    }

    /// Forward chain shared by training and inference. When `reg` is
    /// provided, per-layer regularizer terms are accumulated into it.
    fn forward_chain(
        &self,
        tape: &mut Tape,
        input: ValueId,
        params: &[f64],
        sigma: Option<f64>,
        requires_grad: bool,
        mut reg: Option<&mut RegAccumulator>,
    ) -> Result<(ValueId, Vec<(ValueId, ValueId)>)> {
        let sig = sigma.unwrap_or(0.0);
        let smoothing = sig > 0.0;
        let mut cur = input;
        let mut cur_shape = self.config.input;
        let mut param_ids = Vec::new();
        for (idx, layer) in self.config.layers.iter().enumerate() {
            let internal_input = idx > 0;
            let lambda = layer.lambda();
            match *layer {
                LayerSpec::Conv { stride, .. } => {
                    let slot = self.slots[idx].as_ref().unwrap();
                    let theta = tape.leaf(
                        Tensor::new(
                            slot.theta_shape.clone(),
                            params[slot.theta_offset
                                ..slot.theta_offset + slot.theta_shape.iter().product::<usize>()]
                                .to_vec(),
                        )?,
                        requires_grad,
                    );
                    let bias = tape.leaf(
                        Tensor::from_vec(
                            params[slot.bias_offset..slot.bias_offset + slot.bias_len].to_vec(),
                        ),
                        requires_grad,
                    );
                    if smoothing && internal_input && lambda > 0.0 {
                        if let Some(acc) = reg.as_deref_mut() {
                            self.conv_regularizer(
                                tape, cur, cur_shape, theta, idx, sig, lambda, acc,
                            )?;
                        }
                    }
                    let conv = tape.conv2d_valid(cur, theta, stride)?;
                    cur = tape.add_bias(conv, bias)?;
                    param_ids.push((theta, bias));
                }
                LayerSpec::Dense { units, .. } => {
                    let slot = self.slots[idx].as_ref().unwrap();
                    let d_in = slot.theta_shape[0];
                    let theta = tape.leaf(
                        Tensor::new(
                            slot.theta_shape.clone(),
                            params[slot.theta_offset..slot.theta_offset + d_in * units].to_vec(),
                        )?,
                        requires_grad,
                    );
                    let bias = tape.leaf(
                        Tensor::from_vec(
                            params[slot.bias_offset..slot.bias_offset + slot.bias_len].to_vec(),
                        ),
                        requires_grad,
                    );
                    if smoothing && internal_input && lambda > 0.0 {
                        if let Some(acc) = reg.as_deref_mut() {
                            let coef = match self.config.dense_coefficient {
                                R1Coefficient::OutputDim => units,
                                R1Coefficient::InputDim => d_in,
                            } as f64;
                            // sigma^2/2 ||theta||_F^2 (batch-independent)
                            let tf = tape.frobenius_norm_sq(theta)?;
                            let wterm = tape.scalar_mul(tf, lambda * sig * sig / 2.0)?;
                            acc.push_static(tape, wterm)?;
                            // sigma^2 coef / 2 ||x||^2 (summed over the batch)
                            let xf = tape.frobenius_norm_sq(cur)?;
                            let xterm =
                                tape.scalar_mul(xf, lambda * sig * sig * coef / 2.0)?;
                            acc.push_batch(tape, xterm)?;
                        }
                    }
                    cur = tape.matmul(cur, theta)?;
                    cur = tape.add_bias(cur, bias)?;
                    param_ids.push((theta, bias));
                }
                LayerSpec::Activation { .. } => {
                    if smoothing {
                        let act = tape.smooth_relu(cur, sig)?;
                        if internal_input && lambda > 0.0 {
                            if let Some(acc) = reg.as_deref_mut() {
                                let relu_sq = tape.smooth_relu_sq(cur, sig)?;
                                let sum_sq = tape.sum(relu_sq)?;
                                let act_fro = tape.frobenius_norm_sq(act)?;
                                let signed = match self.config.reg_sign {
                                    RegSign::Derivation => tape.sub(sum_sq, act_fro)?,
                                    RegSign::Table3 => tape.add(sum_sq, act_fro)?,
                                };
                                let term = tape.scalar_mul(signed, lambda)?;
                                acc.push_batch(tape, term)?;
                            }
                        }
                        cur = act;
                    } else {
                        cur = tape.relu(cur)?;
                    }
                }
                LayerSpec::AvgPool { window, stride } => {
                    cur = tape.avg_pool(cur, window, stride)?;
                }
                LayerSpec::Flatten => {
                    cur = tape.flatten(cur)?;
                }
                LayerSpec::Dropout { p, .. } => {
                    // identity forward; smoothed regularizer p ||x||^2
                    if smoothing && lambda > 0.0 && p > 0.0 {
                        if let Some(acc) = reg.as_deref_mut() {
                            let xf = tape.frobenius_norm_sq(cur)?;
                            let term = tape.scalar_mul(xf, lambda * p)?;
                            acc.push_batch(tape, term)?;
                        }
                    }
                }
            }
            cur_shape = self.shapes[idx];
        }
        let _ = cur_shape;
        Ok((cur, param_ids))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_regularizer(
        &self,
        tape: &mut Tape,
        x: ValueId,
        x_shape: Shape,
        theta: ValueId,
        idx: usize,
        sig: f64,
        lambda: f64,
        acc: &mut RegAccumulator,
    ) -> Result<()> {
        let (size, stride) = match self.config.layers[idx] {
            LayerSpec::Conv { size, stride, .. } => (size, stride),
            _ => unreachable!(),
        };
        let (c, h, w) = match x_shape {
            Shape::Image { c, h, w } => (c, h, w),
            Shape::Flat(_) => unreachable!("validated in new"),
        };
        let batch = tape.value(x).shape()[0];
        // sigma^2/2 w_out^2 ||theta||_F^2
        let wo = kernels::valid_out_extent(w, size, stride);
        let tf = tape.frobenius_norm_sq(theta)?;
        let wterm = tape.scalar_mul(tf, lambda * sig * sig / 2.0 * (wo * wo) as f64)?;
        acc.push_static(tape, wterm)?;
        // sigma^2/2 ||x||_C^2 as a cover-count-weighted quadratic
        let counts = window_cover_counts(h, w, size, stride);
        let mut tiled = Vec::with_capacity(batch * c * h * w);
        for _ in 0..batch * c {
            tiled.extend_from_slice(counts.data());
        }
        let cnode = tape.constant(Tensor::new(vec![batch, c, h, w], tiled)?);
        let xsq = tape.square(x)?;
        let weighted = tape.mul(xsq, cnode)?;
        let s = tape.sum(weighted)?;
        let xterm = tape.scalar_mul(s, lambda * sig * sig / 2.0)?;
        acc.push_batch(tape, xterm)
    }

    /// Builds the mean loss over a batch: squared error against one-hot
    /// targets plus the smoothed regularizers.
    ///
    /// `sigma = None` is the raw (baseline) network; `Some(0.0)` follows the
    /// smoothed construction, whose every term degenerates to the raw one.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        params: &[f64],
        images: &[f64],
        labels: &[u8],
        sigma: Option<f64>,
    ) -> Result<LossGraph> {
        self.check_params(params)?;
        let batch = labels.len();
        if batch == 0 || images.len() != batch * self.input_len() {
            return Err(Error::InvalidArgument(format!(
                "batch of {} labels does not match {} image values",
                batch,
                images.len()
            )));
        }
        let input = self.input_node(tape, images, batch)?;
        let mut acc = RegAccumulator::default();
        let (pred, param_ids) =
            self.forward_chain(tape, input, params, sigma, true, Some(&mut acc))?;
        let targets = tape.constant(self.one_hot(labels)?);
        let diff = tape.sub(pred, targets)?;
        let data = tape.frobenius_norm_sq(diff)?;

        // mean over the batch: (data + batch-summed activity terms) / B,
        // plus the per-sample-constant weight terms once
        let mut batch_total = data;
        if let Some(b) = acc.batch {
            batch_total = tape.add(batch_total, b)?;
        }
        let mut loss = tape.scalar_mul(batch_total, 1.0 / batch as f64)?;
        if let Some(s) = acc.static_terms {
            loss = tape.add(loss, s)?;
        }
        Ok(LossGraph {
            loss,
            params: param_ids,
        })
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.param_count,
                params.len()
            )));
        }
        Ok(())
    }

    /// Mean loss over a sample set, chunked to bound graph memory.
    pub fn dataset_loss(
        &self,
        params: &[f64],
        images: &[f64],
        labels: &[u8],
        sigma: Option<f64>,
    ) -> Result<f64> {
        let n = labels.len();
        let px = self.input_len();
        let mut total = 0.0;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::new();
            let g = self.build_loss(
                &mut tape,
                params,
                &images[start * px..end * px],
                &labels[start..end],
                sigma,
            )?;
            total += tape.value(g.loss).item() * (end - start) as f64;
        }
        Ok(total / n as f64)
    }

    /// Argmax accuracy against labels, forward pass at the network's sigma.
    pub fn accuracy(
        &self,
        params: &[f64],
        images: &[f64],
        labels: &[u8],
        sigma: Option<f64>,
    ) -> Result<f64> {
        self.check_params(params)?;
        let n = labels.len();
        let px = self.input_len();
        let width = self.output_width();
        let mut correct = 0usize;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let batch = end - start;
            let mut tape = Tape::new();
            let input = self.input_node(&mut tape, &images[start * px..end * px], batch)?;
            let (pred, _) = self.forward_chain(&mut tape, input, params, sigma, false, None)?;
            let logits = tape.value(pred).data();
            for b in 0..batch {
                let row = &logits[b * width..(b + 1) * width];
                let mut best = 0usize;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                if best == labels[start + b] as usize {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / n as f64)
    }
}

const CHUNK: usize = 64;

/// Splits regularizer terms into batch-summed activity terms (scaled by 1/B
/// with the data loss) and per-sample-constant weight terms (added once).
#[derive(Default)]
struct RegAccumulator {
    batch: Option<ValueId>,
    static_terms: Option<ValueId>,
}

impl RegAccumulator {
    fn push_batch(&mut self, tape: &mut Tape, term: ValueId) -> Result<()> {
        self.batch = Some(match self.batch {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
        Ok(())
    }

    fn push_static(&mut self, tape: &mut Tape, term: ValueId) -> Result<()> {
        self.static_terms = Some(match self.static_terms {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
        Ok(())
    }
}

/// Supervised objective over an in-memory sample set: component `k` is the
/// squared-error-plus-regularizer loss of sample `k`.
pub struct DatasetObjective<'a> {
    network: &'a Network,
    images: &'a [f64],
    labels: &'a [u8],
}

impl<'a> DatasetObjective<'a> {
    pub fn new(network: &'a Network, images: &'a [f64], labels: &'a [u8]) -> Result<Self> {
        if images.len() != labels.len() * network.input_len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels do not match {} image values",
                labels.len(),
                images.len()
            )));
        }
        Ok(DatasetObjective {
            network,
            images,
            labels,
        })
    }

    fn gather(&self, ks: &[usize]) -> (Vec<f64>, Vec<u8>) {
        let px = self.network.input_len();
        let mut images = Vec::with_capacity(ks.len() * px);
        let mut labels = Vec::with_capacity(ks.len());
        for &k in ks {
            images.extend_from_slice(&self.images[k * px..(k + 1) * px]);
            labels.push(self.labels[k]);
        }
        (images, labels)
    }

    fn batch_loss_grad(
        &self,
        ks: &[usize],
        x: &[f64],
        sigma: Option<f64>,
        out: &mut [f64],
    ) -> Result<f64> {
        let (images, labels) = self.gather(ks);
        let mut tape = Tape::new();
        let graph = self.network.build_loss(&mut tape, x, &images, &labels, sigma)?;
        tape.backward(graph.loss)?;
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut cursor = 0usize;
        for (theta, bias) in &graph.params {
            for &src in [theta, bias] {
                let g = tape
                    .grad(src)
                    .expect("parameter gradient after backward");
                out[cursor..cursor + g.len()].copy_from_slice(g);
                cursor += g.len();
            }
        }
        debug_assert_eq!(cursor, self.network.param_count());
        Ok(tape.value(graph.loss).item())
    }

    fn batch_loss(&self, ks: &[usize], x: &[f64], sigma: Option<f64>) -> Result<f64> {
        let (images, labels) = self.gather(ks);
        let mut tape = Tape::new();
        let graph = self.network.build_loss(&mut tape, x, &images, &labels, sigma)?;
        Ok(tape.value(graph.loss).item())
    }

    fn chunked_full_grad(&self, x: &[f64], sigma: Option<f64>, out: &mut [f64]) -> Result<f64> {
        let n = self.labels.len();
        let mut acc = vec![0.0; out.len()];
        let mut buf = vec![0.0; out.len()];
        let mut loss = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let ks: Vec<usize> = (start..end).collect();
            let l = self.batch_loss_grad(&ks, x, sigma, &mut buf)?;
            let w = (end - start) as f64;
            loss += l * w;
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b * w;
            }
            start = end;
        }
        let inv = 1.0 / n as f64;
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = a * inv;
        }
        Ok(loss * inv)
    }
}

impl ComponentObjective for DatasetObjective<'_> {
    fn dim(&self) -> usize {
        self.network.param_count()
    }

    fn num_components(&self) -> usize {
        self.labels.len()
    }

    fn value(&self, k: usize, x: &[f64], sigma: f64) -> Result<f64> {
        self.batch_loss(&[k], x, Some(sigma))
    }

    fn grad(&self, k: usize, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        self.batch_loss_grad(&[k], x, Some(sigma), out)
    }

    fn raw_grad(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<f64> {
        self.batch_loss_grad(&[k], x, None, out)
    }

    fn raw_value(&self, k: usize, x: &[f64]) -> Result<f64> {
        self.batch_loss(&[k], x, None)
    }

    fn batch_grad(&self, ks: &[usize], x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        self.batch_loss_grad(ks, x, Some(sigma), out)
    }

    fn raw_batch_grad(&self, ks: &[usize], x: &[f64], out: &mut [f64]) -> Result<f64> {
        self.batch_loss_grad(ks, x, None, out)
    }

    fn full_grad(&self, x: &[f64], sigma: f64, out: &mut [f64]) -> Result<f64> {
        self.chunked_full_grad(x, Some(sigma), out)
    }

    fn full_raw_grad(&self, x: &[f64], out: &mut [f64]) -> Result<f64> {
        self.chunked_full_grad(x, None, out)
    }
}
