//! Linear-chain CNNs: shape inference, float and fixed-point forward passes,
//! backpropagation and MAC datapath widths.
//!
//! Activations are `N x C x H x W`. Inner-product layers flatten their input
//! and emit `N x O x 1 x 1`. A trailing `SoftmaxLoss` layer passes logits
//! through on the forward pass; the loss itself is computed by [`backward`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fxp::Quantizer;
use crate::stats::{Part, QuantScheme};
use crate::tensor::{col2im_batch_add, gemm, im2col_batch, Tensor, WindowGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Convolution {
        num_output: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    InnerProduct {
        num_output: usize,
    },
    ReLU,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    SoftmaxLoss,
}

impl LayerKind {
    /// The weight group this layer belongs to; `None` for layers without parameters.
    pub fn weight_part(&self) -> Option<Part> {
        match self {
            LayerKind::Convolution { .. } => Some(Part::ConvWeights),
            LayerKind::InnerProduct { .. } => Some(Part::FcWeights),
            _ => None,
        }
    }

    pub fn is_quantizable(&self) -> bool {
        self.weight_part().is_some()
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Convolution { .. } => "convolution",
            LayerKind::InnerProduct { .. } => "inner_product",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::SoftmaxLoss => "softmax_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameters, `None` for layers that have none.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Option<LayerParams>>,
}

impl ParamSet {
    pub fn new(layers: Vec<Option<LayerParams>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Option<LayerParams>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.layers
    }

    pub fn layer(&self, idx: usize) -> Option<&LayerParams> {
        self.layers.get(idx).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, idx: usize) -> Option<&mut LayerParams> {
        self.layers.get_mut(idx).and_then(Option::as_mut)
    }

    /// Zeroed set with the same shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    /// Weight then bias of every parameterized layer, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
                }
                _ => false,
            })
    }

    pub fn element_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    /// `shapes[l]` is the per-sample input shape of layer `l`; the last entry
    /// is the model output.
    shapes: Vec<[usize; 3]>,
    params: ParamSet,
}

fn output_shape(spec: &LayerSpec, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
    Ok(match spec.kind {
        LayerKind::Convolution {
            num_output,
            kernel,
            stride,
            pad,
        } => {
            if num_output == 0 {
                return Err(Error::InvalidModel(format!("`{}` has zero outputs", spec.name)));
            }
            let g = WindowGeometry::new([c, h, w], (kernel, kernel), stride, pad)?;
            [num_output, g.out_h, g.out_w]
        }
        LayerKind::InnerProduct { num_output } => {
            if num_output == 0 {
                return Err(Error::InvalidModel(format!("`{}` has zero outputs", spec.name)));
            }
            [num_output, 1, 1]
        }
        LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
            let g = WindowGeometry::new([c, h, w], (kernel, kernel), stride, 0)?;
            [c, g.out_h, g.out_w]
        }
        LayerKind::ReLU | LayerKind::SoftmaxLoss => [c, h, w],
    })
}

fn param_shapes(kind: &LayerKind, [c, h, w]: [usize; 3]) -> Option<(Vec<usize>, Vec<usize>)> {
    match *kind {
        LayerKind::Convolution {
            num_output, kernel, ..
        } => Some((vec![num_output, c, kernel, kernel], vec![num_output])),
        LayerKind::InnerProduct { num_output } => {
            Some((vec![num_output, c * h * w], vec![num_output]))
        }
        _ => None,
    }
}

impl Model {
    /// Validates the chain and allocates zeroed parameters.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("no layers".into()));
        }
        if input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!("input shape {input_shape:?}")));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.name.is_empty() || l.name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidModel(format!("bad layer name {:?}", l.name)));
            }
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::InvalidModel(format!("duplicate layer name `{}`", l.name)));
            }
            if l.kind == LayerKind::SoftmaxLoss && i + 1 != layers.len() {
                return Err(Error::InvalidModel("softmax_loss must be the last layer".into()));
            }
        }
        let mut shapes = vec![input_shape];
        for l in &layers {
            let next = output_shape(l, *shapes.last().unwrap())?;
            shapes.push(next);
        }
        let params = ParamSet::new(
            layers
                .iter()
                .zip(&shapes)
                .map(|(l, s)| {
                    param_shapes(&l.kind, *s).map(|(w, b)| LayerParams {
                        weight: Tensor::zeros(&w),
                        bias: Tensor::zeros(&b),
                    })
                })
                .collect(),
        );
        Ok(Self {
            input_shape,
            layers,
            shapes,
            params,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Per-sample input shape of layer `idx`.
    pub fn layer_input_shape(&self, idx: usize) -> [usize; 3] {
        self.shapes[idx]
    }

    pub fn layer_output_shape(&self, idx: usize) -> [usize; 3] {
        self.shapes[idx + 1]
    }

    pub fn class_count(&self) -> usize {
        self.shapes.last().unwrap().iter().product()
    }

    pub fn quantizable_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_quantizable())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Shapes must be preserved by the caller.
    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_shapes(&params) {
            return Err(Error::ShapeMismatch("parameter set does not fit the model".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn with_params(mut self, params: ParamSet) -> Result<Self> {
        self.set_params(params)?;
        Ok(self)
    }

    /// Uniform Xavier initialization (`±sqrt(3 / fan_in)`), zero biases.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.layers.iter_mut().flatten() {
            let fan_in = p.weight.len() / p.weight.shape()[0];
            let a = libm::sqrtf(3.0 / fan_in as f32);
            for v in p.weight.data_mut() {
                *v = rng.random_range(-a..a);
            }
            p.bias.data_mut().fill(0.0);
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape || s[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} does not match input shape {:?}",
                s, self.input_shape
            )));
        }
        Ok(s[0])
    }

    fn run(
        &self,
        params: &ParamSet,
        batch: &Tensor,
        input_quant: Option<&Quantizer>,
        post: &[Option<Quantizer>],
        keep: bool,
        observe: &mut dyn FnMut(usize, &Tensor),
    ) -> Result<Vec<Tensor>> {
        let n = self.check_batch(batch)?;
        let mut x = batch.clone();
        if let Some(q) = input_quant {
            q.nearest_slice(x.data_mut());
        }
        let mut kept = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut y = self.layer_forward(idx, layer, params.layer(idx), &x, n);
            if let Some(Some(q)) = post.get(idx) {
                q.nearest_slice(y.data_mut());
            }
            observe(idx, &y);
            if keep {
                kept.push(core::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        kept.push(x);
        Ok(kept)
    }

    fn layer_forward(
        &self,
        idx: usize,
        layer: &LayerSpec,
        params: Option<&LayerParams>,
        x: &Tensor,
        n: usize,
    ) -> Tensor {
        let in_shape = self.shapes[idx];
        let out_shape = self.shapes[idx + 1];
        let mut y = Tensor::zeros(&[n, out_shape[0], out_shape[1], out_shape[2]]);
        match layer.kind {
            LayerKind::Convolution { kernel, stride, pad, .. } => {
                let p = params.expect("convolution has parameters");
                let g = WindowGeometry::new(in_shape, (kernel, kernel), stride, pad).unwrap();
                conv_forward(&g, p, x.data(), n, y.data_mut());
            }
            LayerKind::InnerProduct { num_output } => {
                let p = params.expect("inner product has parameters");
                let d = in_shape.iter().product();
                fc_forward(p, x.data(), n, d, num_output, y.data_mut());
            }
            LayerKind::ReLU => {
                for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = i.max(0.0);
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                let g = WindowGeometry::new(in_shape, (kernel, kernel), stride, 0).unwrap();
                pool_forward(&g, x.data(), n, true, y.data_mut());
            }
            LayerKind::AvgPool { kernel, stride } => {
                let g = WindowGeometry::new(in_shape, (kernel, kernel), stride, 0).unwrap();
                pool_forward(&g, x.data(), n, false, y.data_mut());
            }
            LayerKind::SoftmaxLoss => y.data_mut().copy_from_slice(x.data()),
        }
        y
    }

    fn logits_from(&self, out: Tensor) -> Tensor {
        let n = out.shape()[0];
        out.reshape(&[n, self.class_count()]).expect("class count matches output")
    }
}

/// Values flowing through one forward pass: `values[0]` is the batch,
/// `values[l + 1]` the output of layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    values: Vec<Tensor>,
}

impl ActivationRecord {
    pub fn input(&self, layer: usize) -> &Tensor {
        &self.values[layer]
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.values[layer + 1]
    }

    pub fn layer_count(&self) -> usize {
        self.values.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.values[0].shape()[0]
    }

    /// Final output flattened to `batch x classes`.
    pub fn logits(&self) -> Tensor {
        let last = self.values.last().unwrap();
        let n = last.shape()[0];
        let classes = last.len() / n;
        last.clone().reshape(&[n, classes]).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: ParamSet,
    /// Mean softmax cross-entropy over the batch.
    pub loss: f32,
}

/// Float forward pass; returns `batch x classes` logits and every activation.
pub fn forward_float(model: &Model, batch: &Tensor) -> Result<(Tensor, ActivationRecord)> {
    let values = model.run(model.params(), batch, None, &[], true, &mut |_, _| {})?;
    let record = ActivationRecord { values };
    Ok((record.logits(), record))
}

/// Float forward pass that keeps only the logits.
pub fn forward_float_logits(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let mut out = model.run(model.params(), batch, None, &[], false, &mut |_, _| {})?;
    Ok(model.logits_from(out.pop().unwrap()))
}

/// Float forward pass reporting each layer output to `observe`.
pub fn forward_float_observed(
    model: &Model,
    batch: &Tensor,
    observe: &mut dyn FnMut(usize, &Tensor),
) -> Result<Tensor> {
    let mut out = model.run(model.params(), batch, None, &[], false, observe)?;
    Ok(model.logits_from(out.pop().unwrap()))
}

/// A model with weights and biases pre-quantized for one scheme.
///
/// Weight and bias quantization happens once here; [`QuantizedNet::forward`]
/// then quantizes the input batch and every layer output that the scheme
/// covers. Accumulation inside conv and inner-product layers stays in float.
#[derive(Debug, Clone)]
pub struct QuantizedNet<'a> {
    model: &'a Model,
    params: ParamSet,
    input_quant: Option<Quantizer>,
    post: Vec<Option<Quantizer>>,
}

impl<'a> QuantizedNet<'a> {
    pub fn new(model: &'a Model, scheme: &QuantScheme) -> Result<Self> {
        scheme.validate(model)?;
        let mut params = model.params().clone();
        let input_fmt = scheme.input_format()?;
        let mut post = Vec::with_capacity(model.layers.len());
        let mut current = input_fmt.map(|f| f.quantizer());
        for (idx, layer) in model.layers.iter().enumerate() {
            match layer.kind {
                LayerKind::Convolution { .. } | LayerKind::InnerProduct { .. } => {
                    let p = params.layer_mut(idx).unwrap();
                    if let Some(f) = scheme.weight_format(layer)? {
                        f.quantizer().nearest_slice(p.weight.data_mut());
                    }
                    let out = scheme.output_format(&layer.name)?.map(|f| f.quantizer());
                    if let Some(q) = &out {
                        q.nearest_slice(p.bias.data_mut());
                    }
                    current = out;
                    post.push(out);
                }
                LayerKind::AvgPool { .. } => post.push(current),
                _ => post.push(None),
            }
        }
        Ok(Self {
            model,
            params,
            input_quant: input_fmt.map(|f| f.quantizer()),
            post,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut out = self.model.run(
            &self.params,
            batch,
            self.input_quant.as_ref(),
            &self.post,
            false,
            &mut |_, _| {},
        )?;
        Ok(self.model.logits_from(out.pop().unwrap()))
    }

    pub fn forward_record(&self, batch: &Tensor) -> Result<ActivationRecord> {
        let values = self.model.run(
            &self.params,
            batch,
            self.input_quant.as_ref(),
            &self.post,
            true,
            &mut |_, _| {},
        )?;
        Ok(ActivationRecord { values })
    }
}

/// Fixed-point forward pass under `scheme`.
pub fn forward_quantized(model: &Model, scheme: &QuantScheme, batch: &Tensor) -> Result<Tensor> {
    QuantizedNet::new(model, scheme)?.forward(batch)
}

fn conv_forward(g: &WindowGeometry, p: &LayerParams, x: &[f32], n: usize, y: &mut [f32]) {
    let (k, pl, o) = (g.patch_len(), g.out_positions(), p.bias.len());
    let mut cols = vec![0.0; k * n * pl];
    im2col_batch(x, n, g, &mut cols);
    for img in 0..n {
        let out = &mut y[img * o * pl..(img + 1) * o * pl];
        for (oc, row) in out.chunks_mut(pl).enumerate() {
            row.fill(p.bias.data()[oc]);
        }
        gemm(
            o,
            k,
            pl,
            p.weight.data(),
            (k, 1),
            &cols[img * pl..],
            (n * pl, 1),
            1.0,
            out,
            (pl, 1),
        );
    }
}

fn fc_forward(p: &LayerParams, x: &[f32], n: usize, d: usize, o: usize, y: &mut [f32]) {
    for row in y.chunks_mut(o) {
        row.copy_from_slice(p.bias.data());
    }
    gemm(n, d, o, x, (d, 1), p.weight.data(), (1, d), 1.0, y, (o, 1));
}

fn pool_forward(g: &WindowGeometry, x: &[f32], n: usize, max: bool, y: &mut [f32]) {
    let area = (g.kernel_h * g.kernel_w) as f32;
    for plane in 0..n * g.channels {
        let src = &x[plane * g.height * g.width..(plane + 1) * g.height * g.width];
        let dst = &mut y[plane * g.out_positions()..(plane + 1) * g.out_positions()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = if max { f32::NEG_INFINITY } else { 0.0 };
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let v = src[(oy * g.stride + ky) * g.width + ox * g.stride + kx];
                        if max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                    }
                }
                dst[oy * g.out_w + ox] = if max { acc } else { acc / area };
            }
        }
    }
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let classes = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::expf(*v - m);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, classes] = <[usize; 2]>::try_from(logits.shape())
        .map_err(|_| Error::ShapeMismatch(format!("logits {:?}", logits.shape())))?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for batch of {n}", labels.len())));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &mut grad.data_mut()[i * classes..(i + 1) * classes];
        // guard log(0) but let NaN through so divergence is visible
        let p = row[label];
        loss -= libm::log(if p == 0.0 { f32::MIN_POSITIVE } else { p } as f64);
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f32;
        }
    }
    Ok(((loss / n as f64) as f32, grad))
}

/// Gradients of the mean softmax cross-entropy with respect to every
/// parameter, evaluated at the model's current parameters.
pub fn backward(model: &Model, record: &ActivationRecord, labels: &[usize]) -> Result<Gradients> {
    if record.layer_count() != model.layers.len()
        || record
            .values
            .iter()
            .zip(&model.shapes)
            .any(|(v, s)| v.shape().len() != 4 || v.shape()[1..] != *s)
    {
        return Err(Error::ShapeMismatch("activation record does not match the model".into()));
    }
    let n = record.batch_size();
    let (loss, grad_logits) = softmax_cross_entropy(&record.logits(), labels)?;
    let mut grads = model.params.zeros_like();
    let out_shape = *model.shapes.last().unwrap();
    let mut dy = grad_logits
        .reshape(&[n, out_shape[0], out_shape[1], out_shape[2]])
        .unwrap();

    for idx in (0..model.layers.len()).rev() {
        let x = record.input(idx);
        let in_shape = model.shapes[idx];
        let mut dx = Tensor::zeros(x.shape());
        match model.layers[idx].kind {
            LayerKind::Convolution { kernel, stride, pad, .. } => {
                let p = model.params.layer(idx).unwrap();
                let g = WindowGeometry::new(in_shape, (kernel, kernel), stride, pad).unwrap();
                let gp = grads.layer_mut(idx).unwrap();
                conv_backward(&g, p, x.data(), dy.data(), n, gp, idx > 0, dx.data_mut());
            }
            LayerKind::InnerProduct { num_output } => {
                let p = model.params.layer(idx).unwrap();
                let d = in_shape.iter().product();
                let gp = grads.layer_mut(idx).unwrap();
                fc_backward(p, x.data(), dy.data(), n, d, num_output, gp, dx.data_mut());
            }
            LayerKind::ReLU => {
                for ((g, xi), d) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
                    *g = if *xi > 0.0 { *d } else { 0.0 };
                }
            }
            LayerKind::MaxPool { kernel, stride } => {
                let g = WindowGeometry::new(in_shape, (kernel, kernel), stride, 0).unwrap();
                pool_backward(&g, x.data(), dy.data(), n, true, dx.data_mut());
            }
            LayerKind::AvgPool { kernel, stride } => {
                let g = WindowGeometry::new(in_shape, (kernel, kernel), stride, 0).unwrap();
                pool_backward(&g, x.data(), dy.data(), n, false, dx.data_mut());
            }
            LayerKind::SoftmaxLoss => dx.data_mut().copy_from_slice(dy.data()),
        }
        dy = dx;
    }
    Ok(Gradients {
        params: grads,
        loss,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &WindowGeometry,
    p: &LayerParams,
    x: &[f32],
    dy: &[f32],
    n: usize,
    gp: &mut LayerParams,
    need_dx: bool,
    dx: &mut [f32],
) {
    let (k, pl, o) = (g.patch_len(), g.out_positions(), p.bias.len());
    let mut cols = vec![0.0; k * n * pl];
    im2col_batch(x, n, g, &mut cols);
    let mut dcols = if need_dx { vec![0.0; k * n * pl] } else { Vec::new() };
    for img in 0..n {
        let dy_img = &dy[img * o * pl..(img + 1) * o * pl];
        for (oc, row) in dy_img.chunks(pl).enumerate() {
            gp.bias.data_mut()[oc] += row.iter().sum::<f32>();
        }
        // dW += dY_img (o x pl) * cols_img^T (pl x k)
        gemm(
            o,
            pl,
            k,
            dy_img,
            (pl, 1),
            &cols[img * pl..],
            (1, n * pl),
            1.0,
            gp.weight.data_mut(),
            (k, 1),
        );
        if need_dx {
            // dcols_img (k x pl) = W^T (k x o) * dY_img (o x pl)
            gemm(
                k,
                o,
                pl,
                p.weight.data(),
                (1, k),
                dy_img,
                (pl, 1),
                0.0,
                &mut dcols[img * pl..],
                (n * pl, 1),
            );
        }
    }
    if need_dx {
        col2im_batch_add(&dcols, n, g, dx);
    }
}

#[allow(clippy::too_many_arguments)]
fn fc_backward(
    p: &LayerParams,
    x: &[f32],
    dy: &[f32],
    n: usize,
    d: usize,
    o: usize,
    gp: &mut LayerParams,
    dx: &mut [f32],
) {
    for row in dy.chunks(o) {
        for (b, v) in gp.bias.data_mut().iter_mut().zip(row) {
            *b += v;
        }
    }
    // dW (o x d) = dY^T (o x n) * X (n x d)
    gemm(o, n, d, dy, (1, o), x, (d, 1), 0.0, gp.weight.data_mut(), (d, 1));
    // dX (n x d) = dY (n x o) * W (o x d)
    gemm(n, o, d, dy, (o, 1), p.weight.data(), (d, 1), 0.0, dx, (d, 1));
}

fn pool_backward(g: &WindowGeometry, x: &[f32], dy: &[f32], n: usize, max: bool, dx: &mut [f32]) {
    let area = (g.kernel_h * g.kernel_w) as f32;
    let plane_len = g.height * g.width;
    for plane in 0..n * g.channels {
        let src = &x[plane * plane_len..(plane + 1) * plane_len];
        let grad = &dy[plane * g.out_positions()..(plane + 1) * g.out_positions()];
        let dst = &mut dx[plane * plane_len..(plane + 1) * plane_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = grad[oy * g.out_w + ox];
                let base = (oy * g.stride) * g.width + ox * g.stride;
                if max {
                    // first maximum in scan order takes the gradient
                    let mut best = base;
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            let i = base + ky * g.width + kx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    dst[best] += d;
                } else {
                    for ky in 0..g.kernel_h {
                        for kx in 0..g.kernel_w {
                            dst[base + ky * g.width + kx] += d / area;
                        }
                    }
                }
            }
        }
    }
}

/// Bit widths along the MAC datapath of one conv or inner-product layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatapathRow {
    pub layer: String,
    /// Layer output (activation) bits.
    pub m: u32,
    /// Weight bits.
    pub n: u32,
    /// Multiplications per output value.
    pub x: usize,
    pub product_width: u32,
    pub adder_level_widths: Vec<u32>,
    pub accumulator_width: u32,
    pub bias_stage_width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatapathReport {
    pub rows: Vec<DatapathRow>,
}

pub fn ceil_log2(x: usize) -> u32 {
    if x <= 1 {
        0
    } else {
        usize::BITS - (x - 1).leading_zeros()
    }
}

/// Adder-tree widths for `layer` fed by inputs of shape `input_shape`.
///
/// A tree reducing `x` products has `ceil(lg2 x)` levels. The accumulator is
/// `m + n + ceil(lg2 x)` bits and the bias adder adds one more. Level `k`
/// (1-based) is listed as `m + n + k + 1` bits, capped at the accumulator, so
/// the first level is `m + n + 2` wide.
pub fn datapath_widths(
    layer: &LayerSpec,
    input_shape: [usize; 3],
    m: u32,
    n: u32,
) -> Result<DatapathRow> {
    let x = match layer.kind {
        LayerKind::Convolution { kernel, .. } => input_shape[0] * kernel * kernel,
        LayerKind::InnerProduct { .. } => input_shape.iter().product(),
        _ => return Err(Error::NotQuantizable(layer.name.clone())),
    };
    if m < 2 || n < 2 {
        return Err(Error::InvalidConfig(format!("datapath widths need m, n >= 2 (got {m}, {n})")));
    }
    let product_width = m + n;
    let levels = ceil_log2(x);
    let accumulator_width = product_width + levels;
    Ok(DatapathRow {
        layer: layer.name.clone(),
        m,
        n,
        x,
        product_width,
        adder_level_widths: (1..=levels).map(|k| (product_width + k + 1).min(accumulator_width)).collect(),
        accumulator_width,
        bias_stage_width: accumulator_width + 1,
    })
}

/// Datapath rows for every quantizable layer, with `m` the scheme's output
/// bits and `n` the weight bits of the layer's part.
pub fn datapath_report(model: &Model, scheme: &QuantScheme) -> Result<DatapathReport> {
    let rows = model
        .quantizable_layers()
        .map(|(idx, layer)| {
            let n = scheme.bits_for(layer.kind.weight_part().unwrap());
            datapath_widths(layer, model.layer_input_shape(idx), scheme.bits_for(Part::LayerOutputs), n)
        })
        .collect::<Result<_>>()?;
    Ok(DatapathReport { rows })
}

/// The LeNet variant used for MNIST: two conv/max-pool stages, a 500-unit
/// ReLU layer and a 10-way classifier.
pub fn lenet() -> Model {
    Model::new(
        [1, 28, 28],
        vec![
            LayerSpec::new("conv1", LayerKind::Convolution { num_output: 20, kernel: 5, stride: 1, pad: 0 }),
            LayerSpec::new("pool1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            LayerSpec::new("conv2", LayerKind::Convolution { num_output: 50, kernel: 5, stride: 1, pad: 0 }),
            LayerSpec::new("pool2", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            LayerSpec::new("ip1", LayerKind::InnerProduct { num_output: 500 }),
            LayerSpec::new("relu1", LayerKind::ReLU),
            LayerSpec::new("ip2", LayerKind::InnerProduct { num_output: 10 }),
            LayerSpec::new("loss", LayerKind::SoftmaxLoss),
        ],
    )
    .expect("lenet is a valid chain")
}

#[cfg(test)]
mod tests;
