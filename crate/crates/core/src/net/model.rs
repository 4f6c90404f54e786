//! Layer shapes, parameter storage, forward pass, and backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NetError;
use crate::bagging::Patch;

/// Logits are clamped to this magnitude before the sigmoid, keeping the
/// output probability strictly inside (0, 1).
pub(crate) const LOGIT_CLAMP: f64 = 30.0;

/// Input geometry of the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn flat_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Layer blueprint. Conv layers use square kernels and zero padding;
/// every layer except the final dense one is followed by a ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    Dense { width: usize },
}

#[derive(Debug, Clone)]
struct LayerDims {
    spec: LayerSpec,
    /// (channels, height, width); dense layers flatten to channels=len.
    in_shape: (usize, usize, usize),
    out_shape: (usize, usize, usize),
    w_off: usize,
    w_len: usize,
    b_off: usize,
    relu: bool,
}

fn shape_len(s: (usize, usize, usize)) -> usize {
    s.0 * s.1 * s.2
}

/// Valid output range for one kernel tap: all `o` with
/// `0 <= o*stride + k - pad < in_len`.
#[inline]
fn tap_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    pad: usize,
    k: usize,
) -> Option<(usize, usize)> {
    let s = stride as i64;
    let off = k as i64 - pad as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = ((in_len as i64 - 1 - off) / s).min(out_len as i64 - 1);
    if hi < lo {
        None
    } else {
        Some((lo as usize, hi as usize))
    }
}

/// Walk the valid output rows of one kernel tap, handing the callback the
/// output row, its valid column range, the matching input row, and the
/// input column of the range start. Hoists all bounds reasoning out of
/// the hot loops.
#[inline]
fn for_each_tap(
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, std::ops::Range<usize>, usize, usize),
) {
    let Some((oy_lo, oy_hi)) = tap_range(out_h, in_h, stride, pad, ky) else {
        return;
    };
    let Some((ox_lo, ox_hi)) = tap_range(out_w, in_w, stride, pad, kx) else {
        return;
    };
    let ix0 = ox_lo * stride + kx - pad;
    for oy in oy_lo..=oy_hi {
        let iy = oy * stride + ky - pad;
        f(oy, ox_lo..ox_hi + 1, iy, ix0);
    }
}

/// The scorer: layer descriptors plus one flat parameter vector.
#[derive(Debug, Clone)]
pub struct ScorerModel {
    input: Geometry,
    layers: Vec<LayerDims>,
    params: Vec<f64>,
}

/// Cached activations from a forward pass, consumed by backprop.
pub struct ForwardTrace {
    /// `values[0]` is the input; `values[i+1]` the post-activation output
    /// of layer `i`.
    values: Vec<Vec<f64>>,
    logit: f64,
    pub p: f64,
}

impl ScorerModel {
    /// Resolve layer shapes and randomly initialize parameters
    /// (He-style scaling, zero biases). The final layer must be a
    /// 1-wide dense head.
    pub fn new(input: Geometry, specs: &[LayerSpec], seed: u64) -> Self {
        assert!(
            matches!(specs.last(), Some(LayerSpec::Dense { width: 1 })),
            "final layer must be Dense {{ width: 1 }}"
        );
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = (input.channels, input.height, input.width);
        let mut offset = 0usize;
        for (li, &spec) in specs.iter().enumerate() {
            let last = li == specs.len() - 1;
            let (out_shape, w_len, b_len) = match spec {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    assert!(stride >= 1 && kernel >= 1);
                    let oh = (shape.1 + 2 * pad - kernel) / stride + 1;
                    let ow = (shape.2 + 2 * pad - kernel) / stride + 1;
                    ((out_channels, oh, ow), out_channels * shape.0 * kernel * kernel, out_channels)
                }
                LayerSpec::Dense { width } => {
                    ((width, 1, 1), width * shape_len(shape), width)
                }
            };
            let w_off = offset;
            offset += w_len;
            let b_off = offset;
            offset += b_len;
            layers.push(LayerDims {
                spec,
                in_shape: shape,
                out_shape,
                w_off,
                w_len,
                b_off,
                relu: !last,
            });
            shape = out_shape;
        }
        let mut params = vec![0.0; offset];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        for layer in &layers {
            let fan_in = match layer.spec {
                LayerSpec::Conv { kernel, .. } => layer.in_shape.0 * kernel * kernel,
                LayerSpec::Dense { .. } => shape_len(layer.in_shape),
            };
            let scale = (2.0 / fan_in as f64).sqrt();
            for w in &mut params[layer.w_off..layer.w_off + layer.w_len] {
                *w = unit.sample(&mut rng) * scale;
            }
        }
        Self { input, layers, params }
    }

    /// The default architecture: three stride-2 conv blocks (8, 16, 32
    /// channels, 3x3 kernels) and a 64-wide dense layer before the
    /// 1-logit head.
    pub fn reference(input: Geometry, seed: u64) -> Self {
        Self::new(
            input,
            &[
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Conv { out_channels: 32, kernel: 3, stride: 2, pad: 1 },
                LayerSpec::Dense { width: 64 },
                LayerSpec::Dense { width: 1 },
            ],
            seed,
        )
    }

    /// Rebuild a model from checkpointed parts. Validates that the layer
    /// chain is consistent with the input geometry and parameter count.
    pub fn from_parts(
        input: Geometry,
        specs: &[LayerSpec],
        params: Vec<f64>,
    ) -> Result<Self, String> {
        if !matches!(specs.last(), Some(LayerSpec::Dense { width: 1 })) {
            return Err("final layer is not a 1-wide dense head".into());
        }
        let skeleton = Self::new(input, specs, 0);
        if skeleton.params.len() != params.len() {
            return Err(format!(
                "parameter count {} does not match architecture ({} expected)",
                params.len(),
                skeleton.params.len()
            ));
        }
        Ok(Self { input: skeleton.input, layers: skeleton.layers, params })
    }

    pub fn input_geometry(&self) -> Geometry {
        self.input
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_patch(&self, patch: &Patch) -> Result<(), NetError> {
        if patch.size != self.input.height
            || patch.size != self.input.width
            || patch.channels != self.input.channels
        {
            return Err(NetError::ShapeMismatch {
                expected_h: self.input.height,
                expected_w: self.input.width,
                expected_c: self.input.channels,
                got_h: patch.size,
                got_w: patch.size,
                got_c: patch.channels,
            });
        }
        Ok(())
    }

    /// Probability that the patch is an object.
    pub fn forward(&self, patch: &Patch) -> Result<f64, NetError> {
        Ok(self.forward_trace(patch)?.p)
    }

    /// Forward pass that keeps activations for backprop. Intensities are
    /// centered to [-0.5, 0.5] on the way in.
    pub fn forward_trace(&self, patch: &Patch) -> Result<ForwardTrace, NetError> {
        self.check_patch(patch)?;
        let input: Vec<f64> = patch.data.iter().map(|&v| v as f64 - 0.5).collect();
        Ok(self.forward_values(input))
    }

    fn forward_values(&self, input: Vec<f64>) -> ForwardTrace {
        debug_assert_eq!(input.len(), self.input.flat_len());
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input);
        for layer in &self.layers {
            let x = values.last().unwrap();
            let mut y = vec![0.0; shape_len(layer.out_shape)];
            match layer.spec {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let (in_c, in_h, in_w) = layer.in_shape;
                    let (_, out_h, out_w) = layer.out_shape;
                    for oc in 0..out_channels {
                        let bias = self.params[layer.b_off + oc];
                        y[(oc * out_h) * out_w..(oc * out_h + out_h) * out_w].fill(bias);
                        for ic in 0..in_c {
                            let w_base = layer.w_off + ((oc * in_c + ic) * kernel) * kernel;
                            let x_plane = &x[(ic * in_h) * in_w..(ic * in_h + in_h) * in_w];
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let w = self.params[w_base + ky * kernel + kx];
                                    for_each_tap(
                                        out_h, out_w, in_h, in_w, stride, pad, ky, kx,
                                        |oy, ox_range, iy, ix0| {
                                            let out_row = &mut y[(oc * out_h + oy) * out_w..]
                                                [..out_w];
                                            let in_row = &x_plane[iy * in_w..][..in_w];
                                            let mut ix = ix0;
                                            for ox in ox_range {
                                                out_row[ox] += w * in_row[ix];
                                                ix += stride;
                                            }
                                        },
                                    );
                                }
                            }
                        }
                    }
                }
                LayerSpec::Dense { width } => {
                    let in_len = shape_len(layer.in_shape);
                    for o in 0..width {
                        let w_row = &self.params[layer.w_off + o * in_len..][..in_len];
                        let mut acc = self.params[layer.b_off + o];
                        for (wi, xi) in w_row.iter().zip(x.iter()) {
                            acc += wi * xi;
                        }
                        y[o] = acc;
                    }
                }
            }
            if layer.relu {
                for v in &mut y {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            values.push(y);
        }
        let raw_logit = values.last().unwrap()[0];
        let logit = raw_logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        let p = 1.0 / (1.0 + (-logit).exp());
        ForwardTrace { values, logit: raw_logit, p }
    }

    /// Accumulate `d loss / d params` into `grad`, given `d loss / d p`.
    /// `grad` must have `param_count` entries.
    pub fn backward_into(&self, trace: &ForwardTrace, dloss_dp: f64, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        // sigmoid with clamped logit: zero slope outside the clamp window
        let dlogit = if trace.logit.abs() >= LOGIT_CLAMP {
            0.0
        } else {
            dloss_dp * trace.p * (1.0 - trace.p)
        };
        let mut dy = vec![dlogit];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.values[li];
            let y = &trace.values[li + 1];
            if layer.relu {
                for (dv, &v) in dy.iter_mut().zip(y.iter()) {
                    if v <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let mut dx = vec![0.0; shape_len(layer.in_shape)];
            match layer.spec {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let (in_c, in_h, in_w) = layer.in_shape;
                    let (_, out_h, out_w) = layer.out_shape;
                    for oc in 0..out_channels {
                        let g_plane = &dy[(oc * out_h) * out_w..(oc * out_h + out_h) * out_w];
                        grad[layer.b_off + oc] += g_plane.iter().sum::<f64>();
                        for ic in 0..in_c {
                            let w_base = layer.w_off + ((oc * in_c + ic) * kernel) * kernel;
                            let x_base = (ic * in_h) * in_w;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let w = self.params[w_base + ky * kernel + kx];
                                    let mut dw = 0.0;
                                    for_each_tap(
                                        out_h, out_w, in_h, in_w, stride, pad, ky, kx,
                                        |oy, ox_range, iy, ix0| {
                                            let g_row = &g_plane[oy * out_w..][..out_w];
                                            let row = x_base + iy * in_w;
                                            let mut ix = ix0;
                                            for ox in ox_range {
                                                let g = g_row[ox];
                                                dw += g * x[row + ix];
                                                dx[row + ix] += w * g;
                                                ix += stride;
                                            }
                                        },
                                    );
                                    grad[w_base + ky * kernel + kx] += dw;
                                }
                            }
                        }
                    }
                }
                LayerSpec::Dense { width } => {
                    let in_len = shape_len(layer.in_shape);
                    for o in 0..width {
                        let g = dy[o];
                        if g == 0.0 {
                            continue;
                        }
                        grad[layer.b_off + o] += g;
                        let w_row = &self.params[layer.w_off + o * in_len..][..in_len];
                        let g_row = &mut grad[layer.w_off + o * in_len..][..in_len];
                        for i in 0..in_len {
                            g_row[i] += g * x[i];
                            dx[i] += g * w_row[i];
                        }
                    }
                }
            }
            dy = dx;
        }
    }
}
