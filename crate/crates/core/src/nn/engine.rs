//! Generic forward/backward passes.

use super::{Evaluation, Labels, Layer, LossKind, Model, Scalar};
use crate::error::{Error, Result};

impl Model {
    pub(super) fn run<T: Scalar>(
        &self,
        params: &[T],
        inputs: &[T],
        labels: &Labels,
        batch_size: usize,
        want_param: bool,
        want_input: bool,
    ) -> Result<Evaluation<T>> {
        let layers = &self.spec.layers;
        let sample_dim = self.sample_dim();
        let inv_b = 1.0 / batch_size as f64;
        let mut param_grad = if want_param {
            vec![T::zero(); self.param_count]
        } else {
            Vec::new()
        };
        let mut input_grad = if want_input {
            vec![T::zero(); inputs.len()]
        } else {
            Vec::new()
        };
        let need_backward = want_param || want_input;
        let mut total = T::zero();

        let mut acts: Vec<Vec<T>> = vec![Vec::new(); layers.len() + 1];
        let mut argmax: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];

        for s in 0..batch_size {
            acts[0].clear();
            acts[0].extend_from_slice(&inputs[s * sample_dim..(s + 1) * sample_dim]);
            for (i, layer) in layers.iter().enumerate() {
                let (before, after) = acts.split_at_mut(i + 1);
                let x = &before[i];
                let out = &mut after[0];
                self.forward_layer(i, layer, params, x, out, &mut argmax[i]);
                if out.iter().any(|v| !v.re().is_finite()) {
                    return Err(Error::NonFinite {
                        layer: i,
                        kind: layer.kind(),
                    });
                }
            }
            let logits = &acts[layers.len()];
            let (loss, mut delta) = sample_loss(self.spec.loss, logits, labels, s)?;
            if !loss.re().is_finite() {
                return Err(Error::NonFinite {
                    layer: layers.len(),
                    kind: "loss",
                });
            }
            total += loss;
            if !need_backward {
                continue;
            }
            for d in &mut delta {
                *d = d.scale(inv_b);
            }
            for (i, layer) in layers.iter().enumerate().rev() {
                let need_dx = i > 0 || want_input;
                delta = self.backward_layer(
                    i,
                    layer,
                    params,
                    &acts[i],
                    &delta,
                    &argmax[i],
                    if want_param {
                        Some(&mut param_grad)
                    } else {
                        None
                    },
                    need_dx,
                );
            }
            if want_input {
                input_grad[s * sample_dim..(s + 1) * sample_dim].copy_from_slice(&delta);
            }
        }
        Ok(Evaluation {
            loss: total.scale(inv_b),
            param_grad,
            input_grad,
        })
    }

    fn forward_layer<T: Scalar>(
        &self,
        i: usize,
        layer: &Layer,
        params: &[T],
        x: &[T],
        out: &mut Vec<T>,
        argmax: &mut Vec<usize>,
    ) {
        let in_shape = &self.shapes[i];
        let out_shape = &self.shapes[i + 1];
        let off = self.offsets[i];
        out.clear();
        match *layer {
            Layer::Dense {
                inputs,
                outputs,
                bias,
            } => {
                let w = &params[off..off + inputs * outputs];
                for o in 0..outputs {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let mut acc = if bias {
                        params[off + inputs * outputs + o]
                    } else {
                        T::zero()
                    };
                    for (wv, xv) in row.iter().zip(x) {
                        acc += *wv * *xv;
                    }
                    out.push(acc);
                }
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let wlen = out_channels * in_channels * kernel * kernel;
                let weights = &params[off..off + wlen];
                let biases = &params[off + wlen..off + wlen + out_channels];
                out.resize(out_channels * oh * ow, T::zero());
                for oc in 0..out_channels {
                    let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
                    for v in plane.iter_mut() {
                        *v = biases[oc];
                    }
                    for ic in 0..in_channels {
                        let src = &x[ic * h * w..(ic + 1) * h * w];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let wv =
                                    weights[((oc * in_channels + ic) * kernel + ky) * kernel + kx];
                                let (x0, x1) = valid_span(kx, padding, w, ow);
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < padding || iy - padding >= h {
                                        continue;
                                    }
                                    let srow = &src[(iy - padding) * w..(iy - padding + 1) * w];
                                    let orow = &mut plane[oy * ow..(oy + 1) * ow];
                                    for ox in x0..x1 {
                                        orow[ox] += wv * srow[ox + kx - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::LeakyRelu { slope } => {
                out.extend(
                    x.iter()
                        .map(|&v| if v.re() > 0.0 { v } else { v.scale(slope) }),
                );
            }
            Layer::Relu => {
                out.extend(x.iter().map(|&v| if v.re() > 0.0 { v } else { T::zero() }));
            }
            Layer::MaxPool { kernel } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                argmax.clear();
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = usize::MAX;
                            let mut best_v = f64::NEG_INFINITY;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let idx = (ch * h + oy * kernel + ky) * w + ox * kernel + kx;
                                    let v = x[idx].re();
                                    // strict comparison keeps the first maximum
                                    if v > best_v || best == usize::MAX {
                                        best_v = v;
                                        best = idx;
                                    }
                                }
                            }
                            argmax.push(best);
                            out.push(x[best]);
                        }
                    }
                }
            }
            Layer::Flatten => out.extend_from_slice(x),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_layer<T: Scalar>(
        &self,
        i: usize,
        layer: &Layer,
        params: &[T],
        x: &[T],
        delta: &[T],
        argmax: &[usize],
        grad: Option<&mut Vec<T>>,
        need_dx: bool,
    ) -> Vec<T> {
        let in_shape = &self.shapes[i];
        let out_shape = &self.shapes[i + 1];
        let off = self.offsets[i];
        match *layer {
            Layer::Dense {
                inputs,
                outputs,
                bias,
            } => {
                let w = &params[off..off + inputs * outputs];
                if let Some(grad) = grad {
                    for o in 0..outputs {
                        let d = delta[o];
                        let grow = &mut grad[off + o * inputs..off + (o + 1) * inputs];
                        for (gv, xv) in grow.iter_mut().zip(x) {
                            *gv += d * *xv;
                        }
                        if bias {
                            grad[off + inputs * outputs + o] += d;
                        }
                    }
                }
                let mut dx = Vec::new();
                if need_dx {
                    dx = vec![T::zero(); inputs];
                    for o in 0..outputs {
                        let d = delta[o];
                        for (dv, wv) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *dv += *wv * d;
                        }
                    }
                }
                dx
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let wlen = out_channels * in_channels * kernel * kernel;
                let weights = &params[off..off + wlen];
                let mut dx = if need_dx {
                    vec![T::zero(); in_channels * h * w]
                } else {
                    Vec::new()
                };
                let mut grad = grad;
                for oc in 0..out_channels {
                    let dplane = &delta[oc * oh * ow..(oc + 1) * oh * ow];
                    if let Some(g) = grad.as_deref_mut() {
                        let mut acc = T::zero();
                        for &d in dplane {
                            acc += d;
                        }
                        g[off + wlen + oc] += acc;
                    }
                    for ic in 0..in_channels {
                        let src = &x[ic * h * w..(ic + 1) * h * w];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let widx = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                                let wv = weights[widx];
                                let (x0, x1) = valid_span(kx, padding, w, ow);
                                let mut gacc = T::zero();
                                for oy in 0..oh {
                                    let iy = oy + ky;
                                    if iy < padding || iy - padding >= h {
                                        continue;
                                    }
                                    let row = (iy - padding) * w;
                                    let drow = &dplane[oy * ow..(oy + 1) * ow];
                                    if grad.is_some() {
                                        let srow = &src[row..row + w];
                                        for ox in x0..x1 {
                                            gacc += drow[ox] * srow[ox + kx - padding];
                                        }
                                    }
                                    if need_dx {
                                        let dxrow = &mut dx[ic * h * w + row..ic * h * w + row + w];
                                        for ox in x0..x1 {
                                            dxrow[ox + kx - padding] += wv * drow[ox];
                                        }
                                    }
                                }
                                if let Some(g) = grad.as_deref_mut() {
                                    g[off + widx] += gacc;
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::LeakyRelu { slope } => x
                .iter()
                .zip(delta)
                .map(|(&xv, &d)| if xv.re() > 0.0 { d } else { d.scale(slope) })
                .collect(),
            Layer::Relu => x
                .iter()
                .zip(delta)
                .map(|(&xv, &d)| if xv.re() > 0.0 { d } else { T::zero() })
                .collect(),
            Layer::MaxPool { .. } => {
                let mut dx = vec![T::zero(); x.len()];
                for (&idx, &d) in argmax.iter().zip(delta) {
                    dx[idx] += d;
                }
                dx
            }
            Layer::Flatten => delta.to_vec(),
        }
    }
}

/// Output columns `ox` whose input column `ox + kx − padding` is in range.
#[inline]
fn valid_span(kx: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    let x0 = padding.saturating_sub(kx);
    let x1 = (w + padding).saturating_sub(kx).min(ow);
    (x0, x1.max(x0))
}

fn sample_loss<T: Scalar>(
    kind: LossKind,
    out: &[T],
    labels: &Labels,
    s: usize,
) -> Result<(T, Vec<T>)> {
    match kind {
        LossKind::CrossEntropy => {
            let y = match labels {
                Labels::Classes(c) => c[s],
                _ => return Err(Error::config("cross-entropy needs class labels")),
            };
            let mx = out.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
            let shift = T::from_f64(mx);
            let exps: Vec<T> = out.iter().map(|&z| (z - shift).exp()).collect();
            let mut sum = T::zero();
            for &e in &exps {
                sum += e;
            }
            let loss = sum.ln() + shift - out[y];
            let mut delta: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
            delta[y] -= T::from_f64(1.0);
            Ok((loss, delta))
        }
        LossKind::SquaredError => {
            let mut loss = T::zero();
            let mut delta = Vec::with_capacity(out.len());
            for (j, &z) in out.iter().enumerate() {
                let t = match labels {
                    Labels::Targets(t) => t.data()[s * out.len() + j],
                    Labels::Classes(c) => (c[s] == j) as u8 as f64,
                    Labels::None => return Err(Error::config("squared error needs targets")),
                };
                let r = z - T::from_f64(t);
                loss += (r * r).scale(0.5);
                delta.push(r);
            }
            Ok((loss, delta))
        }
        LossKind::Sum => {
            let mut loss = T::zero();
            for &z in out {
                loss += z;
            }
            Ok((loss, vec![T::from_f64(1.0); out.len()]))
        }
    }
}
