use alloc::vec;
use alloc::vec::Vec;

use super::model::{Activation, Model};
use super::Tensor;
use crate::error::{Error, Result};

/// Per-layer activations kept for back-propagation.
pub(crate) struct Cache {
    batch: usize,
    /// Input buffer fed to each layer, `batch × in_dim`.
    inputs: Vec<Vec<f64>>,
    /// Post-activation output of each hidden layer and the sector
    /// probabilities for the last layer.
    outputs: Vec<Vec<f64>>,
}

pub(crate) fn softmax_rows(z: &mut [f64], width: usize) {
    for row in z.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn activate(act: Activation, z: &mut [f64]) {
    if act == Activation::Relu {
        for v in z.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

fn gather_columns(x: &Tensor, cols: core::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows() * cols.len());
    for r in 0..x.rows() {
        out.extend_from_slice(&x.row(r)[cols.clone()]);
    }
    out
}

impl Model {
    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            let first = &self.layers()[0].name;
            return Err(Error::Shape {
                layer: first.clone(),
                expected: self.input_dim(),
                found: batch.cols(),
            });
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, batch: &Tensor) -> Result<Cache> {
        self.check_input(batch)?;
        let n = batch.rows();
        let layers = self.layers();
        let topo = self.topology();
        let mut inputs = vec![Vec::new(); layers.len()];
        let mut outputs = vec![Vec::new(); layers.len()];

        let mut run = |range: core::ops::Range<usize>, mut x: Vec<f64>| -> Vec<f64> {
            for i in range {
                let mut z = layers[i].affine(&x, n);
                if i + 1 == layers.len() {
                    softmax_rows(&mut z, layers[i].out_dim());
                } else {
                    activate(layers[i].activation, &mut z);
                }
                inputs[i] = x;
                x = z.clone();
                outputs[i] = z;
            }
            x
        };

        let fusion_in = if topo.branches.is_empty() {
            batch.values().to_vec()
        } else {
            let outs: Vec<(usize, Vec<f64>)> = topo
                .branches
                .iter()
                .map(|b| {
                    let width = layers[b.layers.end - 1].out_dim();
                    (width, run(b.layers.clone(), gather_columns(batch, b.columns.clone())))
                })
                .collect();
            let total: usize = outs.iter().map(|(w, _)| w).sum();
            let mut cat = Vec::with_capacity(n * total);
            for r in 0..n {
                for (w, o) in &outs {
                    cat.extend_from_slice(&o[r * w..(r + 1) * w]);
                }
            }
            cat
        };
        run(topo.fusion.clone(), fusion_in);
        Ok(Cache {
            batch: n,
            inputs,
            outputs,
        })
    }

    /// Sector probabilities, `batch × n_sectors`; every row is a softmax
    /// distribution over the final layer's pre-activations.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut cache = self.forward_cached(batch)?;
        let probs = cache.outputs.pop().expect("non-empty model");
        Tensor::matrix(batch.rows(), self.n_sectors(), probs)
    }

    /// Mean categorical cross-entropy and its gradient with respect to every
    /// weight and bias.
    pub fn loss_and_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        if labels.len() != batch.rows() {
            return Err(Error::Shape {
                layer: self.output_layer().name.clone(),
                expected: batch.rows(),
                found: labels.len(),
            });
        }
        let k = self.n_sectors();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape {
                layer: self.output_layer().name.clone(),
                expected: k,
                found: bad,
            });
        }
        let cache = self.forward_cached(batch)?;
        let n = cache.batch;
        let probs = cache.outputs.last().unwrap();
        let mut loss = 0.0;
        let mut delta = probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            // An underflowed probability gives an infinite loss.
            loss -= libm::log(probs[r * k + y]);
            delta[r * k + y] -= 1.0;
        }
        let inv = 1.0 / n as f64;
        loss *= inv;
        for d in delta.iter_mut() {
            *d *= inv;
        }
        Ok((loss, self.backward(&cache, delta)))
    }

    fn backward(&self, cache: &Cache, dlogits: Vec<f64>) -> Gradients {
        let layers = self.layers();
        let topo = self.topology();
        let n = cache.batch;
        let mut grads: Vec<LayerGrad> = layers
            .iter()
            .map(|l| LayerGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.out_dim()],
            })
            .collect();

        // Back-propagates through `range` given d(loss)/d(pre-activation of
        // the last layer in range); returns d(loss)/d(input of the first).
        let mut back = |range: core::ops::Range<usize>, mut dpre: Vec<f64>, need_input: bool| -> Vec<f64> {
            let mut dx = Vec::new();
            for i in range.clone().rev() {
                let l = &layers[i];
                let (n_in, n_out) = (l.in_dim(), l.out_dim());
                let x = &cache.inputs[i];
                let g = &mut grads[i];
                for b in 0..n {
                    let d = &dpre[b * n_out..(b + 1) * n_out];
                    let xb = &x[b * n_in..(b + 1) * n_in];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        g.bias[o] += dv;
                        let gw = &mut g.weights[o * n_in..(o + 1) * n_in];
                        for (gwi, &xi) in gw.iter_mut().zip(xb) {
                            *gwi += dv * xi;
                        }
                    }
                }
                if i == range.start && !need_input {
                    break;
                }
                let w = l.weights.values();
                let mut din = vec![0.0; n * n_in];
                for b in 0..n {
                    let d = &dpre[b * n_out..(b + 1) * n_out];
                    let out = &mut din[b * n_in..(b + 1) * n_in];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        for (oi, &wi) in out.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *oi += dv * wi;
                        }
                    }
                }
                if i == range.start {
                    dx = din;
                    break;
                }
                // Derivative of the previous layer's activation.
                let prev = &layers[i - 1];
                if prev.activation == Activation::Relu {
                    for (dv, &y) in din.iter_mut().zip(&cache.outputs[i - 1]) {
                        if y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                dpre = din;
            }
            dx
        };

        let has_branches = !topo.branches.is_empty();
        let dfusion = back(topo.fusion.clone(), dlogits, has_branches);
        if has_branches {
            let widths: Vec<usize> = topo
                .branches
                .iter()
                .map(|b| layers[b.layers.end - 1].out_dim())
                .collect();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (b, &w) in topo.branches.iter().zip(&widths) {
                let last = b.layers.end - 1;
                let mut d = Vec::with_capacity(n * w);
                for r in 0..n {
                    d.extend_from_slice(&dfusion[r * total + offset..r * total + offset + w]);
                }
                if layers[last].activation == Activation::Relu {
                    for (dv, &y) in d.iter_mut().zip(&cache.outputs[last]) {
                        if y <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                }
                back(b.layers.clone(), d, false);
                offset += w;
            }
        }
        Gradients { layers: grads }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Loss gradient, one entry per model layer in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}
