//! Centered kernel alignment between model layers.
//!
//! Layers are compared through their weight matrices: each output unit's
//! input-weight row is one observation, so two layers with the same number of
//! units yield `units × units` kernel matrices that HSIC can align.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, Tensor};

/// Polynomial kernel `K(x, y) = (xᵀy + c)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub c: f64,
    pub d: u32,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { c: 1.0, d: 2 }
    }
}

impl KernelConfig {
    pub const LINEAR: KernelConfig = KernelConfig { c: 0.0, d: 1 };

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("kernel degree must be at least 1"));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::config("kernel constant must be non-negative"));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        powi(dot + self.c, self.d)
    }
}

fn powi(x: f64, d: u32) -> f64 {
    (0..d).fold(1.0, |acc, _| acc * x)
}

/// Row-wise kernel matrix of `x`, `n × n`.
pub fn gram(x: &Tensor, kernel: &KernelConfig) -> Vec<f64> {
    let n = x.rows();
    let mut k = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let v = kernel.eval(x.row(a), x.row(b));
            k[a * n + b] = v;
            k[b * n + a] = v;
        }
    }
    k
}

/// `H K H` with `H = I − 11ᵀ/n`.
fn center(k: &mut [f64], n: usize) {
    let row: Vec<f64> = (0..n)
        .map(|a| k[a * n..(a + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for a in 0..n {
        for b in 0..n {
            k[a * n + b] += grand - row[a] - row[b];
        }
    }
}

fn hsic_centered(kc: &[f64], lc: &[f64], n: usize) -> f64 {
    let t: f64 = kc.iter().zip(lc).map(|(a, b)| a * b).sum();
    (t / ((n - 1) * (n - 1)) as f64).max(0.0)
}

fn check_rows(x: &Tensor, y: &Tensor) -> Result<usize> {
    if x.rows() != y.rows() {
        return Err(Error::Tensor(format!(
            "HSIC inputs have {} and {} rows",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::Tensor("HSIC needs at least two rows".into()));
    }
    Ok(x.rows())
}

/// Biased HSIC estimate `tr(HKH · HLH) / (n − 1)²`, clamped at zero.
pub fn hsic(x: &Tensor, y: &Tensor, kernel: &KernelConfig) -> Result<f64> {
    let n = check_rows(x, y)?;
    let mut k = gram(x, kernel);
    let mut l = gram(y, kernel);
    center(&mut k, n);
    center(&mut l, n);
    Ok(hsic_centered(&k, &l, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cka {
    pub value: f64,
    /// One of the inputs has zero self-HSIC (constant representation); the
    /// value is then defined as 0.
    pub degenerate: bool,
}

/// `HSIC(X, Y) / sqrt(HSIC(X, X) · HSIC(Y, Y))`, in `[0, 1]`.
pub fn cka(x: &Tensor, y: &Tensor, kernel: &KernelConfig) -> Result<Cka> {
    let n = check_rows(x, y)?;
    let mut k = gram(x, kernel);
    let mut l = gram(y, kernel);
    center(&mut k, n);
    center(&mut l, n);
    let xx = hsic_centered(&k, &k, n);
    let yy = hsic_centered(&l, &l, n);
    if !(xx > 0.0 && yy > 0.0) {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    let xy = hsic_centered(&k, &l, n);
    let v = xy / (libm::sqrt(xx) * libm::sqrt(yy));
    Ok(Cka {
        value: v.clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Pairwise model similarity, symmetric with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub n: usize,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
    /// Layers the CKA values were averaged over.
    pub layer_set: Vec<String>,
    /// Number of `(pair, layer)` CKA evaluations that were degenerate.
    pub degenerate: usize,
}

impl SimilarityMatrix {
    /// Wrap an explicit matrix, checking the invariants.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Tensor(format!("need {} entries, got {}", n * n, values.len())));
        }
        let m = Self {
            n,
            values,
            layer_set: Vec::new(),
            degenerate: 0,
        };
        m.check()?;
        Ok(m)
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n + k]
    }

    pub fn distance(&self, i: usize, k: usize) -> f64 {
        1.0 - self.get(i, k)
    }

    /// Symmetric within 1e-9, unit diagonal, entries in `[0, 1 + 1e-9]`.
    pub fn check(&self) -> Result<()> {
        for i in 0..self.n {
            if (self.get(i, i) - 1.0).abs() > 1e-9 {
                return Err(Error::Tensor(format!("diagonal entry {i} is not 1")));
            }
            for k in 0..self.n {
                let v = self.get(i, k);
                if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::Tensor(format!("entry ({i}, {k}) = {v} outside [0, 1]")));
                }
                if (v - self.get(k, i)).abs() > 1e-9 {
                    return Err(Error::Tensor(format!("entry ({i}, {k}) is not symmetric")));
                }
            }
        }
        Ok(())
    }

    /// Restriction to the given indices, in that order.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let m = idx.len();
        let mut values = Vec::with_capacity(m * m);
        for &i in idx {
            for &k in idx {
                values.push(self.get(i, k));
            }
        }
        Self {
            n: m,
            values,
            layer_set: self.layer_set.clone(),
            degenerate: self.degenerate,
        }
    }
}

/// Mean CKA over `layer_set` for every pair of models.
pub fn similarity_matrix<S: AsRef<str>>(
    models: &[Model],
    layer_set: &[S],
    kernel: &KernelConfig,
) -> Result<SimilarityMatrix> {
    kernel.validate()?;
    let first = models.first().ok_or(Error::Empty("model list"))?;
    if layer_set.is_empty() {
        return Err(Error::Empty("layer set"));
    }
    for m in &models[1..] {
        first.check_compatible(m)?;
    }
    let idx: Vec<usize> = layer_set
        .iter()
        .map(|n| {
            first
                .index_of(n.as_ref())
                .ok_or_else(|| Error::UnknownLayer(n.as_ref().into()))
        })
        .collect::<Result<_>>()?;

    let n = models.len();
    // Centred kernels and self-HSIC per (model, layer).
    let mut centred: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(n);
    for m in models {
        let mut per_layer = Vec::with_capacity(idx.len());
        for &j in &idx {
            let w = &m.layers()[j].weights;
            let units = w.rows();
            if units < 2 {
                return Err(Error::Tensor(format!(
                    "layer `{}` has a single unit; CKA needs at least two",
                    m.layers()[j].name
                )));
            }
            let mut k = gram(w, kernel);
            center(&mut k, units);
            let own = hsic_centered(&k, &k, units);
            per_layer.push((k, own));
        }
        centred.push(per_layer);
    }

    let mut values = vec![0.0; n * n];
    let mut degenerate = 0;
    for i in 0..n {
        values[i * n + i] = 1.0;
        for k in i + 1..n {
            let mut total = 0.0;
            for (jj, &j) in idx.iter().enumerate() {
                let units = first.layers()[j].out_dim();
                let (ki, si) = &centred[i][jj];
                let (kk, sk) = &centred[k][jj];
                if !(*si > 0.0 && *sk > 0.0) {
                    degenerate += 1;
                    continue;
                }
                let v = hsic_centered(ki, kk, units) / (libm::sqrt(*si) * libm::sqrt(*sk));
                total += v.clamp(0.0, 1.0);
            }
            let s = total / idx.len() as f64;
            values[i * n + k] = s;
            values[k * n + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        n,
        values,
        layer_set: idx.iter().map(|&j| first.layers()[j].name.clone()).collect(),
        degenerate,
    })
}
