use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
    Identity,
}

/// Which branch of the multi-modal network a layer belongs to.
///
/// Input features are laid out as `gps | lidar | image`; each present branch
/// consumes its block and the fusion head consumes the concatenated branch
/// outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodel {
    Gps,
    Lidar,
    Image,
    Fusion,
}

impl Submodel {
    pub const BRANCHES: [Submodel; 3] = [Submodel::Gps, Submodel::Lidar, Submodel::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Submodel::Gps => "gps",
            Submodel::Lidar => "lidar",
            Submodel::Image => "image",
            Submodel::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub name: String,
    /// `out_dim × in_dim`, row `o` holds the input weights of unit `o`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(name: impl Into<String>, weights: Tensor, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        let name = name.into();
        if weights.shape().len() != 2 {
            return Err(Error::Model(format!("layer `{name}` weights must be a matrix")));
        }
        if bias.len() != weights.rows() {
            return Err(Error::Shape {
                layer: name,
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Model(format!("layer `{name}` has a non-finite bias")));
        }
        Ok(Self {
            name,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(name: impl Into<String>, in_dim: usize, out_dim: usize, act: Activation) -> Result<Self> {
        Self::new(name, Tensor::zeros(vec![out_dim, in_dim])?, vec![0.0; out_dim], act)
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier(
        name: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        let limit = libm::sqrt(6.0 / (in_dim + out_dim) as f64);
        let w = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self::new(name, Tensor::matrix(out_dim, in_dim, w)?, vec![0.0; out_dim], act)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Pre-activation output for a row-major `batch × in_dim` buffer.
    pub(crate) fn affine(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.in_dim(), self.out_dim());
        let w = self.weights.values();
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            let x = &input[b * n_in..(b + 1) * n_in];
            let y = &mut out[b * n_out..(b + 1) * n_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *yo = self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }

    fn same_shape(&self, other: &DenseLayer) -> bool {
        self.name == other.name && self.weights.shape() == other.weights.shape() && self.activation == other.activation
    }
}

/// Layer index ranges and input columns of one branch.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Branch {
    pub kind: Submodel,
    pub layers: Range<usize>,
    pub columns: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Topology {
    pub branches: Vec<Branch>,
    pub fusion: Range<usize>,
    pub input_dim: usize,
}

/// A multi-branch dense classifier over `n_sectors` beam sectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct Model {
    layers: Vec<DenseLayer>,
    submodels: Vec<Submodel>,
    n_sectors: usize,
    topology: Topology,
}

#[derive(Serialize, Deserialize)]
struct RawLayer {
    #[serde(flatten)]
    layer: DenseLayer,
    submodel: Submodel,
}

#[derive(Serialize, Deserialize)]
struct RawModel {
    n_sectors: usize,
    layers: Vec<RawLayer>,
}

impl TryFrom<RawModel> for Model {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        Model::new(
            raw.layers.into_iter().map(|l| (l.layer, l.submodel)).collect(),
            raw.n_sectors,
        )
    }
}

impl From<Model> for RawModel {
    fn from(m: Model) -> Self {
        RawModel {
            n_sectors: m.n_sectors,
            layers: m
                .layers
                .into_iter()
                .zip(m.submodels)
                .map(|(layer, submodel)| RawLayer { layer, submodel })
                .collect(),
        }
    }
}

impl Model {
    /// Assemble a model from `(layer, submodel)` pairs.
    ///
    /// Layers must be grouped as gps, lidar, image, fusion (any branch may be
    /// absent, the fusion head may not). The last layer produces the sector
    /// logits and must use `Softmax` or `Identity`; hidden layers use `Relu`
    /// or `Identity`.
    pub fn new(layers: Vec<(DenseLayer, Submodel)>, n_sectors: usize) -> Result<Self> {
        if n_sectors == 0 {
            return Err(Error::Model("n_sectors must be positive".into()));
        }
        let (layers, submodels): (Vec<_>, Vec<_>) = layers.into_iter().unzip();
        let topology = Self::plan(&layers, &submodels, n_sectors)?;
        Ok(Self {
            layers,
            submodels,
            n_sectors,
            topology,
        })
    }

    fn plan(layers: &[DenseLayer], submodels: &[Submodel], n_sectors: usize) -> Result<Topology> {
        if layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        let mut names = BTreeSet::new();
        for l in layers {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Model(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let order = |s: Submodel| s as usize;
        if submodels.windows(2).any(|w| order(w[0]) > order(w[1])) {
            return Err(Error::Model(
                "layers must be grouped as gps, lidar, image, fusion".into(),
            ));
        }

        let mut branches = Vec::new();
        let mut col = 0;
        let mut start = 0;
        for kind in Submodel::BRANCHES {
            let end = start + submodels[start..].iter().take_while(|&&s| s == kind).count();
            if end > start {
                let first_in = layers[start].in_dim();
                chain(&layers[start..end])?;
                branches.push(Branch {
                    kind,
                    layers: start..end,
                    columns: col..col + first_in,
                });
                col += first_in;
            }
            start = end;
        }
        let fusion = start..layers.len();
        if fusion.is_empty() {
            return Err(Error::Model("model has no fusion head".into()));
        }
        chain(&layers[fusion.clone()])?;

        let fusion_in = if branches.is_empty() {
            col = layers[fusion.start].in_dim();
            col
        } else {
            branches.iter().map(|b| layers[b.layers.end - 1].out_dim()).sum()
        };
        let head = &layers[fusion.start];
        if head.in_dim() != fusion_in {
            return Err(Error::Shape {
                layer: head.name.clone(),
                expected: fusion_in,
                found: head.in_dim(),
            });
        }
        let last = layers.last().unwrap();
        if last.out_dim() != n_sectors {
            return Err(Error::Shape {
                layer: last.name.clone(),
                expected: n_sectors,
                found: last.out_dim(),
            });
        }
        if last.activation == Activation::Relu {
            return Err(Error::Model(format!(
                "output layer `{}` must use softmax or identity",
                last.name
            )));
        }
        if let Some(l) = layers[..layers.len() - 1]
            .iter()
            .find(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::Model(format!("hidden layer `{}` cannot use softmax", l.name)));
        }
        Ok(Topology {
            branches,
            fusion,
            input_dim: col,
        })
    }

    /// Fresh model with Glorot-uniform weights drawn from `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::from_seed(seed);
        let mut layers = Vec::new();
        let mut fusion_in = 0;
        for (kind, width, hidden) in [
            (Submodel::Gps, GPS_WIDTH, &arch.gps_hidden),
            (Submodel::Lidar, arch.lidar_width, &arch.lidar_hidden),
            (Submodel::Image, arch.image_width, &arch.image_hidden),
        ] {
            if width == 0 {
                continue;
            }
            let mut prev = width;
            for (i, &h) in hidden.iter().enumerate() {
                let name = format!("{}_dense_{}", kind.as_str(), i + 1);
                layers.push((DenseLayer::xavier(name, prev, h, Activation::Relu, &mut r)?, kind));
                prev = h;
            }
            fusion_in += prev;
        }
        let mut prev = fusion_in;
        for (i, &h) in arch.fusion_hidden.iter().enumerate() {
            let name = format!("fusion_dense_{}", i + 1);
            layers.push((
                DenseLayer::xavier(name, prev, h, Activation::Relu, &mut r)?,
                Submodel::Fusion,
            ));
            prev = h;
        }
        layers.push((
            DenseLayer::xavier("fusion_out", prev, arch.n_sectors, Activation::Softmax, &mut r)?,
            Submodel::Fusion,
        ));
        Self::new(layers, arch.n_sectors)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn input_dim(&self) -> usize {
        self.topology.input_dim
    }

    pub(crate) fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn submodel(&self, layer: usize) -> Submodel {
        self.submodels[layer]
    }

    pub fn submodel_of(&self, name: &str) -> Option<Submodel> {
        self.index_of(name).map(|i| self.submodels[i])
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Result<&DenseLayer> {
        self.index_of(name)
            .map(|i| &self.layers[i])
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn output_layer(&self) -> &DenseLayer {
        self.layers.last().expect("validated non-empty")
    }

    /// Mutable access to one layer's parameters. Shapes cannot change.
    pub fn params_mut(&mut self, index: usize) -> (&mut [f64], &mut [f64]) {
        let l = &mut self.layers[index];
        (l.weights.values_mut(), &mut l.bias)
    }

    /// Replace the parameters of a same-named, same-shaped layer.
    pub fn set_layer(&mut self, layer: DenseLayer) -> Result<()> {
        let i = self
            .index_of(&layer.name)
            .ok_or_else(|| Error::UnknownLayer(layer.name.clone()))?;
        if !self.layers[i].same_shape(&layer) {
            return Err(Error::ArchitectureMismatch(layer.name));
        }
        self.layers[i] = layer;
        Ok(())
    }

    /// Weights plus biases over `subset`, or over every layer when `None`.
    pub fn param_count<S: AsRef<str>>(&self, subset: Option<&[S]>) -> Result<usize> {
        match subset {
            None => Ok(self.layers.iter().map(DenseLayer::param_count).sum()),
            Some(names) => names
                .iter()
                .map(|n| self.layer(n.as_ref()).map(DenseLayer::param_count))
                .sum(),
        }
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// First layer (in order) whose name, shape or activation differs.
    pub fn first_mismatch(&self, other: &Model) -> Option<String> {
        if self.n_sectors != other.n_sectors || self.submodels != other.submodels {
            return Some(self.layers.first().map(|l| l.name.clone()).unwrap_or_default());
        }
        if self.layers.len() != other.layers.len() {
            let i = self.layers.len().min(other.layers.len());
            let longer = if self.layers.len() > other.layers.len() {
                self
            } else {
                other
            };
            return Some(longer.layers[i].name.clone());
        }
        self.layers
            .iter()
            .zip(&other.layers)
            .find(|(a, b)| !a.same_shape(b))
            .map(|(a, _)| a.name.clone())
    }

    pub fn check_compatible(&self, other: &Model) -> Result<()> {
        match self.first_mismatch(other) {
            Some(name) => Err(Error::ArchitectureMismatch(name)),
            None => Ok(()),
        }
    }
}

fn chain(layers: &[DenseLayer]) -> Result<()> {
    for w in layers.windows(2) {
        if w[1].in_dim() != w[0].out_dim() {
            return Err(Error::Shape {
                layer: w[1].name.clone(),
                expected: w[0].out_dim(),
                found: w[1].in_dim(),
            });
        }
    }
    Ok(())
}

/// GPS block width: latitude and longitude.
pub const GPS_WIDTH: usize = 2;

/// Layer widths of the reference multi-modal network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub gps_hidden: Vec<usize>,
    pub lidar_width: usize,
    pub lidar_hidden: Vec<usize>,
    pub image_width: usize,
    pub image_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    pub n_sectors: usize,
}

impl Default for Architecture {
    /// | layer | shape (out × in) | params |
    /// |---|---|---|
    /// | gps_dense_1 | 16 × 2 | 48 |
    /// | lidar_dense_1 | 32 × 16 | 544 |
    /// | lidar_dense_2 | 16 × 32 | 528 |
    /// | image_dense_1 | 32 × 16 | 544 |
    /// | image_dense_2 | 16 × 32 | 528 |
    /// | fusion_dense_1 | 64 × 48 | 3136 |
    /// | fusion_out | 34 × 64 | 2210 |
    ///
    /// 7538 parameters in total.
    fn default() -> Self {
        Self {
            gps_hidden: vec![16],
            lidar_width: 16,
            lidar_hidden: vec![32, 16],
            image_width: 16,
            image_hidden: vec![32, 16],
            fusion_hidden: vec![64],
            n_sectors: 34,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.n_sectors == 0 {
            return Err(Error::config("n_sectors must be positive"));
        }
        if self.gps_hidden.is_empty() {
            return Err(Error::config("gps branch needs at least one hidden layer"));
        }
        for (name, width, hidden) in [
            ("lidar", self.lidar_width, &self.lidar_hidden),
            ("image", self.image_width, &self.image_hidden),
        ] {
            if width > 0 && hidden.is_empty() {
                return Err(Error::config(format!("{name} branch needs at least one hidden layer")));
            }
        }
        let all = self
            .gps_hidden
            .iter()
            .chain(&self.lidar_hidden)
            .chain(&self.image_hidden)
            .chain(&self.fusion_hidden);
        if all.clone().any(|&h| h == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        GPS_WIDTH + self.lidar_width + self.image_width
    }
}
