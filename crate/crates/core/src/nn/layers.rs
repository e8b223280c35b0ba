use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use super::NnError;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He/Kaiming normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    Zeros,
    Constant(f64),
}

impl Init {
    fn tensor<T: Scalar>(self, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let len = shape.iter().product();
                let data = (0..len).map(|_| T::from_f64c(normal.sample(rng))).collect();
                Tensor::new(shape, data).expect("consistent shape")
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::filled(shape, T::from_f64c(v)),
        }
    }
}

/// Square-kernel convolution without bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let w = Init::KaimingNormal { fan_in: k * k * cin }.tensor(vec![k, k, cin, cout], rng);
        let weight = ps.add(format!("{name}.weight"), w, true)?;
        Ok(Self { weight, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: NodeId) -> Result<NodeId, NnError> {
        let w = g.param(ps, self.weight);
        g.conv2d(x, w, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self, NnError> {
        Ok(Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(vec![channels], T::one()), true)?,
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), true)?,
            running_mean: ps.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false)?,
            running_var: ps.add(format!("{name}.running_var"), Tensor::filled(vec![channels], T::one()), false)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId, NnError> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        match mode {
            Mode::Eval => {
                let rm = ps.get(self.running_mean).value.data();
                let rv = ps.get(self.running_var).value.data();
                Ok(g.batch_norm(x, gamma, beta, Some((rm, rv)), BN_EPS)?.0)
            }
            Mode::Train => {
                let (y, observed) = g.batch_norm(x, gamma, beta, None, BN_EPS)?;
                if let Some((mean, var)) = observed {
                    g.record_running_update(self.running_mean, mean);
                    g.record_running_update(self.running_var, var);
                }
                Ok(y)
            }
        }
    }
}

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        let w = init.tensor(vec![in_dim, out_dim], rng);
        Ok(Self {
            weight: ps.add(format!("{name}.weight"), w, true)?,
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim]), true)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: NodeId) -> Result<NodeId, NnError> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.linear(x, w, b)
    }
}

/// Bottleneck residual unit with normalization moved after the skip sum:
///
/// `out = relu(bn(skip(x) + conv1x1(relu(bn(conv3x3(relu(bn(conv1x1(x)))))))))`
///
/// The inner width is a quarter of the output width. The stride sits on the 3×3
/// convolution; the skip path is the identity when shapes agree and a strided 1×1
/// projection otherwise.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub reduce: Conv2d,
    pub reduce_bn: BatchNorm2d,
    pub spatial: Conv2d,
    pub spatial_bn: BatchNorm2d,
    pub expand: Conv2d,
    pub projection: Option<Conv2d>,
    pub out_bn: BatchNorm2d,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if out_channels == 0 || out_channels % 4 != 0 {
            return Err(NnError::Config(format!(
                "bottleneck block `{name}` needs output channels divisible by 4, got {out_channels}"
            )));
        }
        if stride == 0 {
            return Err(NnError::Config("stride must be >= 1".into()));
        }
        let mid = out_channels / 4;
        let projection = if stride != 1 || in_channels != out_channels {
            Some(Conv2d::new(ps, &format!("{name}.proj"), in_channels, out_channels, 1, stride, 0, rng)?)
        } else {
            None
        };
        Ok(Self {
            reduce: Conv2d::new(ps, &format!("{name}.conv1"), in_channels, mid, 1, 1, 0, rng)?,
            reduce_bn: BatchNorm2d::new(ps, &format!("{name}.bn1"), mid)?,
            spatial: Conv2d::new(ps, &format!("{name}.conv2"), mid, mid, 3, stride, 1, rng)?,
            spatial_bn: BatchNorm2d::new(ps, &format!("{name}.bn2"), mid)?,
            expand: Conv2d::new(ps, &format!("{name}.conv3"), mid, out_channels, 1, 1, 0, rng)?,
            projection,
            out_bn: BatchNorm2d::new(ps, &format!("{name}.bn_out"), out_channels)?,
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn bottleneck_width(&self) -> usize {
        self.out_channels / 4
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId, NnError> {
        let (_, _, _, c) = g.value(x).dims4()?;
        if c != self.in_channels {
            return Err(NnError::Shape(format!(
                "residual block expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let h = self.reduce.forward(g, ps, x)?;
        let h = self.reduce_bn.forward(g, ps, h, mode)?;
        let h = g.relu(h);
        let h = self.spatial.forward(g, ps, h)?;
        let h = self.spatial_bn.forward(g, ps, h, mode)?;
        let h = g.relu(h);
        let h = self.expand.forward(g, ps, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(g, ps, x)?,
            None => x,
        };
        let sum = g.add(skip, h)?;
        let out = self.out_bn.forward(g, ps, sum, mode)?;
        Ok(g.relu(out))
    }
}
