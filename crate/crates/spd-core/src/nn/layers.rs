//! Named layer builders: convolution, batch norm, and the residual block.
//!
//! A layer registers its parameters under a hierarchical dotted name at
//! construction and replays them onto a [`Graph`] at forward time, so the
//! checkpoint format is just the flat name -> tensor map.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::graph::{Graph, Node};
use crate::nn::init;
use crate::nn::params::ParamStore;

/// Weight initialization for a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// He/Kaiming normal, for layers feeding rectifiers.
    He,
    /// All-zero weights and bias; prediction heads start neutral.
    Zero,
}

/// Square-kernel 2-D convolution.
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        init: WeightInit,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let w = match init {
            WeightInit::He => init::he_conv(rng, out_c, in_c, k, k),
            WeightInit::Zero => init::zero_conv(out_c, in_c, k, k),
        };
        store.add_param(&weight, w.into_dyn())?;
        let bias = if bias {
            let bname = format!("{name}.bias");
            store.add_param(&bname, init::zero_bias(out_c).into_dyn())?;
            Some(bname)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
            dilation,
        })
    }

    /// Padding that preserves spatial size at stride 1 for odd kernels.
    pub fn same_pad(k: usize, dilation: usize) -> usize {
        dilation * (k - 1) / 2
    }

    pub fn apply(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let w = g.param_named(&self.weight)?;
        let b = match &self.bias {
            Some(name) => Some(g.param_named(name)?),
            None => None,
        };
        g.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        let running_mean = format!("{name}.running_mean");
        let running_var = format!("{name}.running_var");
        store.add_param(&gamma, Array1::from_elem(c, 1.0).into_dyn())?;
        store.add_param(&beta, Array1::zeros(c).into_dyn())?;
        store.add_buffer(&running_mean, Array1::zeros(c).into_dyn())?;
        store.add_buffer(&running_var, Array1::from_elem(c, 1.0).into_dyn())?;
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let gamma = g.param_named(&self.gamma)?;
        let beta = g.param_named(&self.beta)?;
        let rm = g.store_ref().id(&self.running_mean)?;
        let rv = g.store_ref().id(&self.running_var)?;
        g.batch_norm(x, gamma, beta, rm, rv)
    }
}

/// Convolution -> batch norm -> ReLU.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv"),
            in_c,
            out_c,
            k,
            stride,
            Conv2d::same_pad(k, dilation),
            dilation,
            false,
            WeightInit::He,
        )?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_c)?;
        Ok(ConvBnRelu { conv, bn })
    }

    pub fn apply(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let c = self.conv.apply(g, x)?;
        let n = self.bn.apply(g, c)?;
        Ok(g.relu(n))
    }
}

/// Two 3x3 convolutions with an identity or projected shortcut.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            in_c,
            out_c,
            3,
            stride,
            1,
            1,
            false,
            WeightInit::He,
        )?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_c)?;
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            out_c,
            out_c,
            3,
            1,
            1,
            1,
            false,
            WeightInit::He,
        )?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_c)?;
        let shortcut = if stride != 1 || in_c != out_c {
            let pc = Conv2d::new(
                store,
                rng,
                &format!("{name}.proj"),
                in_c,
                out_c,
                1,
                stride,
                0,
                1,
                false,
                WeightInit::He,
            )?;
            let pb = BatchNorm2d::new(store, &format!("{name}.proj_bn"), out_c)?;
            Some((pc, pb))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let h = self.conv1.apply(g, x)?;
        let h = self.bn1.apply(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.apply(g, h)?;
        let h = self.bn2.apply(g, h)?;
        let s = match &self.shortcut {
            Some((pc, pb)) => {
                let p = pc.apply(g, x)?;
                pb.apply(g, p)?
            }
            None => x,
        };
        let sum = g.add(h, s)?;
        Ok(g.relu(sum))
    }
}
