//! Alternative cost heads for the cost-metric ablation. Every head maps a pair of
//! `B x 32 x h x w` feature maps to a `B x 49 x h x w` cost volume.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diclcost::{all_shifts, cost_volume, Displacement, MatchingNet, NUM_HYPOTHESES};
use crate::diffcore::kernels;
use crate::diffcore::layers::Conv;
use crate::diffcore::{ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::error::{shape_err, DiclError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostHeadKind {
    Dot,
    Cosine,
    Mlp3,
    ReducedDicl,
    Dicl,
}

impl CostHeadKind {
    pub const ALL: [CostHeadKind; 5] = [Self::Dot, Self::Cosine, Self::Mlp3, Self::ReducedDicl, Self::Dicl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dot => "dot",
            Self::Cosine => "cosine",
            Self::Mlp3 => "mlp3",
            Self::ReducedDicl => "reduced-dicl",
            Self::Dicl => "dicl",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Self::Mlp3 | Self::ReducedDicl | Self::Dicl)
    }
}

impl fmt::Display for CostHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CostHeadKind {
    type Err = DiclError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "dot" => Ok(Self::Dot),
            "cosine" => Ok(Self::Cosine),
            "mlp3" => Ok(Self::Mlp3),
            "reduced-dicl" => Ok(Self::ReducedDicl),
            "dicl" => Ok(Self::Dicl),
            other => Err(DiclError::Config(format!(
                "unknown cost head '{other}' (expected dot, cosine, mlp3, reduced-dicl or dicl)"
            ))),
        }
    }
}

/// Hidden width of the per-pixel MLP.
pub const MLP_WIDTH: usize = 64;

/// Per-pixel MLP `64 -> 64 -> 64 -> 1` written as three 1x1 convolutions.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Conv; 3],
}

impl Mlp3 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        let inp = 2 * crate::diclcost::FEATURE_DIM;
        let specs = [
            ConvSpec::new(inp, MLP_WIDTH, 1, 1),
            ConvSpec::new(MLP_WIDTH, MLP_WIDTH, 1, 1),
            ConvSpec::new(MLP_WIDTH, 1, 1, 1),
        ];
        let layers = [0, 1, 2].map(|i| Conv::new(store, &format!("{name}.l{}", i + 1), specs[i], rng));
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut y = self.layers[0].forward(g, x)?;
        y = g.relu(y);
        y = self.layers[1].forward(g, y)?;
        y = g.relu(y);
        self.layers[2].forward(g, y)
    }
}

/// The matching-net layer list with every kernel shrunk to 1x1; the stride-2
/// pair becomes a 1x1 stride-2 convolution and a 2x2 stride-2 transposed one.
pub fn reduced_dicl_specs() -> [ConvSpec; 6] {
    [
        ConvSpec::new(64, 96, 1, 1),
        ConvSpec::new(96, 128, 1, 2),
        ConvSpec::new(128, 128, 1, 1),
        ConvSpec::new(128, 64, 1, 1),
        ConvSpec::transposed(64, 32, 2, 2),
        ConvSpec::new(32, 1, 1, 1),
    ]
}

#[derive(Clone, Debug)]
pub enum CostHead {
    Dot,
    Cosine,
    Mlp3(Mlp3),
    /// DICL or its 1x1 reduction.
    Net(MatchingNet),
}

impl CostHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        kind: CostHeadKind,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Self {
        match kind {
            CostHeadKind::Dot => Self::Dot,
            CostHeadKind::Cosine => Self::Cosine,
            CostHeadKind::Mlp3 => Self::Mlp3(Mlp3::new(store, name, rng)),
            CostHeadKind::ReducedDicl => Self::Net(MatchingNet::with_specs(store, name, &reduced_dicl_specs(), rng)),
            CostHeadKind::Dicl => Self::Net(MatchingNet::new(store, name, rng)),
        }
    }

    /// Costs (lower is better) for all hypotheses: `B x 49 x h x w`.
    pub fn cost_volume<T: Scalar>(&self, g: &mut Graph<T>, f1: Var, f2: Var, store: &ParamStore<T>) -> Result<Var> {
        let shifts = all_shifts();
        match self {
            Self::Dot => {
                let s = g.dot_corr(f1, f2, &shifts)?;
                Ok(g.scale(s, -T::one()))
            }
            Self::Cosine => {
                let s = g.cos_corr(f1, f2, &shifts)?;
                Ok(g.scale(s, -T::one()))
            }
            Self::Mlp3(mlp) => {
                let (b, _, h, w) = g.value(f1).dims4()?;
                let fu = g.concat_displaced(f1, f2, &shifts)?;
                let c = mlp.forward(g, fu)?;
                g.reshape(c, &[b, NUM_HYPOTHESES, h, w])
            }
            Self::Net(net) => {
                // The stride-2 pair inside the net needs even extents.
                let (_, _, h, w) = g.value(f1).dims4()?;
                let (ph, pw) = (h % 2, w % 2);
                let a = g.pad_br(f1, ph, pw)?;
                let t = g.pad_br(f2, ph, pw)?;
                let c = cost_volume(g, a, t, net, store)?;
                g.crop(c, h, w)
            }
        }
    }
}

fn pair<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    f1.same_shape(f2)?;
    f1.dims3()?;
    Ok((f1.clone().unsqueeze0(), f2.clone().unsqueeze0()))
}

/// Cosine similarity `<F1(p), F2(p+d)> / (|F1(p)| |F2(p+d)| + eps)`, `1 x h x w`.
pub fn cosine_cost<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, d: Displacement) -> Result<Tensor<T>> {
    let (a, b) = pair(f1, f2)?;
    kernels::cos_corr_forward(&a, &b, &[d.shift()])?.squeeze0()
}

/// Inner product `<F1(p), F2(p+d)>`, `1 x h x w`.
pub fn dot_cost<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, d: Displacement) -> Result<Tensor<T>> {
    let (a, b) = pair(f1, f2)?;
    kernels::dot_corr_forward(&a, &b, &[d.shift()])?.squeeze0()
}

fn single_input<T: Scalar>(fu: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (c, _, _) = fu.dims3()?;
    if c != channels {
        return Err(shape_err!("cost head expects {channels} input channels, got {c}"));
    }
    Ok(fu.clone().unsqueeze0())
}

/// MLP cost of one concatenated `64 x h x w` hypothesis input.
pub fn mlp3_cost<T: Scalar>(fu: &Tensor<T>, mlp: &Mlp3, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let x = single_input(fu, mlp.layers[0].spec.in_channels)?;
    let mut g = Graph::bind(store, false, false);
    let xv = g.constant(x);
    let y = mlp.forward(&mut g, xv)?;
    g.take_value(y).squeeze0()
}

/// Reduced-DICL cost of one concatenated hypothesis input (running batch-norm statistics).
pub fn reduced_dicl_cost<T: Scalar>(fu: &Tensor<T>, net: &MatchingNet, store: &ParamStore<T>) -> Result<Tensor<T>> {
    let x = single_input(fu, net.in_channels())?;
    net.forward_eval(store, &x, None)?.squeeze0()
}
