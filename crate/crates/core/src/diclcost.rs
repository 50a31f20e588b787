//! Displacement-invariant cost volume.
//!
//! Every displacement hypothesis `(u, v)` in `[-3, 3]^2` gets its own 64-channel
//! input (reference features stacked on the displaced target features) and the
//! same 2D matching network scores all of them. Hypotheses are folded into the
//! batch axis, so batch norm sees all 49 of them jointly.

use rand::Rng;

use crate::diffcore::conv::{self, ConvSpec};
use crate::diffcore::kernels::{self, Shift};
use crate::diffcore::layers::{Conv, ConvBnRelu};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::error::{shape_err, DiclError, Result};
use crate::scalar::Scalar;

pub const MAX_DISPLACEMENT: i32 = 3;
/// Window side `U = V = 2 * 3 + 1`.
pub const WINDOW: usize = 7;
/// `N = U * V`.
pub const NUM_HYPOTHESES: usize = WINDOW * WINDOW;
/// Feature channels per pyramid level.
pub const FEATURE_DIM: usize = 32;

/// Integer displacement hypothesis: `u` horizontal, `v` vertical.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Displacement {
    pub u: i32,
    pub v: i32,
}

impl Displacement {
    pub fn new(u: i32, v: i32) -> Result<Self> {
        if u.abs() > MAX_DISPLACEMENT || v.abs() > MAX_DISPLACEMENT {
            return Err(DiclError::Invalid(format!("displacement ({u}, {v}) outside [-3, 3]^2")));
        }
        Ok(Self { u, v })
    }

    /// Hypothesis slot: row-major over `(v, u)`, `(-3, -3)` first.
    pub fn index(self) -> usize {
        ((self.v + MAX_DISPLACEMENT) as usize) * WINDOW + (self.u + MAX_DISPLACEMENT) as usize
    }

    pub fn from_index(k: usize) -> Self {
        assert!(k < NUM_HYPOTHESES, "hypothesis index {k}");
        Self { u: (k % WINDOW) as i32 - MAX_DISPLACEMENT, v: (k / WINDOW) as i32 - MAX_DISPLACEMENT }
    }

    /// All 49 hypotheses in slot order.
    pub fn all() -> Vec<Self> {
        (0..NUM_HYPOTHESES).map(Self::from_index).collect()
    }

    pub fn shift(self) -> Shift {
        (self.u as isize, self.v as isize)
    }
}

pub(crate) fn all_shifts() -> Vec<Shift> {
    Displacement::all().into_iter().map(Displacement::shift).collect()
}

/// Learned matching costs `7 x 7 x h x w`; slot `[i][j]` is displacement `(u, v) = (j - 3, i - 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    pub costs: Tensor<T>,
    pub level: usize,
}

impl<T: Scalar> CostVolume<T> {
    pub fn new(costs: Tensor<T>, level: usize) -> Result<Self> {
        match costs.shape() {
            [a, b, _, _] if *a == WINDOW && *b == WINDOW => Ok(Self { costs, level }),
            s => Err(shape_err!("cost volume must be 7 x 7 x h x w, got {:?}", s)),
        }
    }

    /// From an `N x h x w` stack of hypothesis slices.
    pub fn from_flat(flat: Tensor<T>, level: usize) -> Result<Self> {
        let (n, h, w) = flat.dims3()?;
        if n != NUM_HYPOTHESES {
            return Err(shape_err!("expected {NUM_HYPOTHESES} hypotheses, got {n}"));
        }
        Self::new(flat.reshape(&[WINDOW, WINDOW, h, w])?, level)
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.costs.shape()[2], self.costs.shape()[3])
    }

    /// `N x h x w` view.
    pub fn flat(&self) -> Tensor<T> {
        let (h, w) = self.hw();
        self.costs.clone().reshape(&[NUM_HYPOTHESES, h, w]).expect("cost volume extents")
    }

    pub fn slice(&self, d: Displacement) -> &[T] {
        let (h, w) = self.hw();
        let k = d.index();
        &self.costs.data()[k * h * w..(k + 1) * h * w]
    }
}

/// The six layers of the matching network, in order.
pub fn dicl_layer_specs() -> [ConvSpec; 6] {
    [
        ConvSpec::new(64, 96, 3, 1),
        ConvSpec::new(96, 128, 3, 2),
        ConvSpec::new(128, 128, 3, 1),
        ConvSpec::new(128, 64, 3, 1),
        ConvSpec::transposed(64, 32, 4, 2),
        ConvSpec::new(32, 1, 3, 1),
    ]
}

/// 2D matching network `G`: BN + ReLU after every layer except the last.
#[derive(Clone, Debug)]
pub struct MatchingNet {
    pub hidden: Vec<ConvBnRelu>,
    pub last: Conv,
}

impl MatchingNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        Self::with_specs(store, name, &dicl_layer_specs(), rng)
    }

    pub fn with_specs<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        specs: &[ConvSpec],
        rng: &mut R,
    ) -> Self {
        let (last, hidden) = specs.split_last().expect("at least one layer");
        let hidden = hidden
            .iter()
            .enumerate()
            .map(|(i, s)| ConvBnRelu::new(store, &format!("{name}.l{}", i + 1), *s, rng))
            .collect();
        let last = Conv::new(store, &format!("{name}.l{}", specs.len()), *last, rng);
        Self { hidden, last }
    }

    pub fn specs(&self) -> Vec<ConvSpec> {
        self.hidden.iter().map(|l| l.conv.spec).chain([self.last.spec]).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.first().map_or(self.last.spec.in_channels, |l| l.conv.spec.in_channels)
    }

    /// Weights and biases of the convolutions (batch-norm affine terms excluded).
    pub fn conv_param_count(&self) -> usize {
        self.specs().iter().map(ConvSpec::param_count).sum()
    }

    fn check_even<T: Scalar>(x: &Tensor<T>) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("matching net needs even spatial extents, got {h}x{w}"));
        }
        Ok(())
    }

    /// `B x 64 x h x w` -> `B x 1 x h x w`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Self::check_even(g.value(x))?;
        let mut y = x;
        for layer in &self.hidden {
            y = layer.forward(g, y)?;
        }
        self.last.forward(g, y)
    }

    /// Inference with running batch-norm statistics, without recording a graph.
    /// `peak_live` receives the largest number of activation elements alive at once.
    pub fn forward_eval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        mut peak_live: Option<&mut usize>,
    ) -> Result<Tensor<T>> {
        Self::check_even(x)?;
        let mut y = x.clone();
        for layer in &self.hidden {
            let c =
                conv::forward(&y, &layer.conv.spec, store.get(layer.conv.weight), Some(store.get(layer.conv.bias)))?;
            let mut st = store.bn_states()[layer.bn.state.index()].clone();
            let (bn, _) =
                kernels::batchnorm_forward(&c, store.get(layer.bn.gamma), store.get(layer.bn.beta), &mut st, false)?;
            drop(c);
            let out = kernels::relu(&bn);
            if let Some(p) = peak_live.as_deref_mut() {
                *p = (*p).max(y.numel() + out.numel());
            }
            y = out;
        }
        let out = conv::forward(&y, &self.last.spec, store.get(self.last.weight), Some(store.get(self.last.bias)))?;
        if let Some(p) = peak_live {
            *p = (*p).max(y.numel() + out.numel());
        }
        Ok(out)
    }
}

fn as_batch<T: Scalar>(f: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    let (c, _, _) = f.dims3().map_err(|_| shape_err!("{what} must be C x h x w, got {:?}", f.shape()))?;
    let _ = c;
    Ok(f.clone().unsqueeze0())
}

/// Reference features stacked on the target features displaced by `d`:
/// channels `[0, C)` are `F1(p)`, channels `[C, 2C)` are `F2(p + d)` (zero outside).
pub fn concat_displaced<T: Scalar>(f1: &Tensor<T>, f2: &Tensor<T>, d: Displacement) -> Result<Tensor<T>> {
    let out = kernels::concat_displaced_forward(&as_batch(f1, "F1")?, &as_batch(f2, "F2")?, &[d.shift()])?;
    out.squeeze0()
}

/// Scalar cost per pixel of one `64 x h x w` hypothesis input, using running statistics.
pub fn matching_cost<T: Scalar>(fu: &Tensor<T>, net: &MatchingNet, store: &ParamStore<T>) -> Result<Tensor<T>> {
    net.forward_eval(store, &as_batch(fu, "matching input")?, None)?.squeeze0()
}

/// Full `7 x 7 x h x w` volume of a single frame pair (inference mode).
pub fn build_cost_volume<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    net: &MatchingNet,
    store: &ParamStore<T>,
    level: usize,
) -> Result<CostVolume<T>> {
    f1.same_shape(f2)?;
    let (_, h, w) = f1.dims3()?;
    let mut flat = Tensor::zeros(&[NUM_HYPOTHESES, h, w]);
    for d in Displacement::all() {
        let c = matching_cost(&concat_displaced(f1, f2, d)?, net, store)?;
        let k = d.index();
        flat.data_mut()[k * h * w..(k + 1) * h * w].copy_from_slice(c.data());
    }
    CostVolume::from_flat(flat, level)
}

/// Hypotheses per chunk on the graph-free inference path.
const EVAL_CHUNK: usize = WINDOW;

/// Records the cost volume of a batch: `B x 32 x h x w` twice -> `B x 49 x h x w`.
///
/// When nothing upstream needs a gradient and batch norm runs on running
/// statistics, hypotheses are evaluated in small chunks off the graph so that
/// activation memory does not scale with the number of hypotheses.
pub fn cost_volume<T: Scalar>(
    g: &mut Graph<T>,
    f1: Var,
    f2: Var,
    net: &MatchingNet,
    store: &ParamStore<T>,
) -> Result<Var> {
    let (b, _, h, w) = g.value(f1).dims4()?;
    let shifts = all_shifts();
    if !g.is_train() && !g.requires_grad(f1) && !g.requires_grad(f2) {
        let mut out = Tensor::zeros(&[b, NUM_HYPOTHESES, h, w]);
        let s = h * w;
        for img in 0..b {
            let a = g.value(f1).batch_item(img).unsqueeze0();
            let t = g.value(f2).batch_item(img).unsqueeze0();
            for (ci, chunk) in shifts.chunks(EVAL_CHUNK).enumerate() {
                let fu = kernels::concat_displaced_forward(&a, &t, chunk)?;
                let c = net.forward_eval(store, &fu, None)?;
                let start = (img * NUM_HYPOTHESES + ci * EVAL_CHUNK) * s;
                out.data_mut()[start..start + c.numel()].copy_from_slice(c.data());
            }
        }
        return Ok(g.constant(out));
    }
    let fu = g.concat_displaced(f1, f2, &shifts)?;
    let c = net.forward(g, fu)?;
    g.reshape(c, &[b, NUM_HYPOTHESES, h, w])
}
