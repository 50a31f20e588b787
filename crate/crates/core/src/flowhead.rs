//! From costs to flow: displacement-aware projection, 2D soft-argmin and the
//! peak-sharpness diagnostic.

use crate::diclcost::{CostVolume, Displacement, NUM_HYPOTHESES, WINDOW};
use crate::diffcore::{ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Learned `N x N` mixing of hypothesis costs (a 1x1 convolution over the hypothesis axis).
#[derive(Clone, Copy, Debug)]
pub struct DapParams {
    /// `N x N x 1 x 1`
    pub weight: ParamId,
    pub bias: ParamId,
}

fn dap_spec() -> ConvSpec {
    ConvSpec::new(NUM_HYPOTHESES, NUM_HYPOTHESES, 1, 1)
}

impl DapParams {
    /// Identity weights and zero bias, so the layer starts as a no-op.
    pub fn identity<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Self {
        let n = NUM_HYPOTHESES;
        let w = Tensor::from_fn(&[n, n, 1, 1], |i| if i / n == i % n { T::one() } else { T::zero() });
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n]));
        Self { weight, bias }
    }

    /// `B x N x h x w` -> `B x N x h x w`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, costs: Var) -> Result<Var> {
        let n = g.value(costs).dims4()?.1;
        if n != NUM_HYPOTHESES {
            return Err(shape_err!("projection expects {NUM_HYPOTHESES} hypotheses, got {n}"));
        }
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(costs, dap_spec(), w, Some(b))
    }

    /// The weight as a plain `N x N` matrix (row `u` mixes all `v` into `C'_u`).
    pub fn matrix<T: Scalar>(&self, store: &ParamStore<T>) -> Tensor<T> {
        store.get(self.weight).clone().reshape(&[NUM_HYPOTHESES, NUM_HYPOTHESES]).expect("dap weight shape")
    }
}

/// Displacement probabilities `7 x 7 x h x w`; each pixel's plane sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume<T> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> ProbabilityVolume<T> {
    pub fn from_flat(flat: Tensor<T>) -> Result<Self> {
        let (n, h, w) = flat.dims3()?;
        if n != NUM_HYPOTHESES {
            return Err(shape_err!("expected {NUM_HYPOTHESES} hypotheses, got {n}"));
        }
        Ok(Self { probs: flat.reshape(&[WINDOW, WINDOW, h, w])? })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.probs.shape()[2], self.probs.shape()[3])
    }
}

/// Displacement field `2 x h x w` (u then v, pixels at its own resolution).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub flow: Tensor<T>,
    pub valid: Option<Tensor<T>>,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(flow: Tensor<T>) -> Result<Self> {
        match flow.shape() {
            [2, _, _] => Ok(Self { flow, valid: None }),
            s => Err(shape_err!("flow field must be 2 x h x w, got {:?}", s)),
        }
    }

    pub fn with_valid(flow: Tensor<T>, valid: Tensor<T>) -> Result<Self> {
        let mut f = Self::new(flow)?;
        let (h, w) = f.hw();
        if valid.shape() != [1, h, w] {
            return Err(shape_err!("validity mask must be 1 x {h} x {w}, got {:?}", valid.shape()));
        }
        f.valid = Some(valid);
        Ok(f)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { flow: Tensor::zeros(&[2, h, w]), valid: None }
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.flow.shape()[1], self.flow.shape()[2])
    }

    pub fn u(&self, y: usize, x: usize) -> T {
        self.flow.get(&[0, y, x])
    }

    pub fn v(&self, y: usize, x: usize) -> T {
        self.flow.get(&[1, y, x])
    }

    /// Validity mask, all ones when none is attached.
    pub fn mask(&self) -> Tensor<T> {
        let (h, w) = self.hw();
        self.valid.clone().unwrap_or_else(|| Tensor::full(&[1, h, w], T::one()))
    }
}

/// Linear mixing of the hypothesis costs at every pixel: `C'_u = sum_v W[u, v] C_v + b_u`.
pub fn dap_reweight<T: Scalar>(c: &CostVolume<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<CostVolume<T>> {
    let n = NUM_HYPOTHESES;
    if weight.numel() != n * n || bias.numel() != n {
        return Err(shape_err!(
            "projection needs a {n} x {n} weight and {n} biases, got {:?} and {:?}",
            weight.shape(),
            bias.shape()
        ));
    }
    let (h, w) = c.hw();
    let mut g = Graph::new(false);
    let x = g.constant(c.flat().unsqueeze0());
    let wv = g.constant(weight.clone().reshape(&[n, n, 1, 1])?);
    let bv = g.constant(bias.clone().reshape(&[n])?);
    let y = g.conv2d(x, dap_spec(), wv, Some(bv))?;
    CostVolume::from_flat(g.value(y).clone().reshape(&[n, h, w])?, c.level)
}

/// `2 x N x 1 x 1` constant mapping probabilities to the expected `(u, v)`.
pub fn displacement_weights<T: Scalar>() -> Tensor<T> {
    let mut w = Tensor::zeros(&[2, NUM_HYPOTHESES, 1, 1]);
    for d in Displacement::all() {
        w.set(&[0, d.index(), 0, 0], T::lit(d.u as f64));
        w.set(&[1, d.index(), 0, 0], T::lit(d.v as f64));
    }
    w
}

/// Records `p = softmax(-C)` over the hypothesis axis and `flow = sum_u u p(u)`.
/// Returns `(flow B x 2 x h x w, probabilities B x N x h x w)`.
pub fn soft_argmin<T: Scalar>(g: &mut Graph<T>, costs: Var) -> Result<(Var, Var)> {
    let neg = g.scale(costs, -T::one());
    let p = g.softmax(neg, 1)?;
    let wv = g.constant(displacement_weights());
    let flow = g.conv2d(p, ConvSpec::new(NUM_HYPOTHESES, 2, 1, 1), wv, None)?;
    Ok((flow, p))
}

pub fn soft_argmin2d<T: Scalar>(c: &CostVolume<T>) -> Result<(FlowField<T>, ProbabilityVolume<T>)> {
    c.costs.ensure_finite("cost volume")?;
    let mut g = Graph::new(false);
    let x = g.constant(c.flat().unsqueeze0());
    let (flow, p) = soft_argmin(&mut g, x)?;
    let flow = FlowField::new(g.value(flow).batch_item(0))?;
    let probs = ProbabilityVolume::from_flat(g.value(p).batch_item(0))?;
    Ok((flow, probs))
}

/// Per pixel, largest minus second-largest hypothesis probability.
pub fn d_peak<T: Scalar>(probs: &ProbabilityVolume<T>) -> Tensor<T> {
    let (h, w) = probs.hw();
    let s = h * w;
    let pd = probs.probs.data();
    Tensor::from_fn(&[1, h, w], |p| {
        let (mut best, mut second) = (T::neg_infinity(), T::neg_infinity());
        for k in 0..NUM_HYPOTHESES {
            let v = pd[k * s + p];
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        best - second
    })
}
