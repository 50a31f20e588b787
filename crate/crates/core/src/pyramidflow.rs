//! Coarse-to-fine flow estimation over the five feature levels, plus the
//! multi-level training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselinecosts::{CostHead, CostHeadKind};
use crate::diclcost::FEATURE_DIM;
use crate::diffcore::kernels;
use crate::diffcore::layers::Conv;
use crate::diffcore::{ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::error::{shape_err, DiclError, Result};
use crate::featurenet::{level_factor, normalize_batch, pad_to_multiple, FeatureNet, NUM_LEVELS, SIZE_MULTIPLE};
use crate::flowhead::{soft_argmin, DapParams, FlowField, ProbabilityVolume};
use crate::scalar::Scalar;

/// Level weights, finest (1/4) first.
pub const LOSS_WEIGHTS: [f64; NUM_LEVELS] = [1.0, 0.75, 0.5, 0.5, 0.5];
pub const CONTEXT_DILATIONS: [usize; 7] = [1, 2, 4, 8, 16, 1, 1];
/// Output widths of the seven context layers.
pub const CONTEXT_WIDTHS: [usize; 7] = [64, 64, 64, 48, 32, 16, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: CostHeadKind,
    pub dap: bool,
    pub context: bool,
    /// Refine at every level instead of only the finest.
    pub context_all_levels: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { head: CostHeadKind::Dicl, dap: true, context: true, context_all_levels: false }
    }
}

/// Dilated refiner over `[flow, features]`; the last layer starts at zero.
#[derive(Clone, Debug)]
pub struct ContextNet {
    pub layers: Vec<Conv>,
}

impl ContextNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        let mut cin = 2 + FEATURE_DIM;
        let mut layers = Vec::with_capacity(CONTEXT_WIDTHS.len());
        for (i, (&cout, &dil)) in CONTEXT_WIDTHS.iter().zip(&CONTEXT_DILATIONS).enumerate() {
            let spec = ConvSpec::dilated(cin, cout, 3, dil);
            let lname = format!("{name}.l{}", i + 1);
            layers.push(if i + 1 == CONTEXT_WIDTHS.len() {
                Conv::zeroed(store, &lname, spec)
            } else {
                Conv::new(store, &lname, spec, rng)
            });
            cin = cout;
        }
        Self { layers }
    }

    /// `flow + residual(flow, features)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, flow: Var, features: Var) -> Result<Var> {
        let mut x = g.cat_channels(flow, features)?;
        let (last, hidden) = self.layers.split_last().expect("context layers");
        for l in hidden {
            x = l.forward(g, x)?;
            x = g.relu(x);
        }
        let r = last.forward(g, x)?;
        g.add(flow, r)
    }
}

/// Every trainable part of the estimator, with its parameter store.
#[derive(Clone, Debug)]
pub struct FlowNet<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub features: FeatureNet,
    /// One cost head per level, finest first.
    pub heads: Vec<CostHead>,
    pub dap: Vec<DapParams>,
    pub context: Option<ContextNet>,
}

/// Graph handles of one recorded forward pass, finest level first.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub flows: Vec<Var>,
    pub probs: Vec<Var>,
    pub full: Var,
}

/// Per-level flows (finest first), probabilities and the full-resolution flow of one frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidOutput<T> {
    pub flows: Vec<FlowField<T>>,
    pub probs: Vec<ProbabilityVolume<T>>,
    pub full_res_flow: FlowField<T>,
}

impl<T: Scalar> FlowNet<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let features = FeatureNet::new(&mut store, rng);
        let heads = (0..NUM_LEVELS).map(|k| CostHead::new(config.head, &mut store, &format!("cost{k}"), rng)).collect();
        let dap = if config.dap {
            (0..NUM_LEVELS).map(|k| DapParams::identity(&mut store, &format!("dap{k}"))).collect()
        } else {
            Vec::new()
        };
        let context = config.context.then(|| ContextNet::new(&mut store, "context", rng));
        Self { config, store, features, heads, dap, context }
    }

    /// Records the pyramid for a batch of frame pairs `B x 3 x H x W` with values in `[0, 1]`.
    pub fn record(&self, g: &mut Graph<T>, img1: &Tensor<T>, img2: &Tensor<T>) -> Result<PyramidVars> {
        img1.same_shape(img2)?;
        let (b, _, _, _) = img1.dims4()?;
        let both = normalize_batch(&Tensor::stack(&[img1, img2])?.reshape(&stacked_shape(img1.shape()))?)?;
        let x = g.constant(both);
        let feats = self.features.forward(g, x)?;
        let mut flows = vec![None; NUM_LEVELS];
        let mut probs = vec![None; NUM_LEVELS];
        let mut prev: Option<Var> = None;
        for k in (0..NUM_LEVELS).rev() {
            let f1 = g.narrow_batch(feats[k], 0, b)?;
            let f2 = g.narrow_batch(feats[k], b, b)?;
            let (_, _, h, w) = g.value(f1).dims4()?;
            let up = match prev {
                Some(p) => {
                    let u = g.upsample(p, 2, T::lit(2.0))?;
                    let (_, _, uh, uw) = g.value(u).dims4()?;
                    if (uh, uw) != (h, w) {
                        return Err(shape_err!("level {k} is {h}x{w} but the upsampled flow is {uh}x{uw}"));
                    }
                    Some(u)
                }
                None => None,
            };
            let target = match up {
                Some(u) => g.warp(f2, u)?.0,
                None => f2,
            };
            let mut cost = self.heads[k].cost_volume(g, f1, target, &self.store)?;
            if let Some(d) = self.dap.get(k) {
                cost = d.forward(g, cost)?;
            }
            let (residual, p) = soft_argmin(g, cost)?;
            let mut flow = match up {
                Some(u) => g.add(u, residual)?,
                None => residual,
            };
            if let Some(ctx) = &self.context {
                if k == 0 || self.config.context_all_levels {
                    flow = ctx.forward(g, flow, f1)?;
                }
            }
            flows[k] = Some(flow);
            probs[k] = Some(p);
            prev = Some(flow);
        }
        let flows: Vec<Var> = flows.into_iter().map(|f| f.expect("every level visited")).collect();
        let probs = probs.into_iter().map(|p| p.expect("every level visited")).collect();
        let f0 = level_factor(0);
        let full = g.upsample(flows[0], f0, T::lit(f0 as f64))?;
        Ok(PyramidVars { flows, probs, full })
    }

    /// Inference on one frame pair `3 x H x W` (extents multiples of 64).
    pub fn forward(&self, img1: &Tensor<T>, img2: &Tensor<T>) -> Result<PyramidOutput<T>> {
        img1.dims3()?;
        let mut g = Graph::bind(&self.store, false, false);
        let vars = self.record(&mut g, &img1.clone().unsqueeze0(), &img2.clone().unsqueeze0())?;
        let item = |g: &Graph<T>, v: Var| g.value(v).batch_item(0);
        let flows = vars.flows.iter().map(|&v| FlowField::new(item(&g, v))).collect::<Result<_>>()?;
        let probs = vars.probs.iter().map(|&v| ProbabilityVolume::from_flat(item(&g, v))).collect::<Result<_>>()?;
        let full_res_flow = FlowField::new(item(&g, vars.full))?;
        Ok(PyramidOutput { flows, probs, full_res_flow })
    }

    /// Full-resolution flow for images of any size (padded, then cropped back).
    pub fn predict(&self, img1: &Tensor<T>, img2: &Tensor<T>) -> Result<FlowField<T>> {
        img1.same_shape(img2)?;
        let (p1, rec) = pad_to_multiple(img1, SIZE_MULTIPLE)?;
        let (p2, _) = pad_to_multiple(img2, SIZE_MULTIPLE)?;
        let out = self.forward(&p1, &p2)?;
        FlowField::new(rec.crop(&out.full_res_flow.flow)?)
    }

    /// Trainable scalars per group name prefix.
    pub fn group_sizes(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.store.names().iter().zip(self.store.tensors()) {
            let prefix = name.split('.').next().unwrap_or(name).to_string();
            match groups.last_mut() {
                Some((p, n)) if *p == prefix => *n += t.numel(),
                _ => groups.push((prefix, t.numel())),
            }
        }
        groups
    }
}

fn stacked_shape(s: &[usize]) -> Vec<usize> {
    let mut out = s.to_vec();
    out[0] *= 2;
    out
}

/// Bilinear `x2` upsampling of a flow field, values doubled.
pub fn upsample_flow<T: Scalar>(flow: &FlowField<T>) -> Result<FlowField<T>> {
    let up = kernels::upsample_forward(&flow.flow.clone().unsqueeze0(), 2, T::lit(2.0))?;
    FlowField::new(up.squeeze0()?)
}

/// Applies the context refiner to one flow field and its `32 x h x w` features.
pub fn context_refine<T: Scalar>(
    flow: &FlowField<T>,
    features: &Tensor<T>,
    ctx: &ContextNet,
    store: &ParamStore<T>,
) -> Result<FlowField<T>> {
    let (c, h, w) = features.dims3()?;
    if c != FEATURE_DIM || flow.hw() != (h, w) {
        return Err(shape_err!(
            "context refinement needs {FEATURE_DIM} x {:?} features, got {:?}",
            flow.hw(),
            features.shape()
        ));
    }
    let mut g = Graph::bind(store, false, false);
    let f = g.constant(flow.flow.clone().unsqueeze0());
    let x = g.constant(features.clone().unsqueeze0());
    let y = ctx.forward(&mut g, f, x)?;
    FlowField::new(g.take_value(y).squeeze0()?)
}

/// Ground truth at a level: block-averaged flow scaled by `1 / factor`, and a
/// mask that is valid only where the whole block is valid.
pub fn pool_ground_truth<T: Scalar>(
    gt: &Tensor<T>,
    valid: &Tensor<T>,
    factor: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = gt.dims4()?;
    if c != 2 || valid.shape() != [n, 1, h, w] {
        return Err(shape_err!("ground truth must be N x 2 x H x W with an N x 1 x H x W mask"));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("{h}x{w} is not divisible by {factor}"));
    }
    let (lh, lw) = (h / factor, w / factor);
    let inv = T::one() / T::lit((factor * factor * factor) as f64);
    let mut g = Tensor::zeros(&[n, 2, lh, lw]);
    let mut m = Tensor::zeros(&[n, 1, lh, lw]);
    for img in 0..n {
        for y in 0..lh {
            for x in 0..lw {
                let mut acc = [T::zero(); 2];
                let mut all = T::one();
                for dy in 0..factor {
                    for dx in 0..factor {
                        let (sy, sx) = (y * factor + dy, x * factor + dx);
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += gt.get(&[img, ch, sy, sx]);
                        }
                        all = all.min(valid.get(&[img, 0, sy, sx]));
                    }
                }
                g.set(&[img, 0, y, x], acc[0] * inv);
                g.set(&[img, 1, y, x], acc[1] * inv);
                m.set(&[img, 0, y, x], all);
            }
        }
    }
    Ok((g, m))
}

/// Records `sum_k weights[k] * masked_mean |flow_k - gt_k|` over the levels.
pub fn record_multi_level_loss<T: Scalar>(
    g: &mut Graph<T>,
    flows: &[Var],
    gt: &Tensor<T>,
    valid: &Tensor<T>,
    weights: &[f64],
) -> Result<Var> {
    if flows.len() != weights.len() || flows.is_empty() {
        return Err(DiclError::Config(format!("{} levels but {} loss weights", flows.len(), weights.len())));
    }
    gt.ensure_finite("ground-truth flow")?;
    let (_, _, hh, _) = gt.dims4()?;
    let mut terms = Vec::with_capacity(flows.len());
    for &f in flows {
        let (_, _, h, _) = g.value(f).dims4()?;
        let factor = hh / h;
        let (gk, mk) = pool_ground_truth(gt, valid, factor)?;
        terms.push(g.masked_epe(f, gk, mk)?);
    }
    let ws: Vec<T> = weights.iter().map(|&w| T::lit(w)).collect();
    g.weighted_sum(&terms, &ws)
}

/// Loss of an already computed output against a full-resolution ground truth
/// (its mask, or all-valid).
pub fn multi_level_loss<T: Scalar>(out: &PyramidOutput<T>, gt: &FlowField<T>, weights: &[f64]) -> Result<T> {
    let mut g = Graph::new(false);
    let flows: Vec<Var> = out.flows.iter().map(|f| g.constant(f.flow.clone().unsqueeze0())).collect();
    let loss =
        record_multi_level_loss(&mut g, &flows, &gt.flow.clone().unsqueeze0(), &gt.mask().unsqueeze0(), weights)?;
    Ok(g.value(loss).data()[0])
}
