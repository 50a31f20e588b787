//! Central-difference checks for every differentiable operator, in f64.

use dicl::baselinecosts::{CostHead, CostHeadKind};
use dicl::diclcost::{Displacement, FEATURE_DIM};
use dicl::diffcore::testutil::random_tensor;
use dicl::diffcore::{ConvSpec, Graph, ParamStore, Tensor, Var};
use dicl::flowhead::{soft_argmin, DapParams};
use dicl::pyramidflow::{record_multi_level_loss, ContextNet};
use dicl::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;
pub const SEEDS: [u64; 3] = [1, 2, 3];
const H: f64 = 1e-6;
const COORDS: usize = 24;

/// Random linear functional of `y`, so every output coordinate matters.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = random_tensor(g.value(y).shape(), seed ^ 0xABCD);
    g.project(y, w)
}

/// Outcome of one check: worst relative error over smooth coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Outcome {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where the two step sizes disagree, i.e. a ReLU kink lies within the step.
    pub kinks: usize,
}

impl Outcome {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= TOL && self.kinks * 10 <= self.checked
    }

    fn merge(self, o: Outcome) -> Outcome {
        Outcome {
            max_rel_err: self.max_rel_err.max(o.max_rel_err),
            checked: self.checked + o.checked,
            kinks: self.kinks + o.kinks,
        }
    }
}

/// Central differences on every input and every parameter of `store` (strided to
/// `coords` coordinates per tensor) against the reverse-mode gradient.
fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], coords: usize, build: F) -> Result<Outcome>
where
    F: Fn(&mut Graph<f64>, &[Var], &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::bind(s, true, true);
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars, s)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::bind(store, true, true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars, store)?;
    g.backward(out)?;
    let mut analytic = g.param_grads();
    analytic
        .extend(vars.iter().zip(inputs).map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))));

    // parameters first, then inputs, mirroring `analytic`
    let mut s = store.clone();
    let mut ins = inputs.to_vec();
    let mut outcome = Outcome { max_rel_err: 0.0, checked: 0, kinks: 0 };
    for k in 0..analytic.len() {
        let n = analytic[k].numel();
        for i in (0..n).step_by(n.div_ceil(coords).max(1)) {
            let np = store.len();
            let get = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| {
                if k < np {
                    s.tensors()[k].data()[i]
                } else {
                    ins[k - np].data()[i]
                }
            };
            let set = |s: &mut ParamStore<f64>, ins: &mut [Tensor<f64>], v: f64| {
                if k < np {
                    s.tensors_mut()[k].data_mut()[i] = v;
                } else {
                    ins[k - np].data_mut()[i] = v;
                }
            };
            let mut numeric = |h: f64| -> Result<f64> {
                let orig = get(&s, &ins);
                set(&mut s, &mut ins, orig + h);
                let up = eval(&s, &ins)?;
                set(&mut s, &mut ins, orig - h);
                let down = eval(&s, &ins)?;
                set(&mut s, &mut ins, orig);
                Ok((up - down) / (2.0 * h))
            };
            let a = analytic[k].data()[i];
            let rel = |num: f64| (a - num).abs() / num.abs().max(1.0);
            let coarse = numeric(H)?;
            outcome.checked += 1;
            if rel(coarse) <= TOL {
                outcome.max_rel_err = outcome.max_rel_err.max(rel(coarse));
                continue;
            }
            let fine = numeric(H / 10.0)?;
            if (coarse - fine).abs() / fine.abs().max(1.0) > TOL / 2.0 {
                outcome.kinks += 1;
            } else {
                outcome.max_rel_err = outcome.max_rel_err.max(rel(fine));
            }
        }
    }
    Ok(outcome)
}

fn leaf_check<F>(inputs: &[Tensor<f64>], build: F) -> Result<Outcome>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(&ParamStore::new(), inputs, COORDS, |g, v, _| build(g, v))
}

pub fn conv2d(seed: u64) -> Result<Outcome> {
    let spec = ConvSpec::new(3, 4, 3, 2).with_padding(1);
    let ins = [
        random_tensor(&[2, 3, 8, 8], seed),
        random_tensor(&spec.weight_shape(), seed + 10),
        random_tensor(&[4], seed + 20),
    ];
    leaf_check(&ins, |g, v| {
        let y = g.conv2d(v[0], spec, v[1], Some(v[2]))?;
        reduce(g, y, seed)
    })
}

pub fn dilated_conv2d(seed: u64) -> Result<Outcome> {
    let spec = ConvSpec::dilated(2, 3, 3, 2);
    let ins = [random_tensor(&[1, 2, 8, 8], seed), random_tensor(&spec.weight_shape(), seed + 10)];
    leaf_check(&ins, |g, v| {
        let y = g.conv2d(v[0], spec, v[1], None)?;
        reduce(g, y, seed)
    })
}

pub fn deconv2d(seed: u64) -> Result<Outcome> {
    let spec = ConvSpec::transposed(3, 2, 4, 2).with_padding(1);
    let ins = [
        random_tensor(&[2, 3, 4, 4], seed),
        random_tensor(&spec.weight_shape(), seed + 10),
        random_tensor(&[2], seed + 20),
    ];
    leaf_check(&ins, |g, v| {
        let y = g.conv2d(v[0], spec, v[1], Some(v[2]))?;
        reduce(g, y, seed)
    })
}

pub fn batchnorm2d(seed: u64) -> Result<Outcome> {
    let ins = [random_tensor(&[4, 3, 4, 4], seed), random_tensor(&[3], seed + 10), random_tensor(&[3], seed + 20)];
    leaf_check(&ins, |g, v| {
        let id = g.add_bn_state(dicl::diffcore::BnState::new(3));
        let y = g.batchnorm(v[0], v[1], v[2], id)?;
        reduce(g, y, seed)
    })
}

pub fn relu(seed: u64) -> Result<Outcome> {
    let ins = [random_tensor(&[2, 3, 8, 8], seed)];
    leaf_check(&ins, |g, v| {
        let y = g.relu(v[0]);
        reduce(g, y, seed)
    })
}

pub fn bilinear_warp(seed: u64) -> Result<Outcome> {
    // flows of a few pixels so samples cross cell borders and the frame edge
    let flow = random_tensor(&[2, 2, 8, 8], seed + 10).map(|x| 2.5 * x + 0.01);
    let ins = [random_tensor(&[2, 3, 8, 8], seed), flow];
    leaf_check(&ins, |g, v| {
        let (y, _) = g.warp(v[0], v[1])?;
        reduce(g, y, seed)
    })
}

pub fn softmax(seed: u64) -> Result<Outcome> {
    let ins = [random_tensor(&[2, 5, 4, 4], seed).map(|x| 3.0 * x)];
    leaf_check(&ins, |g, v| {
        let y = g.softmax(v[0], 1)?;
        reduce(g, y, seed)
    })
}

fn dap_store(seed: u64) -> (ParamStore<f64>, DapParams) {
    let mut store = ParamStore::new();
    let dap = DapParams::identity(&mut store, "dap");
    for (k, t) in store.tensors_mut().iter_mut().enumerate() {
        let noise = random_tensor(t.shape(), seed * 31 + k as u64);
        t.add_assign(&noise.map(|x| 0.2 * x));
    }
    (store, dap)
}

pub fn dap_reweight(seed: u64) -> Result<Outcome> {
    let (store, dap) = dap_store(seed);
    let ins = [random_tensor(&[1, 49, 4, 4], seed)];
    check(&store, &ins, COORDS, |g, v, _| {
        let y = dap.forward(g, v[0])?;
        reduce(g, y, seed)
    })
}

pub fn soft_argmin2d(seed: u64) -> Result<Outcome> {
    let ins = [random_tensor(&[2, 49, 4, 4], seed).map(|x| 2.0 * x)];
    leaf_check(&ins, |g, v| {
        let (flow, p) = soft_argmin(g, v[0])?;
        let a = reduce(g, flow, seed)?;
        let b = reduce(g, p, seed + 1)?;
        g.add(a, b)
    })
}

pub fn context_refine(seed: u64) -> Result<Outcome> {
    let mut store = ParamStore::new();
    let ctx = ContextNet::new(&mut store, "ctx", &mut ChaCha8Rng::seed_from_u64(seed));
    // the last layer starts at zero; give it weight so gradients reach every layer
    let last = store.len() - 2;
    let shape = store.tensors()[last].shape().to_vec();
    store.tensors_mut()[last] = random_tensor(&shape, seed + 5).map(|x| 0.1 * x);
    let ins = [random_tensor(&[1, 2, 8, 8], seed), random_tensor(&[1, FEATURE_DIM, 8, 8], seed + 1)];
    check(&store, &ins, COORDS, |g, v, _| {
        let y = ctx.forward(g, v[0], v[1])?;
        reduce(g, y, seed)
    })
}

pub fn multi_level_loss(seed: u64) -> Result<Outcome> {
    let gt = random_tensor(&[1, 2, 32, 32], seed + 7).map(|x| 6.0 * x);
    let mut valid = Tensor::full(&[1, 1, 32, 32], 1.0);
    for i in 0..32 {
        valid.set(&[0, 0, i, 0], 0.0);
    }
    let ins = [random_tensor(&[1, 2, 8, 8], seed), random_tensor(&[1, 2, 4, 4], seed + 1)];
    leaf_check(&ins, |g, v| record_multi_level_loss(g, v, &gt, &valid, &[1.0, 0.75]))
}

pub fn cost_head(kind: CostHeadKind, seed: u64) -> Result<Outcome> {
    let mut store = ParamStore::new();
    let head = CostHead::new(kind, &mut store, "cost", &mut ChaCha8Rng::seed_from_u64(seed));
    let (h, w) = (4, 4);
    let ins = [random_tensor(&[1, FEATURE_DIM, h, w], seed), random_tensor(&[1, FEATURE_DIM, h, w], seed + 1)];
    // the full nets are costly to re-evaluate; probe fewer coordinates per tensor
    let coords = match kind {
        CostHeadKind::Dicl => 6,
        CostHeadKind::ReducedDicl => 10,
        _ => COORDS,
    };
    check(&store, &ins, coords, |g, v, s| {
        let y = head.cost_volume(g, v[0], v[1], s)?;
        reduce(g, y, seed)
    })
}

pub fn upsample(seed: u64) -> Result<Outcome> {
    let ins = [random_tensor(&[1, 2, 4, 4], seed)];
    leaf_check(&ins, |g, v| {
        let y = g.upsample(v[0], 2, 2.0)?;
        reduce(g, y, seed)
    })
}

pub fn structural(seed: u64) -> Result<Outcome> {
    let shifts: Vec<_> = Displacement::all().into_iter().map(Displacement::shift).collect();
    let ins = [
        random_tensor(&[2, 3, 5, 6], seed),
        random_tensor(&[2, 3, 5, 6], seed + 1),
        random_tensor(&[2, 2, 5, 6], seed + 2),
    ];
    leaf_check(&ins, |g, v| {
        let cat = g.concat_displaced(v[0], v[1], &shifts[20..24])?;
        let dot = g.dot_corr(v[0], v[1], &shifts[..5])?;
        let cos = g.cos_corr(v[0], v[1], &shifts[40..])?;
        let both = g.cat_channels(v[0], v[2])?;
        let half = g.narrow_batch(both, 1, 1)?;
        let padded = g.pad_br(half, 1, 2)?;
        let cropped = g.crop(padded, 4, 4)?;
        let sq = g.half_squares(cropped);
        let diff = g.sub(v[0], v[1])?;
        let r = g.reshape(diff, &[2, 90])?;
        let scaled = g.scale(r, 0.3);
        let parts = [
            reduce(g, cat, seed)?,
            reduce(g, dot, seed + 1)?,
            reduce(g, cos, seed + 2)?,
            sq,
            reduce(g, scaled, seed + 3)?,
        ];
        g.weighted_sum(&parts, &[1.0, 0.5, 2.0, 0.1, 1.0])
    })
}

pub fn masked_epe(seed: u64) -> Result<Outcome> {
    let gt = random_tensor(&[1, 2, 6, 6], seed + 3);
    let mask = Tensor::from_fn(&[1, 1, 6, 6], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
    let ins = [random_tensor(&[1, 2, 6, 6], seed)];
    leaf_check(&ins, |g, v| g.masked_epe(v[0], gt.clone(), mask.clone()))
}

pub type Check = (&'static str, fn(u64) -> Result<Outcome>);

pub const CHECKS: [Check; 19] = [
    ("conv2d", conv2d),
    ("dilated conv2d", dilated_conv2d),
    ("deconv2d", deconv2d),
    ("batchnorm2d", batchnorm2d),
    ("relu", relu),
    ("bilinear_warp", bilinear_warp),
    ("softmax", softmax),
    ("dap_reweight", dap_reweight),
    ("soft_argmin2d", soft_argmin2d),
    ("context_refine", context_refine),
    ("multi_level_loss", multi_level_loss),
    ("cost head dot", |s| cost_head(CostHeadKind::Dot, s)),
    ("cost head cosine", |s| cost_head(CostHeadKind::Cosine, s)),
    ("cost head mlp3", |s| cost_head(CostHeadKind::Mlp3, s)),
    ("cost head reduced-dicl", |s| cost_head(CostHeadKind::ReducedDicl, s)),
    ("cost head dicl", |s| cost_head(CostHeadKind::Dicl, s)),
    ("upsample", upsample),
    ("structural ops", structural),
    ("masked_epe", masked_epe),
];

/// Each check merged over all seeds.
pub fn run_all() -> Vec<(&'static str, Result<Outcome>)> {
    CHECKS
        .iter()
        .map(|(name, f)| {
            let first = Outcome { max_rel_err: 0.0, checked: 0, kinks: 0 };
            (*name, SEEDS.iter().try_fold(first, |acc, &s| f(s).map(|o| acc.merge(o))))
        })
        .collect()
}
