//! Siamese feature extractor: five levels of 32-channel features at 1/4 ... 1/64.

use rand::Rng;

use crate::diclcost::FEATURE_DIM;
use crate::diffcore::layers::{Conv, ConvBnRelu};
use crate::diffcore::{ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

pub const NUM_LEVELS: usize = 5;
/// Input extents must be multiples of this (the coarsest level is 1/64).
pub const SIZE_MULTIPLE: usize = 64;
/// Trunk widths of the five stages.
pub const STAGE_WIDTHS: [usize; NUM_LEVELS] = [32, 48, 64, 80, 96];

/// Downsampling factor of level `k` (0 = finest).
pub fn level_factor(k: usize) -> usize {
    4 << k
}

/// One stage: stride-2 conv, stride-1 conv, and a linear 1x1 projection to 32 channels.
#[derive(Clone, Debug)]
pub struct Stage {
    pub down: ConvBnRelu,
    pub body: ConvBnRelu,
    pub proj: Conv,
}

/// Parameters of the shared extractor `f`.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    /// Extra stride-2 entry so that the first stage lands on 1/4.
    pub stem: ConvBnRelu,
    pub stages: Vec<Stage>,
}

/// Five feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

/// Size of an image before padding, for cropping results back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub height: usize,
    pub width: usize,
}

impl FeatureNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let stem = ConvBnRelu::new(store, "feat.stem", ConvSpec::new(3, 16, 3, 2), rng);
        let mut prev = 16;
        let stages = STAGE_WIDTHS
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let st = Stage {
                    down: ConvBnRelu::new(store, &format!("feat.s{k}.down"), ConvSpec::new(prev, c, 3, 2), rng),
                    body: ConvBnRelu::new(store, &format!("feat.s{k}.body"), ConvSpec::new(c, c, 3, 1), rng),
                    proj: Conv::new(store, &format!("feat.s{k}.proj"), ConvSpec::new(c, FEATURE_DIM, 1, 1), rng),
                };
                prev = c;
                st
            })
            .collect();
        Self { stem, stages }
    }

    /// `B x 3 x H x W` images (already normalized) -> five `B x 32 x H/f x W/f` maps.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(images).dims4()?;
        check_extent(c, h, w)?;
        let mut x = self.stem.forward(g, images)?;
        let mut out = Vec::with_capacity(NUM_LEVELS);
        for st in &self.stages {
            x = st.down.forward(g, x)?;
            x = st.body.forward(g, x)?;
            out.push(st.proj.forward(g, x)?);
        }
        Ok(out)
    }

    /// Extracts the pyramid of a single `3 x H x W` image with running statistics.
    pub fn extract<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let (c, h, w) = image.dims3()?;
        check_extent(c, h, w)?;
        let mut g = Graph::bind(store, false, false);
        let x = g.constant(normalize_batch(&image.clone().unsqueeze0())?);
        let levels = self.forward(&mut g, x)?;
        Ok(FeaturePyramid { levels: levels.into_iter().map(|v| g.value(v).batch_item(0)).collect() })
    }
}

fn check_extent(c: usize, h: usize, w: usize) -> Result<()> {
    if c != 3 {
        return Err(shape_err!("feature net expects 3-channel images, got {c}"));
    }
    if !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(shape_err!("image extents {h}x{w} must be multiples of {SIZE_MULTIPLE}; pad first"));
    }
    Ok(())
}

/// Subtracts each image's mean intensity (inputs are expected in `[0, 1]`).
pub fn normalize_batch<T: Scalar>(images: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, _, _) = images.dims4()?;
    let per = images.numel() / n;
    let mut out = images.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        let mean = chunk.iter().copied().sum::<T>() / T::lit(per as f64);
        chunk.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

/// Zero-pads a `C x H x W` (or batched) tensor at the bottom/right to the next multiple.
pub fn pad_to_multiple<T: Scalar>(image: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, PadRecord)> {
    let (batched, squeeze) = match image.rank() {
        3 => (image.clone().unsqueeze0(), true),
        4 => (image.clone(), false),
        _ => return Err(shape_err!("cannot pad tensor of shape {:?}", image.shape())),
    };
    let (_, _, h, w) = batched.dims4()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple - h, w.div_ceil(multiple) * multiple - w);
    let padded = crate::diffcore::kernels::pad_br(&batched, ph, pw)?;
    let padded = if squeeze { padded.squeeze0()? } else { padded };
    Ok((padded, PadRecord { height: h, width: w }))
}

impl PadRecord {
    /// Crops a `C x H' x W'` (or batched) tensor back to the recorded size.
    pub fn crop<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        match t.rank() {
            3 => crate::diffcore::kernels::crop(&t.clone().unsqueeze0(), self.height, self.width)?.squeeze0(),
            4 => crate::diffcore::kernels::crop(t, self.height, self.width),
            _ => Err(shape_err!("cannot crop tensor of shape {:?}", t.shape())),
        }
    }
}
