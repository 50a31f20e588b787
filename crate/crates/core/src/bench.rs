//! Cost/memory accounting of 5D-volume processing schemes, d_peak histograms
//! and projection-kernel dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma};

use crate::diclcost::{MatchingNet, WINDOW};
use crate::diffcore::{ParamStore, Tensor};
use crate::error::{shape_err, DiclError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeKind {
    /// Full 4D convolution over a `K x U x V x h x w` volume.
    Conv4d,
    /// Separable 4D filtering (two 2D 3x3 filters per layer).
    VcnSeparable,
    /// Shared 2D matching net applied per displacement.
    Dicl,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [Self::Conv4d, Self::VcnSeparable, Self::Dicl];

    pub fn name(self) -> &'static str {
        match self {
            Self::Conv4d => "conv4d",
            Self::VcnSeparable => "vcn_separable",
            Self::Dicl => "dicl",
        }
    }
}

impl FromStr for SchemeKind {
    type Err = DiclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv4d" => Ok(Self::Conv4d),
            "vcn_separable" | "vcn" => Ok(Self::VcnSeparable),
            "dicl" => Ok(Self::Dicl),
            _ => Err(DiclError::Config(format!("unknown costing scheme '{s}' (conv4d, vcn_separable, dicl)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostingScheme {
    pub kind: SchemeKind,
    pub k: u64,
    pub u: u64,
    pub v: u64,
    pub h: u64,
    pub w: u64,
}

impl CostingScheme {
    pub fn new(kind: SchemeKind, k: u64, u: u64, v: u64, h: u64, w: u64) -> Result<Self> {
        if [k, u, v, h, w].contains(&0) {
            return Err(DiclError::Config("costing scheme extents must be positive".into()));
        }
        Ok(Self { kind, k, u, v, h, w })
    }
}

/// Kernel weights of one layer: `81 K^2`, `18 K^2` or `9 K`.
pub fn per_layer_params(s: &CostingScheme) -> u64 {
    match s.kind {
        SchemeKind::Conv4d => 81 * s.k * s.k,
        SchemeKind::VcnSeparable => 18 * s.k * s.k,
        SchemeKind::Dicl => 9 * s.k,
    }
}

/// Activation elements of one layer at inference.
pub fn inference_memory(s: &CostingScheme) -> u64 {
    match s.kind {
        SchemeKind::Conv4d | SchemeKind::VcnSeparable => s.k * s.u * s.v * s.h * s.w,
        SchemeKind::Dicl => s.k * s.h * s.w,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeRow {
    pub kind: SchemeKind,
    pub params: u64,
    /// Params relative to the DICL row.
    pub params_ratio: u64,
    pub memory: u64,
    pub memory_ratio: u64,
}

/// The three schemes side by side, ratios taken against DICL.
pub fn scheme_table(k: u64, u: u64, v: u64, h: u64, w: u64) -> Result<Vec<SchemeRow>> {
    let base = CostingScheme::new(SchemeKind::Dicl, k, u, v, h, w)?;
    let (bp, bm) = (per_layer_params(&base), inference_memory(&base));
    SchemeKind::ALL
        .iter()
        .map(|&kind| {
            let s = CostingScheme { kind, ..base };
            let (params, memory) = (per_layer_params(&s), inference_memory(&s));
            Ok(SchemeRow { kind, params, params_ratio: params / bp, memory, memory_ratio: memory / bm })
        })
        .collect()
}

pub fn scheme_csv(rows: &[SchemeRow]) -> String {
    let mut out = String::from("scheme,params,params_ratio,memory,memory_ratio\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.kind.name(), r.params, r.params_ratio, r.memory, r.memory_ratio);
    }
    out
}

/// Largest number of activation elements alive at once while one
/// `64 x h x w` hypothesis runs through the matching net.
pub fn probe_matching_memory<T: Scalar>(net: &MatchingNet, store: &ParamStore<T>, h: usize, w: usize) -> Result<usize> {
    let x = Tensor::full(&[1, net.in_channels(), h, w], T::lit(0.1));
    let mut peak = 0;
    net.forward_eval(store, &x, Some(&mut peak))?;
    Ok(peak)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub bin_width: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bin_width: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub median: f64,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{:.6},{}", i as f64 * self.bin_width, c);
        }
        out
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(DiclError::Empty("median of nothing".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Counts over `[0, 1]`; the value 1 falls in the last bin.
pub fn dpeak_histogram(values: &[f64], spec: HistogramSpec) -> Result<Histogram> {
    if !(spec.bin_width > 0.0 && spec.bin_width <= 1.0) {
        return Err(DiclError::Config(format!("bin width must be in (0, 1], got {}", spec.bin_width)));
    }
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DiclError::Invalid(format!("d_peak value {bad} outside [0, 1]")));
    }
    let bins = (1.0 / spec.bin_width).round() as usize;
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[((v / spec.bin_width) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram { bin_width: spec.bin_width, counts, median: median(values)? })
}

/// Writes `kernel_XX.png` (row `XX` of the 49x49 weight as a min-max normalized
/// 7x7 image, white = high) for every hypothesis, and `dap_kernels.csv` with the raw rows.
pub fn dump_dap_kernels<T: Scalar>(weight: &Tensor<T>, dir: impl AsRef<Path>) -> Result<()> {
    let n = WINDOW * WINDOW;
    if weight.numel() != n * n {
        return Err(shape_err!("expected a {n} x {n} projection, got {:?}", weight.shape()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let w = weight.data();
    let mut csv = String::from("kernel");
    for j in 0..n {
        let _ = write!(csv, ",w{j}");
    }
    csv.push('\n');
    for k in 0..n {
        let row: Vec<f64> = w[k * n..(k + 1) * n].iter().map(|v| v.as_f64()).collect();
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let img = GrayImage::from_fn(WINDOW as u32, WINDOW as u32, |x, y| {
            let v = row[y as usize * WINDOW + x as usize];
            let g = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            Luma([(g * 255.0).round() as u8])
        });
        img.save(dir.join(format!("kernel_{k:02}.png")))?;
        let _ = write!(csv, "{k}");
        for v in &row {
            let _ = write!(csv, ",{v:?}");
        }
        csv.push('\n');
    }
    fs::write(dir.join("dap_kernels.csv"), csv)?;
    Ok(())
}

/// Parses `dap_kernels.csv` back into a 49x49 matrix.
pub fn read_dap_csv(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let n = WINDOW * WINDOW;
    let text = fs::read_to_string(path)?;
    let mut data = Vec::with_capacity(n * n);
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(DiclError::Format(format!("expected {} fields, got {}", n + 1, fields.len())));
        }
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|e| DiclError::Format(format!("bad value '{f}': {e}")))?);
        }
    }
    Tensor::from_vec(&[n, n], data)
}
