//! Binary checkpoints.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! b"DICLCKPT"  u32 version
//! str dtype    str config (TOML)
//! u64 n_params { str name, u32 rank, u64 dims[rank], f64 data[numel] }
//! u64 n_bn     { str name, u64 channels, f64 mean[channels], f64 var[channels] }
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8. Values are widened to f64,
//! so an f32 or f64 store reads back bit for bit.

use std::path::Path;

use crate::config::RunConfig;
use crate::diffcore::{BnId, ParamStore, Tensor};
use crate::error::{shape_err, DiclError, Result};
use crate::pyramidflow::FlowNet;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DICLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Scalar type the weights were trained in.
    pub dtype: String,
    pub config: RunConfig,
    pub params: ParamStore<f64>,
}

impl Checkpoint {
    /// The output directory is not recorded, so reruns into different directories
    /// produce identical files.
    pub fn new<T: Scalar>(config: &RunConfig, store: &ParamStore<T>) -> Self {
        let config = RunConfig { out_dir: RunConfig::default().out_dir, ..config.clone() };
        Self { dtype: T::DTYPE.to_string(), config, params: store.cast() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.dtype);
        put_str(&mut out, &self.config.to_toml());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out.extend_from_slice(&(self.params.bn_states().len() as u64).to_le_bytes());
        for (name, s) in self.params.bn_names().iter().zip(self.params.bn_states()) {
            put_str(&mut out, name);
            out.extend_from_slice(&(s.mean.len() as u64).to_le_bytes());
            put_f64s(&mut out, &s.mean);
            put_f64s(&mut out, &s.var);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DiclError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DiclError::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let dtype = r.str()?;
        let config = RunConfig::from_toml_str(&r.str()?)?;
        let mut params = ParamStore::new();
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            params.add(name, Tensor::from_vec(&shape, r.f64s(numel)?)?);
        }
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let c = r.u64()? as usize;
            let id = params.add_bn(name, c);
            let state = params.bn_state_mut(id);
            state.mean = r.f64s(c)?;
            state.var = r.f64s(c)?;
        }
        if r.pos != bytes.len() {
            return Err(DiclError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { dtype, config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Rebuilds the network described by the stored config and copies the weights in.
    pub fn into_model<T: Scalar>(&self) -> Result<FlowNet<T>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = FlowNet::new(self.config.model_config(), &mut rng);
        load_into(&mut model.store, &self.params)?;
        Ok(model)
    }
}

/// Overwrites every tensor and running statistic of `dst` with the one of the same
/// name in `src`. Both stores must hold exactly the same names and shapes.
pub fn load_into<T: Scalar>(dst: &mut ParamStore<T>, src: &ParamStore<f64>) -> Result<()> {
    if dst.names() != src.names() || dst.bn_names() != src.bn_names() {
        return Err(shape_err!("checkpoint parameters do not match the model layout"));
    }
    for (d, s) in dst.tensors_mut().iter_mut().zip(src.tensors()) {
        if d.shape() != s.shape() {
            return Err(shape_err!("parameter shape {:?} vs checkpoint {:?}", d.shape(), s.shape()));
        }
        *d = s.cast();
    }
    for (i, s) in src.bn_states().iter().enumerate() {
        let d = dst.bn_state_mut(BnId::new(i));
        if d.mean.len() != s.mean.len() {
            return Err(shape_err!("batch-norm width {} vs checkpoint {}", d.mean.len(), s.mean.len()));
        }
        d.mean = s.mean.iter().map(|&v| T::lit(v)).collect();
        d.var = s.var.iter().map(|&v| T::lit(v)).collect();
    }
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| DiclError::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| DiclError::Format(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| DiclError::Format("bad length".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselinecosts::CostHeadKind;
    use rand::{Rng, SeedableRng};

    fn random_model<T: Scalar>(head: CostHeadKind) -> (RunConfig, FlowNet<T>) {
        let cfg = RunConfig { head, ..RunConfig::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut model = FlowNet::<T>::new(cfg.model_config(), &mut rng);
        for i in 0..model.store.bn_states().len() {
            let s = model.store.bn_state_mut(BnId::new(i));
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = T::lit(rng.random::<f64>());
            }
        }
        (cfg, model)
    }

    #[test]
    fn roundtrip_is_bit_exact_f64() {
        let (cfg, model) = random_model::<f64>(CostHeadKind::Dicl);
        let ck = Checkpoint::new(&cfg, &model.store);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let rebuilt: FlowNet<f64> = back.into_model().unwrap();
        for (a, b) in rebuilt.store.tensors().iter().zip(model.store.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(rebuilt.store.bn_states(), model.store.bn_states());
    }

    #[test]
    fn roundtrip_is_bit_exact_f32() {
        let (cfg, model) = random_model::<f32>(CostHeadKind::Mlp3);
        let ck = Checkpoint::new(&cfg, &model.store);
        assert_eq!(ck.dtype, "f32");
        let rebuilt: FlowNet<f32> = Checkpoint::decode(&ck.encode()).unwrap().into_model().unwrap();
        assert_eq!(rebuilt.store, model.store);
    }

    #[test]
    fn rejects_corruption() {
        let (cfg, model) = random_model::<f64>(CostHeadKind::Dot);
        let bytes = Checkpoint::new(&cfg, &model.store).encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::decode(&bad), Err(DiclError::Format(m)) if m.contains("version")));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let (cfg, model) = random_model::<f64>(CostHeadKind::Dot);
        let mut ck = Checkpoint::new(&cfg, &model.store);
        ck.config.head = CostHeadKind::Mlp3;
        assert!(ck.into_model::<f64>().is_err());
    }
}
