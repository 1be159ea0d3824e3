//! Binary checkpoint container.
//!
//! Little-endian throughout: magic `MSDC`, u32 version, model configuration,
//! step counter, RNG state, length-prefixed named parameter tensors (32-bit
//! payloads), Adam state, and batch-norm running statistics. Save -> load ->
//! save is byte-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use super::adam::AdamState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, Variant};
use crate::tensor::{RunningStats, Tensor};

const MAGIC: &[u8; 4] = b"MSDC";
const VERSION: u32 = 1;

/// Serializable ChaCha state (seed, block position, stream).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to reproduce a training trajectory from a given step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamSet<f32>,
    pub adam: AdamState,
    pub rng: RngState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 4096 {
            return Err(Error::CheckpointCorrupt(format!("name length {n}")));
        }
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("name is not utf-8".into()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Full => 0,
        Variant::SingleScale2d => 1,
        Variant::SingleScale3d => 2,
        Variant::SingleScaleBoth => 3,
    }
}

fn variant_from_code(c: u8) -> Result<Variant> {
    Ok(match c {
        0 => Variant::Full,
        1 => Variant::SingleScale2d,
        2 => Variant::SingleScale3d,
        3 => Variant::SingleScaleBoth,
        other => return Err(Error::CheckpointCorrupt(format!("variant code {other}"))),
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let c = &self.config;
        w.u32(c.base_channels as u32);
        w.u32(c.max_disparity as u32);
        w.u32(c.dense_block_depth as u32);
        w.u32(c.dense_groups as u32);
        w.u32(c.fusion_channels as u32);
        w.u32(c.levels_3d as u32);
        w.buf.push(variant_code(c.variant));
        w.u64(self.step);
        w.buf.extend_from_slice(&self.rng.seed);
        w.buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.rng.stream);

        w.u32(self.params.len() as u32);
        for p in self.params.params() {
            w.str(&p.name);
            w.u32(p.value.rank() as u32);
            for &d in p.value.shape() {
                w.u32(d as u32);
            }
            w.f32_slice(p.value.data());
        }

        w.u64(self.adam.t);
        w.f32(self.adam.lr);
        w.f32(self.adam.beta1);
        w.f32(self.adam.beta2);
        w.f32(self.adam.eps);
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            w.f32_slice(m.data());
            w.f32_slice(v.data());
        }

        let stats = self.params.running_stats();
        w.u32(stats.len() as u32);
        for (name, s) in stats {
            w.str(name);
            w.u32(s.mean.len() as u32);
            w.f32_slice(&s.mean);
            w.f32_slice(&s.var);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CheckpointBadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointBadVersion(version));
        }
        let base_channels = r.u32()? as usize;
        let max_disparity = r.u32()? as usize;
        let dense_block_depth = r.u32()? as usize;
        let dense_groups = r.u32()? as usize;
        let fusion_channels = r.u32()? as usize;
        let levels_3d = r.u32()? as usize;
        let variant = variant_from_code(r.take(1)?[0])?;
        let config = ModelConfig {
            base_channels,
            max_disparity,
            dense_block_depth,
            dense_groups,
            fusion_channels,
            levels_3d,
            variant,
        };
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = r.u64()?;
        let rng = RngState { seed, word_pos, stream };

        let n_params = r.u32()? as usize;
        if n_params > 1_000_000 {
            return Err(Error::CheckpointCorrupt(format!("{n_params} parameters")));
        }
        let mut raw_params = Vec::with_capacity(n_params);
        let mut shapes = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CheckpointCorrupt(format!("tensor rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel == 0 || numel > 256_000_000 {
                return Err(Error::CheckpointCorrupt(format!("tensor shape {shape:?}")));
            }
            let data = r.f32_vec(numel)?;
            raw_params.push((
                name,
                Tensor::new(&shape, data)
                    .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?,
            ));
            shapes.push(shape);
        }

        let t = r.u64()?;
        let lr = r.f32()?;
        let beta1 = r.f32()?;
        let beta2 = r.f32()?;
        let eps = r.f32()?;
        let mut m = Vec::with_capacity(n_params);
        let mut v = Vec::with_capacity(n_params);
        for shape in &shapes {
            let numel: usize = shape.iter().product();
            m.push(Tensor::new(shape, r.f32_vec(numel)?).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?);
            v.push(Tensor::new(shape, r.f32_vec(numel)?).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?);
        }
        let adam = AdamState { t, lr, beta1, beta2, eps, m, v };

        let n_stats = r.u32()? as usize;
        if n_stats > 1_000_000 {
            return Err(Error::CheckpointCorrupt(format!("{n_stats} stat buffers")));
        }
        let mut stats = Vec::with_capacity(n_stats);
        for _ in 0..n_stats {
            let name = r.str()?;
            let channels = r.u32()? as usize;
            if channels == 0 || channels > 1_000_000 {
                return Err(Error::CheckpointCorrupt(format!("{channels} channels")));
            }
            let mean = r.f32_vec(channels)?;
            let var = r.f32_vec(channels)?;
            stats.push((name, RunningStats { mean, var }));
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            step,
            params: ParamSet::from_parts(raw_params, stats),
            adam,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MsdcNet;

    fn sample_checkpoint() -> Checkpoint {
        let config = ModelConfig::new(4, 8).with_levels_3d(2);
        let net = MsdcNet::new(&config).unwrap();
        let params: ParamSet<f32> = net.init_params(21).unwrap();
        let adam = AdamState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        use rand::Rng;
        let _: f64 = rng.random(); // advance the position
        Checkpoint {
            config,
            step: 17,
            params,
            adam,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, back.to_bytes());
        assert_eq!(back.step, 17);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.rng, ck.rng);
    }

    #[test]
    fn rng_state_restores_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(7);
        let _: [f64; 3] = rng.random();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = restored.random();
        assert_eq!(a, b);
    }

    #[test]
    fn flipped_magic_is_bad_magic() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[0] ^= 0xFF;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointBadMagic)
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointBadVersion(99))
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample_checkpoint().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::CheckpointTruncated)
        ));
    }
}
