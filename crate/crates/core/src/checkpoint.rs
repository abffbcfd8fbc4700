//! Model checkpoints. The byte layout is described in `FORMATS.md`.
//!
//! A checkpoint holds the networks followed by the optimizer state and loss
//! history, so a resumed run continues bit-for-bit.

use std::fs;
use std::path::Path;

use crate::cyclegan::{CycleGanModel, CycleGanTrainer};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Adam, ConvNetSpec, DiscriminatorNet, GeneratorNet, NetKind, ParamSet};
use crate::syndiff::{ModalityBranch, SynDiffModel, SynDiffTrainer};
use crate::training::EpochStats;

pub const SYND_MAGIC: &[u8; 4] = b"SYND";
pub const CGAN_MAGIC: &[u8; 4] = b"CGAN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    SynDiff(SynDiffTrainer),
    CycleGan(CycleGanTrainer),
}

impl Checkpoint {
    pub fn model_name(&self) -> &'static str {
        match self {
            Checkpoint::SynDiff(_) => "syndiff",
            Checkpoint::CycleGan(_) => "cyclegan",
        }
    }

    pub fn epoch(&self) -> usize {
        match self {
            Checkpoint::SynDiff(t) => t.epoch,
            Checkpoint::CycleGan(t) => t.epoch,
        }
    }

    pub fn history(&self) -> &[EpochStats] {
        match self {
            Checkpoint::SynDiff(t) => &t.history,
            Checkpoint::CycleGan(t) => &t.history,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len());
        for &v in vs {
            self.f64(v);
        }
    }

    fn spec(&mut self, s: &ConvNetSpec) {
        for v in
            [s.kind.code() as usize, s.base_channels, s.depth, s.time_embed_dim, s.input_channels, s.output_channels]
        {
            self.u32(v);
        }
    }

    fn params(&mut self, p: &ParamSet) {
        self.u32(p.segments().len());
        for seg in p.segments() {
            self.u32(seg.name.len());
            self.0.extend_from_slice(seg.name.as_bytes());
            self.u32(seg.shape.len());
            for &d in &seg.shape {
                self.u32(d);
            }
            let vals = p.slice(seg);
            self.u32(vals.len());
            for &v in vals {
                self.0.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }

    fn generator(&mut self, g: &GeneratorNet) {
        self.spec(&g.spec);
        self.params(&g.params);
    }

    fn discriminator(&mut self, d: &DiscriminatorNet) {
        self.spec(&d.spec);
        self.params(&d.params);
    }

    fn adam(&mut self, a: &Adam) {
        self.f64(a.beta1);
        self.f64(a.beta2);
        self.f64(a.eps);
        self.u64(a.step);
        self.f64s(&a.m);
        self.f64s(&a.v);
    }

    fn state(&mut self, epoch: usize, opts: &[Adam], history: &[EpochStats]) {
        self.u64(epoch as u64);
        self.u32(opts.len());
        for a in opts {
            self.adam(a);
        }
        self.u32(history.len());
        for s in history {
            self.u64(s.epoch as u64);
            self.u64(s.steps as u64);
            for v in [s.gen_loss_x, s.disc_loss_x, s.gen_loss_y, s.disc_loss_y, s.cycle_loss] {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn spec(&mut self) -> Result<ConvNetSpec> {
        let kind = self.u32()?;
        let kind =
            NetKind::from_code(kind as u32).ok_or_else(|| Error::Checkpoint(format!("unknown net kind {kind}")))?;
        let spec = ConvNetSpec {
            kind,
            base_channels: self.u32()?,
            depth: self.u32()?,
            time_embed_dim: self.u32()?,
            input_channels: self.u32()?,
            output_channels: self.u32()?,
        };
        spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(spec)
    }

    fn params(&mut self, spec: &ConvNetSpec) -> Result<ParamSet> {
        let layout = spec.layout();
        let mut p = ParamSet::zeros(&layout);
        if self.u32()? != layout.len() {
            return Err(Error::Checkpoint("segment count does not match spec".into()));
        }
        for (name, shape) in &layout {
            let len = self.u32()?;
            let got = std::str::from_utf8(self.take(len)?).map_err(|_| Error::Checkpoint("segment name".into()))?;
            if got != name {
                return Err(Error::Checkpoint(format!("expected segment {name}, found {got}")));
            }
            let ndim = self.u32()?;
            let dims = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Checkpoint(format!("segment {name} has shape {dims:?}, spec wants {shape:?}")));
            }
            let n = self.u32()?;
            if n != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("segment {name} holds {n} values")));
            }
            let raw = self.take(4 * n)?;
            let dst = p.slice_mut(name).unwrap();
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
        Ok(p)
    }

    fn generator(&mut self) -> Result<GeneratorNet> {
        let spec = self.spec()?;
        if spec.kind != NetKind::GeneratorUnet {
            return Err(Error::Checkpoint("expected a generator".into()));
        }
        let params = self.params(&spec)?;
        GeneratorNet::from_params(spec, params)
    }

    fn discriminator(&mut self) -> Result<DiscriminatorNet> {
        let spec = self.spec()?;
        if spec.kind != NetKind::DiscriminatorPatch {
            return Err(Error::Checkpoint("expected a discriminator".into()));
        }
        let params = self.params(&spec)?;
        DiscriminatorNet::from_params(spec, params)
    }

    fn adam(&mut self) -> Result<Adam> {
        Ok(Adam {
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
            step: self.u64()?,
            m: self.f64s()?,
            v: self.f64s()?,
        })
    }

    fn state(&mut self, lens: &[usize]) -> Result<(usize, Vec<Adam>, Vec<EpochStats>)> {
        let epoch = self.u64()? as usize;
        if self.u32()? != lens.len() {
            return Err(Error::Checkpoint("optimizer count".into()));
        }
        let mut opts = Vec::with_capacity(lens.len());
        for &n in lens {
            let a = self.adam()?;
            if a.m.len() != n || a.v.len() != n {
                return Err(Error::Checkpoint("optimizer state size does not match its network".into()));
            }
            opts.push(a);
        }
        let count = self.u32()?;
        let mut history = Vec::with_capacity(count);
        for _ in 0..count {
            let (epoch, steps) = (self.u64()? as usize, self.u64()? as usize);
            history.push(EpochStats {
                epoch,
                steps,
                gen_loss_x: self.f64()?,
                disc_loss_x: self.f64()?,
                gen_loss_y: self.f64()?,
                disc_loss_y: self.f64()?,
                cycle_loss: self.f64()?,
            });
        }
        Ok((epoch, opts, history))
    }
}

fn write_branch(w: &mut Writer, b: &ModalityBranch) {
    w.generator(&b.diff_gen);
    w.discriminator(&b.diff_disc);
    w.generator(&b.nd_gen);
    w.discriminator(&b.nd_disc);
}

fn read_branch(r: &mut Reader) -> Result<ModalityBranch> {
    Ok(ModalityBranch {
        diff_gen: r.generator()?,
        diff_disc: r.discriminator()?,
        nd_gen: r.generator()?,
        nd_disc: r.discriminator()?,
    })
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match ckpt {
        Checkpoint::SynDiff(t) => {
            let m = &t.model;
            w.0.extend_from_slice(SYND_MAGIC);
            w.u32(FORMAT_VERSION as usize);
            w.u32(m.schedule.steps());
            w.u32(m.schedule.stride());
            let (b0, b1) = m.schedule.beta_bounds();
            w.f64(b0);
            w.f64(b1);
            w.f64(m.lambda_cycle);
            w.f64(m.lambda_rec);
            write_branch(&mut w, &m.pet);
            write_branch(&mut w, &m.mri);
            w.state(t.epoch, &t.opt, &t.history);
        }
        Checkpoint::CycleGan(t) => {
            let m = &t.model;
            w.0.extend_from_slice(CGAN_MAGIC);
            w.u32(FORMAT_VERSION as usize);
            w.f64(m.lambda_cycle);
            w.generator(&m.gen_m2p);
            w.generator(&m.gen_p2m);
            w.discriminator(&m.disc_pet);
            w.discriminator(&m.disc_mri);
            w.state(t.epoch, &t.opt, &t.history);
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let ckpt = match &magic {
        SYND_MAGIC => {
            let (steps, stride) = (r.u32()?, r.u32()?);
            let (b0, b1) = (r.f64()?, r.f64()?);
            let schedule = NoiseSchedule::new(steps, stride, b0, b1).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let (lambda_cycle, lambda_rec) = (r.f64()?, r.f64()?);
            let (pet, mri) = (read_branch(&mut r)?, read_branch(&mut r)?);
            let model = SynDiffModel { schedule, pet, mri, lambda_cycle, lambda_rec };
            let lens: Vec<usize> = [&model.pet, &model.mri]
                .iter()
                .flat_map(|b| {
                    [b.diff_gen.params.len(), b.diff_disc.params.len(), b.nd_gen.params.len(), b.nd_disc.params.len()]
                })
                .collect();
            let (epoch, opt, history) = r.state(&lens)?;
            Checkpoint::SynDiff(SynDiffTrainer { model, opt, epoch, history })
        }
        CGAN_MAGIC => {
            let lambda_cycle = r.f64()?;
            let model = CycleGanModel {
                lambda_cycle,
                gen_m2p: r.generator()?,
                gen_p2m: r.generator()?,
                disc_pet: r.discriminator()?,
                disc_mri: r.discriminator()?,
            };
            let lens = [
                model.gen_m2p.params.len(),
                model.gen_p2m.params.len(),
                model.disc_pet.params.len(),
                model.disc_mri.params.len(),
            ];
            let (epoch, opt, history) = r.state(&lens)?;
            let opt: [Adam; 4] = opt.try_into().unwrap();
            Checkpoint::CycleGan(CycleGanTrainer { model, opt, epoch, history })
        }
        other => return Err(Error::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(other)))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ckpt)
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyclegan::NetSizes;
    use crate::imaging::{generate_phantom, PhantomConfig};
    use crate::syndiff::SynDiffSizes;
    use crate::training::{TrainConfig, UnpairedPools};

    fn tiny() -> NetSizes {
        NetSizes { gen_base: 4, gen_depth: 2, disc_base: 4, disc_depth: 2 }
    }

    fn pools() -> UnpairedPools {
        let s: Vec<_> = (0..2).map(|i| generate_phantom(i, &PhantomConfig::square(32)).unwrap()).collect();
        UnpairedPools::new(s.iter().map(|s| s.pet.clone()).collect(), s.iter().map(|s| s.mri.clone()).collect())
            .unwrap()
    }

    #[test]
    fn syndiff_round_trip_after_training() {
        let cfg = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        let sizes = SynDiffSizes { diffusive: tiny(), time_embed_dim: 8, translator: tiny() };
        let model = SynDiffModel::new(sizes, NoiseSchedule::new(20, 5, 1e-3, 0.2).unwrap(), 1).unwrap();
        let mut tr = SynDiffTrainer::new(model, &cfg);
        tr.train_epoch(&pools(), &cfg).unwrap();
        let ck = Checkpoint::SynDiff(tr);
        assert_eq!(decode(&encode(&ck)).unwrap(), ck);
    }

    #[test]
    fn cyclegan_round_trip_after_training() {
        let cfg = TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() };
        let mut tr = CycleGanTrainer::new(CycleGanModel::new(tiny(), 10.0, 2).unwrap(), &cfg);
        tr.train_epoch(&pools(), &cfg).unwrap();
        let ck = Checkpoint::CycleGan(tr);
        let bytes = encode(&ck);
        assert_eq!(&bytes[..4], CGAN_MAGIC);
        assert_eq!(decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let cfg = TrainConfig::default();
        let ck = Checkpoint::CycleGan(CycleGanTrainer::new(CycleGanModel::new(tiny(), 10.0, 2).unwrap(), &cfg));
        let bytes = encode(&ck);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(decode(&ver).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
