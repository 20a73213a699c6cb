//! `TSEGCKPT` checkpoint container (little-endian).
//!
//! ```text
//! magic "TSEGCKPT" | u32 version
//! u32 name_len | name bytes (UTF-8)
//! u32 input_channels | u32 n_layers
//! n_layers x (u32 out_channels, u32 kernel, u8 activation: 0 none, 1 relu)
//! u64 seed | u32 epochs | f64 final_train_loss | f64 eval_miou
//! u32 n_tensors
//! n_tensors x (u32 rank, rank x u32 dims, f32 values)
//! ```
//! Tensors alternate kernel, bias per layer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Checkpoint, LayerParams, LayerSpec, ModelSpec, Parameters, TrainMeta};
use crate::error::{Error, Result};
use crate::synthdata::format::read_exact_or;
use crate::tensorcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.check(&ckpt.spec)?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let name = ckpt.spec.name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(ckpt.spec.input_channels as u32).to_le_bytes())?;
    w.write_all(&(ckpt.spec.layers.len() as u32).to_le_bytes())?;
    for l in &ckpt.spec.layers {
        w.write_all(&(l.out_channels as u32).to_le_bytes())?;
        w.write_all(&(l.kernel as u32).to_le_bytes())?;
        w.write_all(&[match l.activation {
            Activation::None => 0u8,
            Activation::Relu => 1u8,
        }])?;
    }
    w.write_all(&ckpt.meta.seed.to_le_bytes())?;
    w.write_all(&ckpt.meta.epochs.to_le_bytes())?;
    w.write_all(&ckpt.meta.final_train_loss.to_le_bytes())?;
    w.write_all(&ckpt.meta.eval_miou.to_le_bytes())?;
    let tensors: Vec<&Tensor> = ckpt.params.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        read_exact_or(&mut self.r, &mut b, self.path, || what.to_string())?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn vec(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        read_exact_or(&mut self.r, &mut b, self.path, || what.to_string())?;
        Ok(b)
    }
}

const MAX_REASONABLE: u32 = 1 << 24;

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut r = Reader {
        r: BufReader::new(File::open(path)?),
        path,
    };
    if &r.bytes::<8>("magic")? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TSEGCKPT",
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let corrupt = |m: String| Error::Input(format!("{}: {m}", path.display()));
    let name_len = r.u32("name length")?;
    if name_len > 4096 {
        return Err(corrupt(format!("implausible name length {name_len}")));
    }
    let name =
        String::from_utf8(r.vec(name_len as usize, "name")?).map_err(|_| corrupt("model name is not UTF-8".into()))?;
    let input_channels = r.u32("input channels")? as usize;
    let n_layers = r.u32("layer count")?;
    if n_layers > 1024 {
        return Err(corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers as usize);
    for i in 0..n_layers {
        let out_channels = r.u32(&format!("layer {i}"))? as usize;
        let kernel = r.u32(&format!("layer {i}"))? as usize;
        let activation = match r.bytes::<1>(&format!("layer {i}"))?[0] {
            0 => Activation::None,
            1 => Activation::Relu,
            other => return Err(corrupt(format!("layer {i} has unknown activation tag {other}"))),
        };
        layers.push(LayerSpec {
            out_channels,
            kernel,
            activation,
        });
    }
    let spec = ModelSpec {
        name,
        input_channels,
        layers,
    };
    spec.validate()?;
    let meta = TrainMeta {
        seed: r.u64("metadata")?,
        epochs: r.u32("metadata")?,
        final_train_loss: r.f64("metadata")?,
        eval_miou: r.f64("metadata")?,
    };
    let n_tensors = r.u32("tensor count")?;
    let expected = spec.param_shapes();
    if n_tensors as usize != 2 * expected.len() {
        return Err(Error::shape(
            "load_checkpoint",
            format!("{n_tensors} tensors stored, spec needs {}", 2 * expected.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(n_tensors as usize);
    for t in 0..n_tensors {
        let what = format!("tensor {t}");
        let rank = r.u32(&what)?;
        if rank == 0 || rank > 8 {
            return Err(corrupt(format!("tensor {t} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r.u32(&what)?;
            if d == 0 || d > MAX_REASONABLE {
                return Err(corrupt(format!("tensor {t} has dimension {d}")));
            }
            dims.push(d as usize);
        }
        let (k, b) = &expected[t as usize / 2];
        let want: Vec<usize> = if t % 2 == 0 { k.to_vec() } else { vec![*b] };
        if dims != want {
            return Err(Error::shape(
                "load_checkpoint",
                format!("tensor {t} stored as {dims:?}, spec needs {want:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.vec(n * 4, &what)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    let mut it = tensors.into_iter();
    let mut layers = Vec::new();
    while let (Some(kernel), Some(bias)) = (it.next(), it.next()) {
        layers.push(LayerParams { kernel, bias });
    }
    Ok(Checkpoint {
        spec,
        params: Parameters { layers },
        meta,
    })
}
