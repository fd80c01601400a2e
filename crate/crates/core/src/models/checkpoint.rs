use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::trinet::TriNet;
use crate::autodiff::Mat;
use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};

const PARAM_PREFIX: &str = "param/";

/// Container holding every tensor of `net` under `param/<name>`.
pub fn trinet_container(net: &TriNet, config_hash: &str, metadata: &str) -> Container {
    let mut c = Container::new(config_hash, metadata);
    for (_, e) in net.store.iter() {
        c.push(
            format!("{PARAM_PREFIX}{}", e.name),
            vec![e.value.nrows(), e.value.ncols()],
            ArrayData::F64(e.value.iter().copied().collect()),
        );
    }
    c
}

pub fn save_checkpoint(net: &TriNet, path: &Path, config_hash: &str, metadata: &str) -> Result<()> {
    trinet_container(net, config_hash, metadata).save(path)
}

/// Overwrite `net`'s tensors with those stored in `c`. The container must
/// hold exactly the same names and shapes.
pub fn load_into(net: &mut TriNet, c: &Container) -> Result<()> {
    let stored = c
        .entries
        .iter()
        .filter(|e| e.name.starts_with(PARAM_PREFIX))
        .count();
    if stored != net.store.len() {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has {stored} tensors, network has {}",
            net.store.len()
        )));
    }
    for (_, e) in net.store.iter_mut() {
        let key = format!("{PARAM_PREFIX}{}", e.name);
        let entry = c.get(&key).ok_or_else(|| {
            Error::Checkpoint(format!("architecture mismatch: missing `{}`", e.name))
        })?;
        let shape = vec![e.value.nrows(), e.value.ncols()];
        if entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: `{}` is {:?} in the checkpoint, {:?} in the network",
                e.name, entry.shape, shape
            )));
        }
        let ArrayData::F64(v) = &entry.data else {
            return Err(Error::Checkpoint(format!("`{}` is not f64", e.name)));
        };
        e.value = Mat::from_shape_vec((shape[0], shape[1]), v.clone()).expect("shape checked");
    }
    Ok(())
}

/// Load a checkpoint file into `net`, returning the stored config hash and
/// metadata.
pub fn load_checkpoint(net: &mut TriNet, path: &Path) -> Result<(String, String)> {
    let c = Container::load(path)?;
    load_into(net, &c)?;
    Ok((c.config_hash, c.metadata))
}

const EMBED_MAGIC: &[u8; 8] = b"CROMOEMB";
const DTYPE_F32: u8 = 1;

/// Embedding matrix with per-row labels and task ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub rows: Mat,
    pub labels: Vec<i64>,
    pub task_ids: Vec<i64>,
}

impl EmbeddingDump {
    /// Header `magic, N: u64, D: u64, dtype: u8`, then `N x D` row-major
    /// `f32`, then `N` labels and `N` task ids as `i64`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let (n, d) = self.rows.dim();
        if self.labels.len() != n || self.task_ids.len() != n {
            return Err(Error::Shape(
                "labels and task ids must have one entry per row".into(),
            ));
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let res: std::io::Result<()> = (|| {
            w.write_all(EMBED_MAGIC)?;
            w.write_u64::<LE>(n as u64)?;
            w.write_u64::<LE>(d as u64)?;
            w.write_u8(DTYPE_F32)?;
            for v in self.rows.iter() {
                w.write_f32::<LE>(*v as f32)?;
            }
            for v in self.labels.iter().chain(&self.task_ids) {
                w.write_i64::<LE>(*v)?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != EMBED_MAGIC {
            return Err(bad("not an embedding dump".into()));
        }
        let n = f.read_u64::<LE>().map_err(|e| bad(e.to_string()))? as usize;
        let d = f.read_u64::<LE>().map_err(|e| bad(e.to_string()))? as usize;
        let dtype = f.read_u8().map_err(|e| bad(e.to_string()))?;
        if dtype != DTYPE_F32 {
            return Err(bad(format!("unsupported dtype {dtype}")));
        }
        let mut vals = vec![0f32; n * d];
        f.read_f32_into::<LE>(&mut vals)
            .map_err(|e| bad(e.to_string()))?;
        let mut ids = vec![0i64; 2 * n];
        f.read_i64_into::<LE>(&mut ids)
            .map_err(|e| bad(e.to_string()))?;
        let task_ids = ids.split_off(n);
        Ok(Self {
            rows: Mat::from_shape_vec((n, d), vals.into_iter().map(f64::from).collect())
                .expect("sized"),
            labels: ids,
            task_ids,
        })
    }
}
