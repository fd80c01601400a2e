//! Versioned binary container for named arrays.
//!
//! Layout (little endian): magic `CROMOARR`, format version `u32`, config
//! hash (length-prefixed UTF-8), metadata (length-prefixed UTF-8, usually
//! JSON), entry count `u32`, then per entry: name (length-prefixed), dtype
//! tag `u8` (0 = f64, 1 = u8, 2 = i64), rank `u32`, dims as `u64`, data.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CROMOARR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 0,
            ArrayData::U8(_) => 1,
            ArrayData::I64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config_hash: String,
    pub metadata: String,
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u64::<LE>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u64::<LE>().map_err(|e| bad(e.to_string()))? as usize;
    if n > 1 << 30 {
        return Err(bad("string length out of range"));
    }
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(|e| bad(e.to_string()))?;
    String::from_utf8(buf).map_err(|_| bad("invalid UTF-8 in string"))
}

impl Container {
    pub fn new(config_hash: impl Into<String>, metadata: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            metadata: metadata.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Entry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| bad(format!("missing entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_to(&mut w).expect("in-memory write");
        w
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        write_str(w, &self.config_hash)?;
        write_str(w, &self.metadata)?;
        w.write_u32::<LE>(self.entries.len() as u32)?;
        for e in &self.entries {
            write_str(w, &e.name)?;
            w.write_u8(e.data.tag())?;
            w.write_u32::<LE>(e.shape.len() as u32)?;
            for &d in &e.shape {
                w.write_u64::<LE>(d as u64)?;
            }
            match &e.data {
                ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_f64::<LE>(*x))?,
                ArrayData::U8(v) => w.write_all(v)?,
                ArrayData::I64(v) => v.iter().try_for_each(|x| w.write_i64::<LE>(*x))?,
            }
        }
        Ok(())
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| bad(format!("truncated header: {e}")))?;
        if &magic != MAGIC {
            return Err(bad("not a container file (bad magic)"));
        }
        let version = r.read_u32::<LE>().map_err(|e| bad(e.to_string()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let config_hash = read_str(r)?;
        let metadata = read_str(r)?;
        let count = r.read_u32::<LE>().map_err(|e| bad(e.to_string()))?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(r)?;
            let tag = r.read_u8().map_err(|e| bad(e.to_string()))?;
            let rank = r.read_u32::<LE>().map_err(|e| bad(e.to_string()))?;
            if rank > 8 {
                return Err(bad(format!("entry `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.read_u64::<LE>().map_err(|e| bad(e.to_string()))? as usize);
            }
            let n: usize = shape.iter().product();
            let io = |e: std::io::Error| bad(format!("entry `{name}`: {e}"));
            let data = match tag {
                0 => {
                    let mut v = vec![0.0; n];
                    r.read_f64_into::<LE>(&mut v).map_err(io)?;
                    ArrayData::F64(v)
                }
                1 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v).map_err(io)?;
                    ArrayData::U8(v)
                }
                2 => {
                    let mut v = vec![0i64; n];
                    r.read_i64_into::<LE>(&mut v).map_err(io)?;
                    ArrayData::I64(v)
                }
                t => return Err(bad(format!("entry `{name}` has unknown dtype tag {t}"))),
            };
            entries.push(Entry { name, shape, data });
        }
        Ok(Self {
            config_hash,
            metadata,
            entries,
        })
    }

    /// Write atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            self.write_to(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(&mut BufReader::new(f))
    }
}
