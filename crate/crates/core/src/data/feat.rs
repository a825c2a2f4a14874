//! FEAT: the bit-exact on-disk format for paired feature datasets.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic  b"FEAT"
//! version u32 (= 1)
//! n_records u32
//! per record:
//!   pair_id u64
//!   class_label u32
//!   image dims u32 × 3 (H, W, f), then H·W·f f32 values
//!   modality u8 (0 audio, 1 text, 2 fused)
//!   T u32, f_a u32, then T·f_a f32 frame values
//!   unit-ids-present u8 (0/1), then T u32 ids when present
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoders::{FeatureSequence, Modality};
use crate::tensor::Tensor;

use super::{DataError, PairedDataset, PairedRecord, Result};

const MAGIC: &[u8; 4] = b"FEAT";
const VERSION: u32 = 1;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(DataError::Truncated { offset: at, what })
            }
            Err(e) => Err(DataError::Io {
                path: "<stream>".into(),
                source: e,
            }),
        }
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_feature_file(dataset: &PairedDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };
    put(&mut w, MAGIC)?;
    put(&mut w, &VERSION.to_le_bytes())?;
    put(&mut w, &(dataset.len() as u32).to_le_bytes())?;
    for r in &dataset.records {
        put(&mut w, &r.pair_id.to_le_bytes())?;
        put(&mut w, &r.class_label.to_le_bytes())?;
        let s = r.image.shape();
        for d in s {
            put(&mut w, &(*d as u32).to_le_bytes())?;
        }
        for v in r.image.data() {
            put(&mut w, &v.to_le_bytes())?;
        }
        put(&mut w, &[r.language.modality.as_u8()])?;
        put(&mut w, &(r.language.len() as u32).to_le_bytes())?;
        put(&mut w, &(r.language.feat_dim() as u32).to_le_bytes())?;
        for v in r.language.frames.data() {
            put(&mut w, &v.to_le_bytes())?;
        }
        match &r.language.unit_ids {
            Some(ids) => {
                put(&mut w, &[1u8])?;
                for id in ids {
                    put(&mut w, &id.to_le_bytes())?;
                }
            }
            None => put(&mut w, &[0u8])?,
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<PairedDataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DataError::Version { found: version });
    }
    let n_records = r.u32("record count")? as usize;

    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let pair_id = r.u64("pair id")?;
        let class_label = r.u32("class label")?;
        let (h, w, f) = (
            r.u32("image height")? as usize,
            r.u32("image width")? as usize,
            r.u32("image channels")? as usize,
        );
        let at = r.offset;
        if h == 0 || w == 0 || f == 0 || h.saturating_mul(w).saturating_mul(f) > (1 << 28) {
            return Err(DataError::Malformed {
                offset: at,
                what: format!("implausible image dims {h}x{w}x{f}"),
            });
        }
        let image_data = r.f32s(h * w * f, "image data")?;
        let image = Tensor::new(image_data, vec![h, w, f]).map_err(|e| DataError::Malformed {
            offset: at,
            what: e.to_string(),
        })?;
        let modality_byte = r.u8("modality")?;
        let at = r.offset;
        let modality = Modality::from_u8(modality_byte).ok_or_else(|| DataError::Malformed {
            offset: at - 1,
            what: format!("unknown modality {modality_byte}"),
        })?;
        let t = r.u32("sequence length")? as usize;
        let f_a = r.u32("frame dim")? as usize;
        let at = r.offset;
        if t == 0 || f_a == 0 || t.saturating_mul(f_a) > (1 << 28) {
            return Err(DataError::Malformed {
                offset: at,
                what: format!("implausible sequence dims {t}x{f_a}"),
            });
        }
        let frames_data = r.f32s(t * f_a, "frame data")?;
        let frames = Tensor::new(frames_data, vec![t, f_a]).map_err(|e| DataError::Malformed {
            offset: at,
            what: e.to_string(),
        })?;
        let ids_present = r.u8("unit-ids flag")?;
        let unit_ids = match ids_present {
            0 => None,
            1 => {
                let mut ids = Vec::with_capacity(t);
                for _ in 0..t {
                    ids.push(r.u32("unit id")?);
                }
                Some(ids)
            }
            other => {
                return Err(DataError::Malformed {
                    offset: r.offset - 1,
                    what: format!("unit-ids flag must be 0 or 1, got {other}"),
                })
            }
        };
        let at = r.offset;
        let language =
            FeatureSequence::new(modality, frames, unit_ids).map_err(|e| DataError::Malformed {
                offset: at,
                what: e.to_string(),
            })?;
        records.push(PairedRecord {
            pair_id,
            class_label,
            image,
            language,
        });
    }

    // Anything after the last record is a format violation.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe).map_err(|e| io_err(path, e))? != 0 {
        return Err(DataError::Malformed {
            offset: r.offset,
            what: "trailing bytes after final record".into(),
        });
    }

    PairedDataset::new(records)
}
