//! Binary gradient dump.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "DINFGRD1"
//! header_len       u32
//! header           header_len bytes of UTF-8 JSON:
//!                  {"version":1,"n_train":..,"n_query":..,
//!                   "layers":[{"name":..,"dim":..}],
//!                   "factored":bool,"factor_dims":[[a,b],..]}
//! per layer, in header order:
//!   train          n_train × dim  f32, row-major
//!   query          n_query × dim  f32, row-major
//!   activations    n_train × a    f32   (factored only)
//!   preact_grads   n_train × b    f32   (factored only)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    validate_layer_specs, Block, FactorPair, FactoredGradients, GradientStore, LayerSpec,
    RowMatrix, StoreError,
};

pub const MAGIC: &[u8; 8] = b"DINFGRD1";
const VERSION: u64 = 1;
const MAX_HEADER_LEN: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub version: u64,
    pub n_train: usize,
    pub n_query: usize,
    pub layers: Vec<LayerHeader>,
    pub factored: bool,
    #[serde(default)]
    pub factor_dims: Vec<[usize; 2]>,
}

impl DumpHeader {
    fn for_store(store: &GradientStore, factored: Option<&FactoredGradients>) -> Self {
        Self {
            version: VERSION,
            n_train: store.n_train(),
            n_query: store.n_query(),
            layers: store
                .layers()
                .iter()
                .map(|l| LayerHeader {
                    name: l.name.clone(),
                    dim: l.dim,
                })
                .collect(),
            factored: factored.is_some(),
            factor_dims: factored
                .map(|f| f.factor_dims().into_iter().map(|(a, b)| [a, b]).collect())
                .unwrap_or_default(),
        }
    }

    /// Number of payload bytes the header promises.
    pub fn payload_len(&self) -> u64 {
        let mut floats: u64 = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            floats += ((self.n_train + self.n_query) * layer.dim) as u64;
            if self.factored {
                if let Some([a, b]) = self.factor_dims.get(l) {
                    floats += (self.n_train * (a + b)) as u64;
                }
            }
        }
        floats * 4
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| LayerSpec::new(l.name.clone(), l.dim))
            .collect()
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.version != VERSION {
            return Err(StoreError::UnsupportedVersion(self.version));
        }
        if self.layers.is_empty() || self.n_train == 0 || self.n_query == 0 {
            return Err(StoreError::EmptyStore);
        }
        validate_layer_specs(&self.layer_specs())?;
        if self.factored {
            if self.factor_dims.len() != self.layers.len() {
                return Err(StoreError::InvalidHeader(format!(
                    "{} factor_dims entries for {} layers",
                    self.factor_dims.len(),
                    self.layers.len()
                )));
            }
            for (layer, [a, b]) in self.layers.iter().zip(&self.factor_dims) {
                if a * b != layer.dim || *a == 0 {
                    return Err(StoreError::ShapeMismatch {
                        layer: layer.name.clone(),
                        detail: format!("factor dims {a}x{b} do not multiply to {}", layer.dim),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Reads only the header of a dump.
pub fn read_header<R: Read>(reader: &mut R) -> Result<DumpHeader, StoreError> {
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_HEADER_LEN {
        return Err(StoreError::InvalidHeader(format!("header length {len} too large")));
    }
    let mut buf = vec![0u8; len as usize];
    reader.read_exact(&mut buf)?;
    let header: DumpHeader =
        serde_json::from_slice(&buf).map_err(|e| StoreError::InvalidHeader(e.to_string()))?;
    Ok(header)
}

pub fn inspect_dump(path: impl AsRef<Path>) -> Result<DumpHeader, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

/// Reads a dump from any reader. `available` is the total byte length when
/// known; it lets a corrupt header be rejected before allocating its blocks.
pub fn read_dump<R: Read>(
    reader: &mut R,
    available: Option<u64>,
) -> Result<(GradientStore, Option<FactoredGradients>), StoreError> {
    let header = read_header(reader)?;
    header.check()?;
    if let Some(total) = available {
        let want = header.payload_len();
        if want > total {
            return Err(StoreError::ShapeMismatch {
                layer: "<dump>".into(),
                detail: format!("header promises {want} payload bytes but file has {total}"),
            });
        }
    }

    let mut train = Vec::with_capacity(header.layers.len());
    let mut query = Vec::with_capacity(header.layers.len());
    let mut factors = Vec::new();
    for (l, layer) in header.layers.iter().enumerate() {
        train.push(read_block(reader, header.n_train, layer, l, Block::Train)?);
        query.push(read_block(reader, header.n_query, layer, l, Block::Query)?);
        if header.factored {
            let [a, b] = header.factor_dims[l];
            let spec = LayerHeader {
                name: layer.name.clone(),
                dim: a,
            };
            let activations = read_block(reader, header.n_train, &spec, l, Block::Activations)?;
            let spec = LayerHeader {
                name: layer.name.clone(),
                dim: b,
            };
            let preact_grads = read_block(reader, header.n_train, &spec, l, Block::PreactGrads)?;
            factors.push(FactorPair {
                activations,
                preact_grads,
            });
        }
    }
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(StoreError::ShapeMismatch {
            layer: "<dump>".into(),
            detail: "trailing bytes after the last declared block".into(),
        });
    }

    let store = GradientStore::new(header.layer_specs(), train, query)?;
    let factored = if header.factored {
        Some(FactoredGradients::new(&store, factors)?)
    } else {
        None
    };
    Ok((store, factored))
}

fn read_block<R: Read>(
    reader: &mut R,
    rows: usize,
    layer: &LayerHeader,
    index: usize,
    block: Block,
) -> Result<RowMatrix, StoreError> {
    let cols = layer.dim;
    let mut bytes = vec![0u8; rows * cols * 4];
    reader.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            StoreError::ShapeMismatch {
                layer: layer.name.clone(),
                detail: format!("{block} block truncated, expected {rows}x{cols} values"),
            }
        } else {
            StoreError::Io(e)
        }
    })?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(p) = data.iter().position(|x| !x.is_finite()) {
        return Err(StoreError::NonFiniteValue {
            layer: index,
            block,
            row: p / cols,
            col: p % cols,
        });
    }
    Ok(RowMatrix::from_vec(rows, cols, data))
}

pub fn load_dump(
    path: impl AsRef<Path>,
) -> Result<(GradientStore, Option<FactoredGradients>), StoreError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut reader = BufReader::new(file);
    read_dump(&mut reader, Some(len))
}

/// Writes `store` (and optionally its factors). Values are narrowed to
/// `f32`; a value that overflows `f32` is rejected as non-finite.
pub fn write_dump<W: Write>(
    writer: &mut W,
    store: &GradientStore,
    factored: Option<&FactoredGradients>,
) -> Result<(), StoreError> {
    store.validate()?;
    if let Some(f) = factored {
        f.check_shapes(store)?;
    }
    let header = DumpHeader::for_store(store, factored);
    let json = serde_json::to_vec(&header).map_err(|e| StoreError::InvalidHeader(e.to_string()))?;
    let len = u32::try_from(json.len())
        .ok()
        .filter(|&l| l <= MAX_HEADER_LEN)
        .ok_or_else(|| StoreError::InvalidHeader("header too large".into()))?;

    writer.write_all(MAGIC)?;
    writer.write_all(&len.to_le_bytes())?;
    writer.write_all(&json)?;
    for l in 0..store.num_layers() {
        write_block(writer, store.train(l), l, Block::Train)?;
        write_block(writer, store.query(l), l, Block::Query)?;
        if let Some(f) = factored {
            let pair = f.layer(l);
            write_block(writer, &pair.activations, l, Block::Activations)?;
            write_block(writer, &pair.preact_grads, l, Block::PreactGrads)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn write_block<W: Write>(
    writer: &mut W,
    m: &RowMatrix,
    layer: usize,
    block: Block,
) -> Result<(), StoreError> {
    let mut buf = Vec::with_capacity(m.as_slice().len() * 4);
    for (p, &x) in m.as_slice().iter().enumerate() {
        let y = x as f32;
        if !y.is_finite() {
            return Err(StoreError::NonFiniteValue {
                layer,
                block,
                row: p / m.cols(),
                col: p % m.cols(),
            });
        }
        buf.extend_from_slice(&y.to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

pub fn save_dump(
    store: &GradientStore,
    factored: Option<&FactoredGradients>,
    path: impl AsRef<Path>,
) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    write_dump(&mut buf, store, factored)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_store() -> GradientStore {
        GradientStore::new(
            vec![LayerSpec::new("layer0", 2)],
            vec![RowMatrix::from_rows(&[[1.0, -0.5], [0.25, 2.0]])],
            vec![RowMatrix::from_rows(&[[0.5, 0.5]])],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_small_store() {
        let s = small_store();
        let mut buf = Vec::new();
        write_dump(&mut buf, &s, None).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let (back, f) = read_dump(&mut buf.as_slice(), Some(buf.len() as u64)).unwrap();
        assert!(f.is_none());
        assert_eq!(back, s);
        assert_eq!((back.n_train(), back.n_query(), back.dim(0)), (2, 1, 2));
    }

    #[test]
    fn header_json_layout() {
        let s = small_store();
        let mut buf = Vec::new();
        write_dump(&mut buf, &s, None).unwrap();
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&buf[12..12 + len]).unwrap();
        assert_eq!(
            json,
            r#"{"version":1,"n_train":2,"n_query":1,"layers":[{"name":"layer0","dim":2}],"factored":false,"factor_dims":[]}"#
        );
        assert_eq!(buf.len(), 12 + len + 4 * (2 * 2 + 2));
        // First train value, little-endian f32.
        assert_eq!(&buf[12 + len..12 + len + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut buf = b"XXXXXXXX".to_vec();
        buf.extend_from_slice(&[0; 16]);
        assert!(matches!(
            read_dump(&mut buf.as_slice(), None),
            Err(StoreError::BadMagic { .. })
        ));
    }

    #[test]
    fn unsupported_version() {
        let json = br#"{"version":2,"n_train":1,"n_query":1,"layers":[{"name":"a","dim":1}],"factored":false}"#;
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(json);
        buf.extend_from_slice(&[0; 8]);
        assert!(matches!(
            read_dump(&mut buf.as_slice(), None),
            Err(StoreError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn nan_reports_layer_and_row() {
        let mut train = RowMatrix::zeros(5, 2);
        train.row_mut(3)[0] = 1.0;
        let s = GradientStore::new(
            vec![LayerSpec::new("a", 2)],
            vec![train],
            vec![RowMatrix::zeros(1, 2)],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_dump(&mut buf, &s, None).unwrap();
        // Overwrite row 3, column 0 of the train block with a NaN.
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let off = 12 + len + 4 * (3 * 2);
        buf[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = read_dump(&mut buf.as_slice(), None).unwrap_err();
        assert!(matches!(
            err,
            StoreError::NonFiniteValue { layer: 0, block: Block::Train, row: 3, col: 0 }
        ));
    }

    #[test]
    fn truncated_and_trailing() {
        let s = small_store();
        let mut buf = Vec::new();
        write_dump(&mut buf, &s, None).unwrap();
        let mut short = &buf[..buf.len() - 2];
        assert!(matches!(
            read_dump(&mut &short[..], None),
            Err(StoreError::ShapeMismatch { .. })
        ));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(
            read_dump(&mut long.as_slice(), None),
            Err(StoreError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            read_dump(&mut short, Some(20)),
            Err(StoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn f32_overflow_rejected_on_write() {
        let s = GradientStore::new(
            vec![LayerSpec::new("a", 1)],
            vec![RowMatrix::from_rows(&[[1e300]])],
            vec![RowMatrix::from_rows(&[[1.0]])],
        )
        .unwrap();
        let mut buf = Vec::new();
        assert!(matches!(
            write_dump(&mut buf, &s, None),
            Err(StoreError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn factored_round_trip_sets_flag() {
        let h = RowMatrix::from_rows(&[[1.0, 2.0], [0.5, -1.0]]);
        let g = RowMatrix::from_rows(&[[3.0], [4.0]]);
        let train = RowMatrix::from_rows(&[[3.0, 6.0], [2.0, -4.0]]);
        let s = GradientStore::new(
            vec![LayerSpec::new("fc", 2)],
            vec![train],
            vec![RowMatrix::from_rows(&[[1.0, 1.0]])],
        )
        .unwrap();
        let f = FactoredGradients::new(
            &s,
            vec![FactorPair {
                activations: h,
                preact_grads: g,
            }],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_dump(&mut buf, &s, Some(&f)).unwrap();
        let len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let header: DumpHeader = serde_json::from_slice(&buf[12..12 + len]).unwrap();
        assert!(header.factored);
        assert_eq!(header.factor_dims, vec![[2, 1]]);
        let (s2, f2) = read_dump(&mut buf.as_slice(), None).unwrap();
        assert_eq!(s2, s);
        assert_eq!(f2.unwrap(), f);
    }
}
