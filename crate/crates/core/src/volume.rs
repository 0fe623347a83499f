//! Volumetric image container and its on-disk format.
//!
//! A [`Volume`] is a dense z-major stack of axial slices holding non-negative
//! finite activities, together with voxel spacing and a free-form string
//! metadata map. Files use the little-endian `CDNVOL1` container:
//!
//! ```text
//! magic    8 bytes   "CDNVOL1\0"
//! shape    3 × u32   nz, ny, nx
//! spacing  3 × f64   dz, dy, dx
//! meta_len u32       byte length of the metadata block
//! meta     UTF-8     JSON object, string keys to string values
//! payload  nz·ny·nx × f32, z-major (slice, then row, then column)
//! ```
//!
//! Payload round trips are bit-exact: values live as `f32` in memory and on
//! disk. All arithmetic elsewhere in the crate lifts to `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CDNVOL1\0";

/// Dense 3-D image, shape `(nz, ny, nx)`, plus spacing and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel edge lengths `(dz, dy, dx)` in millimetres.
    pub spacing: [f64; 3],
    /// Provenance and content annotations; keys sort deterministically.
    pub meta: BTreeMap<String, String>,
}

/// Intensity range captured during normalization, used to undo it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntensityScale {
    pub min: f64,
    pub max: f64,
}

impl Volume {
    /// Wraps raw data after checking every voxel is finite and non-negative.
    pub fn new(
        data: Array3<f32>,
        spacing: [f64; 3],
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinitePayload {
                    path: "<memory>".into(),
                    index: i,
                });
            }
            if v < 0.0 {
                return Err(Error::NegativePayload {
                    path: "<memory>".into(),
                    index: i,
                });
            }
        }
        Ok(Volume {
            data,
            spacing,
            meta,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn n_voxels(&self) -> usize {
        self.data.len()
    }

    /// Axial slice `z` lifted to `f64`.
    pub fn slice_f64(&self, z: usize) -> Array2<f64> {
        self.data.index_axis(ndarray::Axis(0), z).mapv(f64::from)
    }

    /// Whole volume lifted to `f64`.
    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(f64::from)
    }

    /// Min and max voxel value in `f64`.
    pub fn value_range(&self) -> IntensityScale {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in self.data.iter() {
            let v = f64::from(v);
            min = min.min(v);
            max = max.max(v);
        }
        IntensityScale { min, max }
    }
}

/// Rescales to `[0, 1]` by the volume's own min/max.
///
/// Fails with [`Error::DegenerateRange`] when the volume is constant, since
/// the inverse map would be undefined.
pub fn min_max_normalize(v: &Volume) -> Result<(Volume, IntensityScale)> {
    let scale = v.value_range();
    let norm = normalize_with(v, &scale, false)?;
    Ok((norm, scale))
}

/// Rescales by an externally chosen range, e.g. a paired volume's.
///
/// With `clamp`, values ending outside `[0, 1]` are clipped — used when a
/// noisy volume is mapped through its clean partner's range.
pub fn normalize_with(v: &Volume, scale: &IntensityScale, clamp: bool) -> Result<Volume> {
    let span = scale.max - scale.min;
    if !(span > 0.0) || !span.is_finite() {
        return Err(Error::DegenerateRange {
            min: scale.min,
            max: scale.max,
        });
    }
    let data = v.data.mapv(|x| {
        let y = (f64::from(x) - scale.min) / span;
        let y = if clamp { y.clamp(0.0, 1.0) } else { y };
        y as f32
    });
    Ok(Volume {
        data,
        spacing: v.spacing,
        meta: v.meta.clone(),
    })
}

/// Undoes [`min_max_normalize`] / [`normalize_with`].
pub fn denormalize(v: &Volume, scale: &IntensityScale) -> Volume {
    let span = scale.max - scale.min;
    let data = v
        .data
        .mapv(|x| (f64::from(x) * span + scale.min) as f32);
    Volume {
        data,
        spacing: v.spacing,
        meta: v.meta.clone(),
    }
}

/// Serializes a volume to the `CDNVOL1` container, atomically.
///
/// The file is staged next to `path` and renamed into place so a crash never
/// leaves a half-written volume behind.
pub fn write_volume<P: AsRef<Path>>(path: P, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let [nz, ny, nx] = v.shape();
    let meta_json = serde_json::to_vec(&v.meta)
        .map_err(|e| Error::BadMetadata {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;

    let mut buf =
        Vec::with_capacity(8 + 12 + 24 + 4 + meta_json.len() + v.n_voxels() * 4);
    buf.extend_from_slice(MAGIC);
    for d in [nz, ny, nx] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    let slice = v
        .data
        .as_slice()
        .expect("volume data is standard layout");
    for &x in slice {
        buf.extend_from_slice(&x.to_le_bytes());
    }

    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a `CDNVOL1` file, validating magic, sizes, metadata and payload.
pub fn load_volume<P: AsRef<Path>>(path: P) -> Result<Volume> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;

    let need = |n: usize, at: usize| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::BadMetadata {
                path: pstr.clone(),
                reason: format!("file truncated at byte {at}"),
            })
        } else {
            Ok(())
        }
    };

    need(8, 0)?;
    if &bytes[..8] != MAGIC {
        return Err(Error::BadMagic {
            path: pstr,
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
        });
    }
    let mut at = 8;
    let read_u32 = |at: &mut usize| -> Result<u32> {
        need(4, *at)?;
        let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
        *at += 4;
        Ok(v)
    };
    let nz = read_u32(&mut at)? as usize;
    let ny = read_u32(&mut at)? as usize;
    let nx = read_u32(&mut at)? as usize;
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        need(8, at)?;
        *s = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
    }
    need(4, at)?;
    let meta_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    at += 4;
    need(meta_len, at)?;
    let meta: BTreeMap<String, String> = serde_json::from_slice(&bytes[at..at + meta_len])
        .map_err(|e| Error::BadMetadata {
            path: pstr.clone(),
            reason: e.to_string(),
        })?;
    at += meta_len;

    let want = nz * ny * nx;
    let got = (bytes.len() - at) / 4;
    if bytes.len() - at != want * 4 {
        return Err(Error::PayloadSize {
            path: pstr,
            shape: [nz, ny, nx],
            got,
            want,
        });
    }
    let mut data = Vec::with_capacity(want);
    for i in 0..want {
        let v = f32::from_le_bytes(bytes[at + 4 * i..at + 4 * i + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinitePayload { path: pstr, index: i });
        }
        if v < 0.0 {
            return Err(Error::NegativePayload { path: pstr, index: i });
        }
        data.push(v);
    }
    let data = Array3::from_shape_vec((nz, ny, nx), data)
        .expect("length was checked against shape");
    Ok(Volume {
        data,
        spacing,
        meta,
    })
}
