//! Minimal NIfTI-1 reader/writer for 3D scalar volumes.
//!
//! Supports `.nii` and `.nii.gz`, little- and big-endian headers, the common
//! scalar datatypes, and `scl_slope`/`scl_inter` rescaling on read. The
//! writer emits single-file (`n+1`) little-endian images with voxel spacing
//! in `pixdim`. Only 3D volumes are handled; higher dims must be singleton.
//!
//! Axis convention: NIfTI's fastest-varying axis (`dim[1]`) maps to our `x`
//! (width), `dim[2]` to `y` (height), `dim[3]` to `z` (depth), so the raw
//! data block matches our `[z][y][x]` storage byte-for-byte. Spacing is
//! reported as `[sd, sh, sw] = [pixdim[3], pixdim[2], pixdim[1]]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Result, SegError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// A decoded NIfTI volume: shape `[d, h, w]`, spacing `[sd, sh, sw]` in mm,
/// and intensities converted to f32 with any header rescale applied.
pub struct NiftiVolume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let file = File::open(path).map_err(|e| SegError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 2];
    reader
        .read_exact(&mut magic)
        .map_err(|e| SegError::io(path, e))?;
    let mut raw = Vec::new();
    if magic == [0x1f, 0x8b] {
        let chained = magic.as_slice().chain(reader);
        MultiGzDecoder::new(chained)
            .read_to_end(&mut raw)
            .map_err(|e| SegError::io(path, e))?;
    } else {
        raw.extend_from_slice(&magic);
        reader
            .read_to_end(&mut raw)
            .map_err(|e| SegError::io(path, e))?;
    }
    parse_nifti(&raw).map_err(|msg| SegError::NiftiFormat(format!("{}: {msg}", path.display())))
}

fn parse_nifti(raw: &[u8]) -> std::result::Result<NiftiVolume, String> {
    if raw.len() < HEADER_SIZE {
        return Err(format!("file too short for header ({} bytes)", raw.len()));
    }
    let le_sizeof = i32::from_le_bytes(raw[0..4].try_into().unwrap());
    let be_sizeof = i32::from_be_bytes(raw[0..4].try_into().unwrap());
    let big_endian = match (le_sizeof, be_sizeof) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err("sizeof_hdr is not 348".to_string()),
    };
    let rd_i16 = |off: usize| -> i16 {
        let b: [u8; 2] = raw[off..off + 2].try_into().unwrap();
        if big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        let b: [u8; 4] = raw[off..off + 4].try_into().unwrap();
        if big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    };

    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("dim[0] = {ndim} out of range"));
    }
    let mut dims = [1usize; 7];
    for (i, dim) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = rd_i16(40 + 2 * (i + 1));
        if v < 1 {
            return Err(format!("dim[{}] = {v} invalid", i + 1));
        }
        *dim = v as usize;
    }
    if ndim > 3 && dims[3..].iter().any(|&v| v != 1) {
        return Err("only 3D volumes are supported (trailing dims must be 1)".to_string());
    }
    let (w, h, d) = (dims[0], dims[1], dims[2]);
    let shape = [d, h, w];
    let n = d * h * w;

    let datatype = rd_i16(70);
    let spacing = [rd_f32(88) as f64, rd_f32(84) as f64, rd_f32(80) as f64];
    let vox_offset = rd_f32(108);
    let scl_slope = rd_f32(112);
    let scl_inter = rd_f32(116);
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0f32, 0.0f32)
    } else {
        (scl_slope, scl_inter)
    };

    let offset = if vox_offset >= HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        VOX_OFFSET
    };
    let elem = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let need = offset + n * elem;
    if raw.len() < need {
        return Err(format!("data truncated: need {need} bytes, have {}", raw.len()));
    }
    let body = &raw[offset..offset + n * elem];
    let mut data = Vec::with_capacity(n);
    let push = |data: &mut Vec<f32>, v: f32| data.push(v * slope + inter);
    match datatype {
        DT_UINT8 => body.iter().for_each(|&b| push(&mut data, b as f32)),
        DT_INT8 => body.iter().for_each(|&b| push(&mut data, b as i8 as f32)),
        DT_INT16 => body.chunks_exact(2).for_each(|c| {
            let b: [u8; 2] = c.try_into().unwrap();
            let v = if big_endian {
                i16::from_be_bytes(b)
            } else {
                i16::from_le_bytes(b)
            };
            push(&mut data, v as f32);
        }),
        DT_UINT16 => body.chunks_exact(2).for_each(|c| {
            let b: [u8; 2] = c.try_into().unwrap();
            let v = if big_endian {
                u16::from_be_bytes(b)
            } else {
                u16::from_le_bytes(b)
            };
            push(&mut data, v as f32);
        }),
        DT_INT32 => body.chunks_exact(4).for_each(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            let v = if big_endian {
                i32::from_be_bytes(b)
            } else {
                i32::from_le_bytes(b)
            };
            push(&mut data, v as f32);
        }),
        DT_UINT32 => body.chunks_exact(4).for_each(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            let v = if big_endian {
                u32::from_be_bytes(b)
            } else {
                u32::from_le_bytes(b)
            };
            push(&mut data, v as f32);
        }),
        DT_FLOAT32 => body.chunks_exact(4).for_each(|c| {
            let b: [u8; 4] = c.try_into().unwrap();
            let v = if big_endian {
                f32::from_be_bytes(b)
            } else {
                f32::from_le_bytes(b)
            };
            push(&mut data, v);
        }),
        DT_FLOAT64 => body.chunks_exact(8).for_each(|c| {
            let b: [u8; 8] = c.try_into().unwrap();
            let v = if big_endian {
                f64::from_be_bytes(b)
            } else {
                f64::from_le_bytes(b)
            };
            push(&mut data, v as f32);
        }),
        _ => unreachable!(),
    }
    Ok(NiftiVolume {
        shape,
        spacing,
        data,
    })
}

fn build_header(shape: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16) -> [u8; VOX_OFFSET] {
    let mut h = [0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim[0..3]: ndim, nx, ny, nz  (x fastest)
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(shape[2] as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(shape[1] as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(shape[0] as i16).to_le_bytes());
    for i in 4..8 {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] = qfac, then voxel sizes
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    h[80..84].copy_from_slice(&(spacing[2] as f32).to_le_bytes());
    h[84..88].copy_from_slice(&(spacing[1] as f32).to_le_bytes());
    h[88..92].copy_from_slice(&(spacing[0] as f32).to_le_bytes());
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[123] = 2; // xyzt_units: millimeters
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_bytes(path: &Path, header: &[u8], body: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| SegError::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(header).map_err(|e| SegError::io(path, e))?;
        enc.write_all(body).map_err(|e| SegError::io(path, e))?;
        enc.finish().map_err(|e| SegError::io(path, e))?;
    } else {
        let mut out = BufWriter::new(file);
        out.write_all(header).map_err(|e| SegError::io(path, e))?;
        out.write_all(body).map_err(|e| SegError::io(path, e))?;
        out.flush().map_err(|e| SegError::io(path, e))?;
    }
    Ok(())
}

/// Write a float32 image volume.
pub fn write_nifti_f32(path: &Path, shape: [usize; 3], spacing: [f64; 3], data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), shape[0] * shape[1] * shape[2]);
    let header = build_header(shape, spacing, DT_FLOAT32, 32);
    let mut body = Vec::with_capacity(data.len() * 4);
    for v in data {
        body.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &header, &body)
}

/// Write a uint8 label volume.
pub fn write_nifti_u8(path: &Path, shape: [usize; 3], spacing: [f64; 3], data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), shape[0] * shape[1] * shape[2]);
    let header = build_header(shape, spacing, DT_UINT8, 8);
    write_bytes(path, &header, data)
}
