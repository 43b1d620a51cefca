//! Reader and writer for a strict subset of single-file NIfTI-1.
//!
//! Reads float32 and int16 volumes in either byte order, optionally gzip
//! compressed, applying `scl_slope`/`scl_inter`. Writes uncompressed
//! little-endian float32 with `vox_offset = 352`, unit scaling and an sform
//! equal to the voxel spacing on the diagonal.
//!
//! NIfTI stores the first axis fastest; [`Volume3D`] stores the last axis
//! fastest, so voxels are transposed on the way in and out.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Result, SrnrError};
use crate::volume::{voxel_count, Dims, Volume3D};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const REGULAR: usize = 38;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The header fields this crate understands.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeaderSubset {
    pub dims: Dims,
    pub datatype: i16,
    pub pixdim: [f32; 3],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: f32,
    pub endian: Endian,
}

fn read_i16(b: &[u8], off: usize, e: Endian) -> i16 {
    match e {
        Endian::Little => LittleEndian::read_i16(&b[off..]),
        Endian::Big => BigEndian::read_i16(&b[off..]),
    }
}

fn read_f32(b: &[u8], off: usize, e: Endian) -> f32 {
    match e {
        Endian::Little => LittleEndian::read_f32(&b[off..]),
        Endian::Big => BigEndian::read_f32(&b[off..]),
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeaderSubset> {
    if bytes.len() < HEADER_SIZE {
        return Err(SrnrError::UnsupportedFormat(format!(
            "file is {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let endian = if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(SrnrError::UnsupportedFormat("sizeof_hdr is not 348".into()));
    };
    if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
        return Err(SrnrError::UnsupportedFormat(
            "magic is not \"n+1\" (only single-file NIfTI-1 is supported)".into(),
        ));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = read_i16(bytes, offsets::DIM + 2 * i, endian);
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(SrnrError::UnsupportedShape(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    if let Some(extra) = (4..=ndim).find(|&i| dim[i] != 1) {
        return Err(SrnrError::UnsupportedShape(format!(
            "dim[{extra}] = {} (only 3D volumes are supported)",
            dim[extra]
        )));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        if a < ndim {
            let n = dim[a + 1];
            if n < 1 {
                return Err(SrnrError::UnsupportedShape(format!("dim[{}] = {n}", a + 1)));
            }
            *d = n as usize;
        }
    }

    let datatype = read_i16(bytes, offsets::DATATYPE, endian);
    if datatype != DT_FLOAT32 && datatype != DT_INT16 {
        return Err(SrnrError::UnsupportedDatatype(datatype));
    }

    let mut pixdim = [1.0f32; 3];
    for (a, p) in pixdim.iter_mut().enumerate() {
        let v = read_f32(bytes, offsets::PIXDIM + 4 * (a + 1), endian).abs();
        if a < ndim && v.is_finite() && v > 0.0 {
            *p = v;
        }
    }

    Ok(NiftiHeaderSubset {
        dims,
        datatype,
        pixdim,
        scl_slope: read_f32(bytes, offsets::SCL_SLOPE, endian),
        scl_inter: read_f32(bytes, offsets::SCL_INTER, endian),
        vox_offset: read_f32(bytes, offsets::VOX_OFFSET, endian),
        endian,
    })
}

/// Decodes an in-memory `.nii` (or gzip-compressed `.nii.gz`) image.
pub fn decode_nifti(raw: &[u8]) -> Result<Volume3D> {
    let decompressed;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw)
            .read_to_end(&mut out)
            .map_err(|e| SrnrError::UnsupportedFormat(format!("gzip stream: {e}")))?;
        decompressed = out;
        &decompressed[..]
    } else {
        raw
    };

    let hdr = parse_header(bytes)?;
    if !(hdr.vox_offset.is_finite() && hdr.vox_offset >= HEADER_SIZE as f32) {
        return Err(SrnrError::UnsupportedFormat(format!("vox_offset {}", hdr.vox_offset)));
    }
    let start = hdr.vox_offset as usize;
    let n = voxel_count(hdr.dims);
    let width = if hdr.datatype == DT_FLOAT32 { 4 } else { 2 };
    if bytes.len() < start + n * width {
        return Err(SrnrError::UnsupportedFormat(format!(
            "truncated data: need {} bytes, have {}",
            start + n * width,
            bytes.len()
        )));
    }
    let payload = &bytes[start..start + n * width];

    let slope = if hdr.scl_slope == 0.0 || !hdr.scl_slope.is_finite() {
        1.0
    } else {
        f64::from(hdr.scl_slope)
    };
    let inter = if hdr.scl_inter.is_finite() {
        f64::from(hdr.scl_inter)
    } else {
        0.0
    };

    let [nx, ny, nz] = hdr.dims;
    let mut data = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let src = x + nx * (y + ny * z);
                let stored = if hdr.datatype == DT_FLOAT32 {
                    f64::from(read_f32(payload, 4 * src, hdr.endian))
                } else {
                    f64::from(read_i16(payload, 2 * src, hdr.endian))
                };
                data[(x * ny + y) * nz + z] = stored * slope + inter;
            }
        }
    }
    let spacing = hdr.pixdim.map(f64::from);
    Volume3D::new(hdr.dims, spacing, data)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| SrnrError::io(path, e))?;
    decode_nifti(&raw)
}

/// Encodes a volume as float32 NIfTI-1 in the requested byte order.
pub fn encode_nifti(vol: &Volume3D, endian: Endian) -> Result<Vec<u8>> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(SrnrError::UnsupportedShape(format!(
            "dims {dims:?} exceed the NIfTI-1 limit of 32767"
        )));
    }
    let n = vol.len();
    let mut out = vec![0u8; VOX_OFFSET + 4 * n];
    let h = &mut out[..VOX_OFFSET];
    let spacing = vol.spacing().map(|s| s as f32);

    fn put_i16(b: &mut [u8], off: usize, v: i16, e: Endian) {
        match e {
            Endian::Little => LittleEndian::write_i16(&mut b[off..], v),
            Endian::Big => BigEndian::write_i16(&mut b[off..], v),
        }
    }
    fn put_i32(b: &mut [u8], off: usize, v: i32, e: Endian) {
        match e {
            Endian::Little => LittleEndian::write_i32(&mut b[off..], v),
            Endian::Big => BigEndian::write_i32(&mut b[off..], v),
        }
    }
    fn put_f32(b: &mut [u8], off: usize, v: f32, e: Endian) {
        match e {
            Endian::Little => LittleEndian::write_f32(&mut b[off..], v),
            Endian::Big => BigEndian::write_f32(&mut b[off..], v),
        }
    }

    put_i32(h, offsets::SIZEOF_HDR, HEADER_SIZE as i32, endian);
    h[offsets::REGULAR] = b'r';
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(h, offsets::DIM + 2 * i, *d, endian);
    }
    put_i16(h, offsets::DATATYPE, DT_FLOAT32, endian);
    put_i16(h, offsets::BITPIX, 32, endian);
    // pixdim[0] is qfac.
    let pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(h, offsets::PIXDIM + 4 * i, *p, endian);
    }
    put_f32(h, offsets::VOX_OFFSET, VOX_OFFSET as f32, endian);
    put_f32(h, offsets::SCL_SLOPE, 1.0, endian);
    put_f32(h, offsets::SCL_INTER, 0.0, endian);
    // NIFTI_UNITS_MM
    h[offsets::XYZT_UNITS] = 2;
    h[offsets::DESCRIP..offsets::DESCRIP + 4].copy_from_slice(b"srnr");
    // Scanner-anat qform with an identity quaternion, and a diagonal sform.
    put_i16(h, offsets::QFORM_CODE, 1, endian);
    put_i16(h, offsets::SFORM_CODE, 1, endian);
    for (row, s) in spacing.iter().enumerate() {
        put_f32(h, offsets::SROW_X + 16 * row + 4 * row, *s, endian);
    }
    h[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);

    let [nx, ny, nz] = dims;
    let payload = &mut out[VOX_OFFSET..];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dst = x + nx * (y + ny * z);
                let v = vol.data()[(x * ny + y) * nz + z] as f32;
                put_f32(payload, 4 * dst, v, endian);
            }
        }
    }
    Ok(out)
}

/// Writes a little-endian float32 NIfTI-1 file. Paths ending in `.gz` are
/// gzip-compressed.
pub fn write_nifti(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol, Endian::Little)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let io = |e| SrnrError::io(path, e);
    if gz {
        let file = fs::File::create(path).map_err(io)?;
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).map_err(io)?;
        enc.finish().map_err(io)?;
    } else {
        fs::write(path, bytes).map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume3D {
        Volume3D::from_fn([4, 3, 5], [0.7, 0.8, 3.5], |i, j, k| {
            f64::from((i as f32) * 0.25 - (j as f32) * 1.5 + (k as f32) * 0.125)
        })
        .unwrap()
    }

    #[test]
    fn zero_volume_has_expected_size() {
        let vol = Volume3D::zeros([2, 2, 2], [1.0; 3]).unwrap();
        assert_eq!(encode_nifti(&vol, Endian::Little).unwrap().len(), 352 + 32);
    }

    #[test]
    fn round_trip_in_memory() {
        let vol = sample_volume();
        let back = decode_nifti(&encode_nifti(&vol, Endian::Little).unwrap()).unwrap();
        assert_eq!(back.data(), vol.data());
        assert_eq!(back.dims(), vol.dims());
        for (a, b) in back.spacing().iter().zip(vol.spacing()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn byte_swapped_matches_native() {
        let vol = sample_volume();
        let le = decode_nifti(&encode_nifti(&vol, Endian::Little).unwrap()).unwrap();
        let be_bytes = encode_nifti(&vol, Endian::Big).unwrap();
        assert_eq!(parse_header(&be_bytes).unwrap().endian, Endian::Big);
        let be = decode_nifti(&be_bytes).unwrap();
        assert_eq!(le, be);
    }

    #[test]
    fn int16_scaling() {
        let vol = Volume3D::zeros([2, 1, 1], [1.0; 3]).unwrap();
        let mut bytes = encode_nifti(&vol, Endian::Little).unwrap();
        bytes.truncate(VOX_OFFSET);
        LittleEndian::write_i16(&mut bytes[offsets::DATATYPE..], DT_INT16);
        LittleEndian::write_i16(&mut bytes[offsets::BITPIX..], 16);
        LittleEndian::write_f32(&mut bytes[offsets::SCL_SLOPE..], 2.0);
        LittleEndian::write_f32(&mut bytes[offsets::SCL_INTER..], 1.0);
        bytes.extend_from_slice(&3i16.to_le_bytes());
        bytes.extend_from_slice(&(-4i16).to_le_bytes());
        let out = decode_nifti(&bytes).unwrap();
        assert_eq!(out.data(), &[7.0, -7.0]);

        // slope 0 means unscaled
        LittleEndian::write_f32(&mut bytes[offsets::SCL_SLOPE..], 0.0);
        LittleEndian::write_f32(&mut bytes[offsets::SCL_INTER..], 0.0);
        assert_eq!(decode_nifti(&bytes).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn rejects_bad_magic_datatype_and_shape() {
        let vol = Volume3D::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let good = encode_nifti(&vol, Endian::Little).unwrap();

        let mut bad = good.clone();
        bad[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"ni1\0");
        assert!(matches!(decode_nifti(&bad), Err(SrnrError::UnsupportedFormat(_))));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[offsets::DATATYPE..], 64);
        assert!(matches!(decode_nifti(&bad), Err(SrnrError::UnsupportedDatatype(64))));

        let mut bad = good.clone();
        LittleEndian::write_i16(&mut bad[offsets::DIM..], 4);
        LittleEndian::write_i16(&mut bad[offsets::DIM + 8..], 2);
        assert!(matches!(decode_nifti(&bad), Err(SrnrError::UnsupportedShape(_))));

        // trailing unit dims are fine
        let mut ok = good;
        LittleEndian::write_i16(&mut ok[offsets::DIM..], 4);
        LittleEndian::write_i16(&mut ok[offsets::DIM + 8..], 1);
        assert!(decode_nifti(&ok).is_ok());
    }

    #[test]
    fn gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let vol = sample_volume();
        write_nifti(&vol, &path).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        assert_eq!(read_nifti(&path).unwrap().data(), vol.data());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_nifti("/nonexistent/dir/x.nii").unwrap_err();
        assert!(err.is_io());
    }
}
