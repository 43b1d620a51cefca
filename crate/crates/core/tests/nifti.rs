mod common;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use common::*;
use rand::Rng;
use srnr::nifti::*;
use srnr::volume::Volume3D;
use srnr::SrnrError;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_2x2x2.nii");

/// The fixture volume: value `x + 2y + 4z + 0.5` at voxel `(x, y, z)`,
/// spacing (1, 2, 3).
fn golden_volume() -> Volume3D {
    Volume3D::from_fn([2, 2, 2], [1.0, 2.0, 3.0], |x, y, z| (x + 2 * y + 4 * z) as f64 + 0.5).unwrap()
}

#[test]
fn golden_fixture_reads_and_writes_byte_for_byte() {
    let bytes = std::fs::read(GOLDEN).unwrap();
    assert_eq!(bytes.len(), 352 + 8 * 4);
    let v = read_nifti(GOLDEN).unwrap();
    assert_eq!(v, golden_volume());
    assert_eq!(encode_nifti(&v, Endian::Little).unwrap(), bytes);
}

#[test]
fn zero_volume_file_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.nii");
    write_nifti(&Volume3D::zeros([2, 2, 2], [1.0; 3]).unwrap(), &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 352 + 32);
}

/// Random volume whose values and spacing are exactly representable in f32.
fn f32_volume(r: &mut rand_chacha::ChaCha8Rng) -> Volume3D {
    let dims = [r.random_range(1..7), r.random_range(1..7), r.random_range(1..7)];
    let spacing = [0.5 + r.random_range(0..8) as f64 * 0.25, 0.7f32 as f64, 3.5];
    let n = dims.iter().product();
    let data = (0..n).map(|_| r.random_range(-2.0f32..2.0) as f64).collect();
    Volume3D::new(dims, spacing, data).unwrap()
}

#[test]
fn write_then_read_is_identity() {
    let mut r = rng(500);
    let dir = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let v = f32_volume(&mut r);
        let name = if i % 2 == 0 { "v.nii" } else { "v.nii.gz" };
        let path = dir.path().join(name);
        write_nifti(&v, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        let bits = |x: &Volume3D| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }
}

#[test]
fn byte_swapped_file_decodes_identically() {
    let mut r = rng(501);
    let v = Volume3D::new([4, 3, 2], [1.0, 1.5, 2.0], (0..24).map(|_| r.random_range(-1.0f32..1.0) as f64).collect())
        .unwrap();
    let le = encode_nifti(&v, Endian::Little).unwrap();
    let be = encode_nifti(&v, Endian::Big).unwrap();
    assert_eq!(BigEndian::read_i16(&be[42..]), 4);
    assert_eq!(LittleEndian::read_i16(&le[42..]), 4);
    assert_eq!(decode_nifti(&be).unwrap(), decode_nifti(&le).unwrap());
    assert_eq!(parse_header(&be).unwrap().endian, Endian::Big);
}

/// Builds a one-voxel int16 file by hand.
fn int16_file(stored: i16, slope: f32, inter: f32) -> Vec<u8> {
    let mut b = vec![0u8; 354];
    LittleEndian::write_i32(&mut b[0..], 348);
    for (i, d) in [3i16, 1, 1, 1, 1, 1, 1, 1].iter().enumerate() {
        LittleEndian::write_i16(&mut b[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut b[70..], DT_INT16);
    LittleEndian::write_i16(&mut b[72..], 16);
    for i in 0..8 {
        LittleEndian::write_f32(&mut b[76 + 4 * i..], 1.0);
    }
    LittleEndian::write_f32(&mut b[108..], 352.0);
    LittleEndian::write_f32(&mut b[112..], slope);
    LittleEndian::write_f32(&mut b[116..], inter);
    b[344..348].copy_from_slice(b"n+1\0");
    LittleEndian::write_i16(&mut b[352..], stored);
    b
}

#[test]
fn int16_scaling() {
    let v = decode_nifti(&int16_file(3, 2.0, 1.0)).unwrap();
    assert_eq!(v.data(), &[7.0]);
    // A zero slope means no scaling.
    assert_eq!(decode_nifti(&int16_file(3, 0.0, 0.0)).unwrap().data(), &[3.0]);
}

#[test]
fn unsupported_inputs() {
    let mut bad_magic = int16_file(1, 1.0, 0.0);
    bad_magic[344..348].copy_from_slice(b"ni1\0");
    assert!(matches!(decode_nifti(&bad_magic), Err(SrnrError::UnsupportedFormat(_))));

    let mut bad_type = int16_file(1, 1.0, 0.0);
    LittleEndian::write_i16(&mut bad_type[70..], 64);
    assert!(matches!(decode_nifti(&bad_type), Err(SrnrError::UnsupportedDatatype(64))));

    let mut four_d = int16_file(1, 1.0, 0.0);
    LittleEndian::write_i16(&mut four_d[40..], 4);
    LittleEndian::write_i16(&mut four_d[48..], 2);
    assert!(matches!(decode_nifti(&four_d), Err(SrnrError::UnsupportedShape(_))));

    assert!(matches!(decode_nifti(&[0u8; 10]), Err(SrnrError::UnsupportedFormat(_))));
    let missing = read_nifti("/nonexistent/dir/x.nii").unwrap_err();
    assert!(missing.is_io());
    assert!(missing.to_string().contains("/nonexistent/dir/x.nii"));
}
