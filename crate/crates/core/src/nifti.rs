//! Minimal single-file NIfTI-1 reader and writer.
//!
//! Supports uncompressed .nii with magic "n+1\0", either endianness,
//! datatypes uint8/int16/int32/float32/float64, 3D or 4D. Everything
//! else errors cleanly.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::volume::Volume4D;

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Debug, Clone, Copy)]
struct Header {
    little_endian: bool,
    dim: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
}

fn read_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(Error::nifti(path, format!("file too short for a header: {} bytes", bytes.len())));
    }
    if &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4] != b"n+1\0" {
        return Err(Error::nifti(path, "bad magic, expected single-file NIfTI-1 (\"n+1\")"));
    }
    // sizeof_hdr doubles as the endianness probe.
    let little_endian = match (
        LittleEndian::read_i32(&bytes[0..4]),
        BigEndian::read_i32(&bytes[0..4]),
    ) {
        (348, _) => true,
        (_, 348) => false,
        (le, _) => return Err(Error::nifti(path, format!("sizeof_hdr = {le}, not a NIfTI-1 header"))),
    };

    fn fields<E: ByteOrder>(bytes: &[u8]) -> ([i16; 8], i16, [f32; 8], f32, f32, f32) {
        let mut dim = [0i16; 8];
        E::read_i16_into(&bytes[40..56], &mut dim);
        let datatype = E::read_i16(&bytes[70..72]);
        let mut pixdim = [0f32; 8];
        E::read_f32_into(&bytes[76..108], &mut pixdim);
        let vox_offset = E::read_f32(&bytes[108..112]);
        let scl_slope = E::read_f32(&bytes[112..116]);
        let scl_inter = E::read_f32(&bytes[116..120]);
        (dim, datatype, pixdim, vox_offset, scl_slope, scl_inter)
    }

    let (dim, datatype, pixdim, vox_offset, scl_slope, scl_inter) = if little_endian {
        fields::<LittleEndian>(bytes)
    } else {
        fields::<BigEndian>(bytes)
    };
    Ok(Header { little_endian, dim, datatype, pixdim, vox_offset, scl_slope, scl_inter })
}

fn bytes_per_value(datatype: i16) -> Option<usize> {
    match datatype {
        DT_UINT8 => Some(1),
        DT_INT16 => Some(2),
        DT_INT32 => Some(4),
        DT_FLOAT32 => Some(4),
        DT_FLOAT64 => Some(8),
        _ => None,
    }
}

fn decode_values(h: &Header, raw: &[u8], count: usize) -> Vec<f32> {
    fn decode<E: ByteOrder>(datatype: i16, raw: &[u8], count: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(count);
        match datatype {
            DT_UINT8 => out.extend(raw[..count].iter().map(|&v| v as f32)),
            DT_INT16 => {
                for i in 0..count {
                    out.push(E::read_i16(&raw[2 * i..]) as f32);
                }
            }
            DT_INT32 => {
                for i in 0..count {
                    out.push(E::read_i32(&raw[4 * i..]) as f32);
                }
            }
            DT_FLOAT32 => {
                for i in 0..count {
                    out.push(E::read_f32(&raw[4 * i..]));
                }
            }
            DT_FLOAT64 => {
                for i in 0..count {
                    out.push(E::read_f64(&raw[8 * i..]) as f32);
                }
            }
            _ => unreachable!("datatype vetted before decode"),
        }
        out
    }
    if h.little_endian {
        decode::<LittleEndian>(h.datatype, raw, count)
    } else {
        decode::<BigEndian>(h.datatype, raw, count)
    }
}

/// Reads an uncompressed NIfTI-1 volume. 3D files come back with C=1.
/// scl_slope/scl_inter are applied when slope is set and nontrivial.
pub fn load_nifti(path: &Path) -> Result<Volume4D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = read_header(path, &bytes)?;

    let rank = h.dim[0];
    if !(3..=4).contains(&rank) {
        return Err(Error::nifti(path, format!("rank {rank} unsupported, expected 3 or 4")));
    }
    let x = h.dim[1] as usize;
    let y = h.dim[2] as usize;
    let z = h.dim[3] as usize;
    let c = if rank == 4 { h.dim[4] as usize } else { 1 };
    if h.dim[1] <= 0 || h.dim[2] <= 0 || h.dim[3] <= 0 || (rank == 4 && h.dim[4] <= 0) {
        return Err(Error::nifti(path, format!("non-positive dims {:?}", &h.dim[1..5])));
    }

    let value_size = bytes_per_value(h.datatype)
        .ok_or_else(|| Error::nifti(path, format!("unsupported datatype code {}", h.datatype)))?;
    let count = x * y * z * c;
    let offset = h.vox_offset as usize;
    if (h.vox_offset as f64) < HEADER_SIZE as f64 || h.vox_offset.fract() != 0.0 {
        return Err(Error::nifti(path, format!("bad vox_offset {}", h.vox_offset)));
    }
    let need = offset + count * value_size;
    if bytes.len() < need {
        return Err(Error::nifti(
            path,
            format!("expected {need} bytes ({count} values at offset {offset}), file has {}", bytes.len()),
        ));
    }

    let mut values = decode_values(&h, &bytes[offset..], count);
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        for v in &mut values {
            *v = *v * h.scl_slope + h.scl_inter;
        }
    }

    // File order is x-fastest; repack to the channel-fastest layout.
    let mut data = vec![0.0f32; count];
    for t in 0..c {
        for zz in 0..z {
            for yy in 0..y {
                let src_base = ((t * z + zz) * y + yy) * x;
                for xx in 0..x {
                    data[((xx * y + yy) * z + zz) * c + t] = values[src_base + xx];
                }
            }
        }
    }

    let voxel_size = [h.pixdim[1], h.pixdim[2], h.pixdim[3]];
    Volume4D::new((x, y, z, c), data, voxel_size)
        .map_err(|e| Error::nifti(path, format!("decoded data invalid: {e}")))
}

/// Writes a float32 little-endian NIfTI-1 file. 4D unless C == 1.
pub fn save_nifti(path: &Path, vol: &Volume4D) -> Result<()> {
    let (x, y, z, c) = vol.dims;
    for (name, d) in [("X", x), ("Y", y), ("Z", z), ("C", c)] {
        if d > i16::MAX as usize {
            return Err(Error::nifti(path, format!("dim {name} = {d} exceeds the NIfTI-1 i16 limit")));
        }
    }
    let rank: i16 = if c == 1 { 3 } else { 4 };
    let vox_offset = 352u32; // header + 4-byte extension flag

    let mut out = Vec::with_capacity(vox_offset as usize + vol.data.len() * 4);
    out.write_i32::<LittleEndian>(348).unwrap();
    out.resize(40, 0); // data_type, db_name, extents, session_error, regular, dim_info
    let dims: [i16; 8] = [rank, x as i16, y as i16, z as i16, c as i16, 1, 1, 1];
    for d in dims {
        out.write_i16::<LittleEndian>(d).unwrap();
    }
    out.resize(70, 0); // intent fields
    out.write_i16::<LittleEndian>(DT_FLOAT32).unwrap();
    out.write_i16::<LittleEndian>(32).unwrap(); // bitpix
    out.write_i16::<LittleEndian>(0).unwrap(); // slice_start
    let pixdim: [f32; 8] =
        [1.0, vol.voxel_size[0], vol.voxel_size[1], vol.voxel_size[2], 1.0, 1.0, 1.0, 1.0];
    for p in pixdim {
        out.write_f32::<LittleEndian>(p).unwrap();
    }
    out.write_f32::<LittleEndian>(vox_offset as f32).unwrap();
    out.write_f32::<LittleEndian>(1.0).unwrap(); // scl_slope
    out.write_f32::<LittleEndian>(0.0).unwrap(); // scl_inter
    out.resize(MAGIC_OFFSET, 0);
    out.extend_from_slice(b"n+1\0");
    out.extend_from_slice(&[0u8; 4]); // no extensions

    // Repack channel-fastest to the file's x-fastest order.
    for t in 0..c {
        for zz in 0..z {
            for yy in 0..y {
                for xx in 0..x {
                    let v = vol.data[((xx * y + yy) * z + zz) * c + t];
                    out.write_f32::<LittleEndian>(v).unwrap();
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
