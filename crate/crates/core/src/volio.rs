//! Volume file formats.
//!
//! Two formats are supported, chosen by file extension:
//!
//! * `.nii`: single-file NIfTI-1, little-endian, uncompressed, 348-byte header
//!   with data at byte 352. Datatypes: unsigned byte, signed 16-bit integer,
//!   32-bit float. Written files carry identical qform and sform transforms
//!   mapping voxel axes to RAS world space; on load the transform must be
//!   axis-aligned with the pipeline's LPS voxel order or the file is rejected.
//! * `.raw`: bare little-endian samples with a `<file>.raw.txt` sidecar of
//!   `key = value` lines (`dims`, `spacing`, `origin`, `datatype`). Sidecar
//!   coordinates are already in the pipeline convention.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volgrid::{Geometry, ImageGrid, LabelGrid, VolumeGrid};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const ORIENTATION_TOL: f64 = 1e-4;

/// On-disk sample type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    F32,
}

impl DataType {
    fn nifti_code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::F32 => 16,
        }
    }

    fn from_nifti_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Self::U8),
            4 => Some(Self::I16),
            16 => Some(Self::F32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::U8 => "uint8",
            Self::I16 => "int16",
            Self::F32 => "float32",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "uint8" => Some(Self::U8),
            "int16" => Some(Self::I16),
            "float32" => Some(Self::F32),
            _ => None,
        }
    }

    fn decode(self, bytes: &[u8], n: usize) -> Vec<f32> {
        match self {
            Self::U8 => bytes[..n].iter().map(|&b| b as f32).collect(),
            Self::I16 => (0..n)
                .map(|i| LittleEndian::read_i16(&bytes[2 * i..]) as f32)
                .collect(),
            Self::F32 => (0..n)
                .map(|i| LittleEndian::read_f32(&bytes[4 * i..]))
                .collect(),
        }
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

enum Kind {
    Nifti,
    Raw,
}

fn kind_of(path: &Path) -> Result<Kind> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => Ok(Kind::Nifti),
        Some("raw") => Ok(Kind::Raw),
        _ => Err(format_err(
            path,
            "unsupported extension; expected .nii or .raw",
        )),
    }
}

/// Sidecar path of a `.raw` volume.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Read any supported volume as intensities.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let (geometry, samples) = read_samples(path)?;
    VolumeGrid::new(geometry, samples)
}

/// Read a volume whose samples must all be 0 or 1.
pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    let (geometry, samples) = read_samples(path)?;
    let mut values = Vec::with_capacity(samples.len());
    for (i, v) in samples.into_iter().enumerate() {
        if v == 0.0 {
            values.push(0);
        } else if v == 1.0 {
            values.push(1);
        } else {
            return Err(format_err(
                path,
                format!("non-binary label {v} at voxel {i}"),
            ));
        }
    }
    LabelGrid::labels(geometry, values)
}

pub fn write_image(path: &Path, grid: &ImageGrid) -> Result<()> {
    let mut data = vec![0u8; grid.values().len() * 4];
    LittleEndian::write_f32_into(grid.values(), &mut data);
    write_samples(path, grid.geometry(), DataType::F32, &data)
}

pub fn write_labels(path: &Path, grid: &LabelGrid) -> Result<()> {
    write_samples(path, grid.geometry(), DataType::U8, grid.values())
}

fn read_samples(path: &Path) -> Result<(Geometry, Vec<f32>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match kind_of(path)? {
        Kind::Nifti => read_nifti(path),
        Kind::Raw => read_raw(path),
    }
}

fn write_samples(path: &Path, geometry: &Geometry, dtype: DataType, data: &[u8]) -> Result<()> {
    match kind_of(path)? {
        Kind::Nifti => {
            let mut file = fs::File::create(path)?;
            file.write_all(&nifti_header(geometry, dtype))?;
            file.write_all(data)?;
        }
        Kind::Raw => {
            fs::write(path, data)?;
            let g = geometry;
            let sidecar = format!(
                "dims = {} {} {}\nspacing = {} {} {}\norigin = {} {} {}\ndatatype = {}\n",
                g.dims[0],
                g.dims[1],
                g.dims[2],
                g.spacing[0],
                g.spacing[1],
                g.spacing[2],
                g.origin[0],
                g.origin[1],
                g.origin[2],
                dtype.name()
            );
            fs::write(sidecar_path(path), sidecar)?;
        }
    }
    Ok(())
}

fn nifti_header(g: &Geometry, dtype: DataType) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim: [i16; 8] = [
        3,
        g.dims[0] as i16,
        g.dims[1] as i16,
        g.dims[2] as i16,
        1,
        1,
        1,
        1,
    ];
    LittleEndian::write_i16_into(&dim, &mut h[40..56]);
    LittleEndian::write_i16(&mut h[70..], dtype.nifti_code());
    LittleEndian::write_i16(&mut h[72..], (dtype.bytes() * 8) as i16);
    let pixdim: [f32; 8] = [
        1.0,
        g.spacing[0] as f32,
        g.spacing[1] as f32,
        g.spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    let descrip = b"renalvol";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // scanner-anchored qform and sform
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    // 180 degree rotation about z maps LPS voxel axes to RAS
    let quatern: [f32; 6] = [
        0.0,
        0.0,
        1.0,
        -g.origin[0] as f32,
        -g.origin[1] as f32,
        g.origin[2] as f32,
    ];
    LittleEndian::write_f32_into(&quatern, &mut h[256..280]);
    let srow: [f32; 12] = [
        -g.spacing[0] as f32,
        0.0,
        0.0,
        -g.origin[0] as f32,
        0.0,
        -g.spacing[1] as f32,
        0.0,
        -g.origin[1] as f32,
        0.0,
        0.0,
        g.spacing[2] as f32,
        g.origin[2] as f32,
    ];
    LittleEndian::write_f32_into(&srow, &mut h[280..328]);
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn read_nifti(path: &Path) -> Result<(Geometry, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(
            path,
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[0..]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let msg = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}, expected 348")
        };
        return Err(format_err(path, msg));
    }
    if &bytes[344..348] != MAGIC {
        return Err(format_err(path, "missing single-file magic \"n+1\""));
    }
    let mut dim = [0i16; 8];
    LittleEndian::read_i16_into(&bytes[40..56], &mut dim);
    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(format_err(
            path,
            format!("expected a 3D volume, dim = {dim:?}"),
        ));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(format_err(
            path,
            format!("non-positive dimension in {dim:?}"),
        ));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let code = LittleEndian::read_i16(&bytes[70..]);
    let dtype = DataType::from_nifti_code(code)
        .ok_or_else(|| format_err(path, format!("unsupported datatype code {code}")))?;
    let mut pixdim = [0f32; 8];
    LittleEndian::read_f32_into(&bytes[76..108], &mut pixdim);
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64].map(f64::abs);
    let vox_offset = LittleEndian::read_f32(&bytes[108..]);
    if !(vox_offset >= DATA_OFFSET as f32) {
        return Err(format_err(
            path,
            format!("vox_offset {vox_offset} below 352"),
        ));
    }
    let offset = vox_offset as usize;
    let origin = nifti_origin(path, &bytes, pixdim, spacing)?;
    let geometry =
        Geometry::new(dims, spacing, origin).map_err(|e| format_err(path, e.to_string()))?;
    let n = geometry.len();
    let needed = offset + n * dtype.bytes();
    if bytes.len() < needed {
        return Err(format_err(
            path,
            format!("truncated data: {} bytes, expected {needed}", bytes.len()),
        ));
    }
    let mut samples = dtype.decode(&bytes[offset..], n);
    let slope = LittleEndian::read_f32(&bytes[112..]);
    let inter = LittleEndian::read_f32(&bytes[116..]);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for v in &mut samples {
            *v = *v * slope + inter;
        }
    }
    Ok((geometry, samples))
}

/// Origin in pipeline (LPS) coordinates, after checking that the stored
/// transform matches the pipeline's voxel axis convention.
fn nifti_origin(
    path: &Path,
    bytes: &[u8],
    pixdim: [f32; 8],
    spacing: [f64; 3],
) -> Result<[f64; 3]> {
    let qform_code = LittleEndian::read_i16(&bytes[252..]);
    let sform_code = LittleEndian::read_i16(&bytes[254..]);
    let (rotation, offset) = if sform_code > 0 {
        let mut srow = [0f32; 12];
        LittleEndian::read_f32_into(&bytes[280..328], &mut srow);
        let mut r = [[0.0; 3]; 3];
        for (row, r_row) in r.iter_mut().enumerate() {
            for (col, value) in r_row.iter_mut().enumerate() {
                *value = srow[4 * row + col] as f64 / spacing[col];
            }
        }
        (r, [srow[3] as f64, srow[7] as f64, srow[11] as f64])
    } else if qform_code > 0 {
        let mut q = [0f32; 6];
        LittleEndian::read_f32_into(&bytes[256..280], &mut q);
        let (b, c, d) = (q[0] as f64, q[1] as f64, q[2] as f64);
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                qfac * 2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                qfac * 2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                qfac * (a * a + d * d - c * c - b * b),
            ],
        ];
        (r, [q[3] as f64, q[4] as f64, q[5] as f64])
    } else {
        return Ok([0.0; 3]);
    };
    let expected = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
    for row in 0..3 {
        for col in 0..3 {
            if (rotation[row][col] - expected[row][col]).abs() > ORIENTATION_TOL {
                return Err(format_err(
                    path,
                    format!("voxel axes {rotation:?} are not in LPS order"),
                ));
            }
        }
    }
    Ok([-offset[0], -offset[1], offset[2]])
}

fn read_raw(path: &Path) -> Result<(Geometry, Vec<f32>)> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(Error::MissingFile(sidecar));
    }
    let text = fs::read_to_string(&sidecar)?;
    let mut dims = None;
    let mut spacing = None;
    let mut origin = Some([0.0; 3]);
    let mut dtype = None;
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_err(&sidecar, format!("expected key = value, got '{line}'")))?;
        let nums = || -> Result<[f64; 3]> {
            let parsed: Vec<f64> = value
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(&sidecar, format!("{key}: {e}")))?;
            parsed
                .try_into()
                .map_err(|_| format_err(&sidecar, format!("{key} needs three values")))
        };
        match key.trim() {
            "dims" => {
                let d = nums()?;
                if d.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
                    return Err(format_err(&sidecar, "dims must be positive integers"));
                }
                dims = Some(d.map(|v| v as usize));
            }
            "spacing" => spacing = Some(nums()?),
            "origin" => origin = Some(nums()?),
            "datatype" => {
                dtype = Some(DataType::from_name(value.trim()).ok_or_else(|| {
                    format_err(&sidecar, format!("unknown datatype '{}'", value.trim()))
                })?)
            }
            other => return Err(format_err(&sidecar, format!("unknown key '{other}'"))),
        }
    }
    let (Some(dims), Some(spacing), Some(origin), Some(dtype)) = (dims, spacing, origin, dtype)
    else {
        return Err(format_err(
            &sidecar,
            "dims, spacing and datatype are required",
        ));
    };
    let geometry =
        Geometry::new(dims, spacing, origin).map_err(|e| format_err(&sidecar, e.to_string()))?;
    let bytes = fs::read(path)?;
    let needed = geometry.len() * dtype.bytes();
    if bytes.len() != needed {
        return Err(format_err(
            path,
            format!("{} bytes of data, expected {needed}", bytes.len()),
        ));
    }
    Ok((geometry, dtype.decode(&bytes, geometry.len())))
}
