//! Minimal NIfTI-1 reader/writer (single-file `.nii`, optionally gzipped,
//! and `.hdr`/`.img` pairs for reading).

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use log::warn;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            other => {
                return Err(Error::format(
                    "datatype",
                    format!("unsupported datatype code {other} (expected 2, 4, 16 or 64)"),
                ))
            }
        })
    }

    fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// A NIfTI-1 image with its voxel data widened to `f64`.
///
/// `data` is in file order: the first dimension varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: Vec<usize>,
    /// `pixdim[1..=dims.len()]` of the header.
    pub pixdim: Vec<f64>,
    pub affine: [[f64; 4]; 4],
    pub datatype: Datatype,
    pub intent_name: String,
    pub descrip: String,
    pub data: Vec<f64>,
}

impl NiftiImage {
    pub fn new(dims: Vec<usize>, data: Vec<f64>, datatype: Datatype) -> Self {
        let pixdim = vec![1.0; dims.len()];
        Self {
            dims,
            pixdim,
            affine: identity(),
            datatype,
            intent_name: String::new(),
            descrip: String::new(),
            data,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn identity() -> [[f64; 4]; 4] {
    let mut a = [[0.0; 4]; 4];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    a
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().expect("4 bytes");
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn text(&self, at: usize, len: usize) -> String {
        let raw = &self.bytes[at..at + len];
        let end = raw.iter().position(|&c| c == 0).unwrap_or(len);
        String::from_utf8_lossy(&raw[..end]).into_owned()
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format("gzip", e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn image_path_for(header_path: &Path) -> PathBuf {
    let s = header_path.to_string_lossy();
    if let Some(stem) = s.strip_suffix(".hdr.gz") {
        PathBuf::from(format!("{stem}.img.gz"))
    } else if let Some(stem) = s.strip_suffix(".hdr") {
        PathBuf::from(format!("{stem}.img"))
    } else {
        header_path.with_extension("img")
    }
}

/// Header fields needed to interpret the voxel payload.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: Vec<usize>,
    pub pixdim: Vec<f64>,
    pub affine: [[f64; 4]; 4],
    pub datatype: Datatype,
    pub intent_name: String,
    pub descrip: String,
    vox_offset: f32,
    slope: f64,
    inter: f64,
    big_endian: bool,
    single_file: bool,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            "sizeof_hdr",
            format!("file holds {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")),
        i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")),
    ) {
        (348, _) => false,
        (_, 348) => true,
        (v, _) => return Err(Error::format("sizeof_hdr", format!("expected 348, found {v}"))),
    };
    let h = Cursor { bytes, big_endian };
    let magic = &bytes[344..348];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(Error::format("magic", format!("unrecognized magic {magic:?}"))),
    };
    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format("dim[0]", format!("dimension count {ndim} outside 1..=7")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let d = h.i16(40 + 2 * i);
        if d < 1 {
            return Err(Error::format(format!("dim[{i}]"), format!("non-positive extent {d}")));
        }
        dims.push(d as usize);
    }
    let datatype = Datatype::from_code(h.i16(70))?;
    let bitpix = h.i16(72);
    if bitpix as usize != datatype.size() * 8 {
        return Err(Error::format(
            "bitpix",
            format!("{bitpix} bits per voxel disagrees with datatype"),
        ));
    }
    let qfac = if h.f32(76) < 0.0 { -1.0 } else { 1.0 };
    let pixdim: Vec<f64> = (1..=ndim as usize).map(|i| h.f32(76 + 4 * i) as f64).collect();
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    let affine = if sform_code > 0 {
        let mut a = identity();
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = h.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        a
    } else if qform_code > 0 {
        let q = [h.f32(256), h.f32(260), h.f32(264)].map(|v| v as f64);
        let off = [h.f32(268), h.f32(272), h.f32(276)].map(|v| v as f64);
        let pd = [0, 1, 2].map(|i| pixdim.get(i).copied().unwrap_or(1.0));
        quaternion_affine(q, off, pd, qfac)
    } else {
        warn!("{}: no sform or qform, using identity affine", path.display());
        identity()
    };
    let vox_offset = h.f32(108);
    if single_file && vox_offset < HEADER_SIZE as f32 {
        return Err(Error::format("vox_offset", format!("{vox_offset} lies inside the header")));
    }
    Ok(NiftiHeader {
        dims,
        pixdim,
        affine,
        datatype,
        intent_name: h.text(328, 16),
        descrip: h.text(148, 80),
        vox_offset,
        slope: h.f32(112) as f64,
        inter: h.f32(116) as f64,
        big_endian,
        single_file,
    })
}

/// Reads only the 348-byte header.
pub fn read_nifti_header(path: &Path) -> Result<NiftiHeader> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = [0u8; 2];
    let n = file.read(&mut first).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader: Box<dyn Read> = if n == 2 && first == [0x1f, 0x8b] {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut buf = Vec::with_capacity(HEADER_SIZE);
    reader
        .by_ref()
        .take(HEADER_SIZE as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&buf, path)
}

pub fn load_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = read_all(path)?;
    let hdr = parse_header(&bytes, path)?;
    let big_endian = hdr.big_endian;
    let datatype = hdr.datatype;
    let n: usize = hdr.dims.iter().product();
    let separate;
    let (payload, start): (&[u8], usize) = if hdr.single_file {
        (&bytes, hdr.vox_offset as usize)
    } else {
        separate = read_all(&image_path_for(path))?;
        (&separate, hdr.vox_offset.max(0.0) as usize)
    };
    let need = start + n * datatype.size();
    if payload.len() < need {
        return Err(Error::format(
            "vox_offset",
            format!("data truncated: need {need} bytes, file holds {}", payload.len()),
        ));
    }
    let raw = &payload[start..need];
    let mut data: Vec<f64> = match datatype {
        Datatype::Uint8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => raw
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            })
            .collect(),
        Datatype::Float32 => raw
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().expect("4 bytes");
                (if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            })
            .collect(),
        Datatype::Float64 => raw
            .chunks_exact(8)
            .map(|c| {
                let b: [u8; 8] = c.try_into().expect("8 bytes");
                if big_endian {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            })
            .collect(),
    };
    let (slope, inter) = (hdr.slope, hdr.inter);
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage {
        dims: hdr.dims,
        pixdim: hdr.pixdim,
        affine: hdr.affine,
        datatype,
        intent_name: hdr.intent_name,
        descrip: hdr.descrip,
        data,
    })
}

fn quaternion_affine(q: [f64; 3], offset: [f64; 3], pixdim: [f64; 3], qfac: f64) -> [[f64; 4]; 4] {
    let [b, c, d] = q;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
    let mut out = identity();
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out
}

fn put_text(buf: &mut [u8], at: usize, len: usize, text: &str) {
    let bytes = text.as_bytes();
    let n = bytes.len().min(len - 1);
    buf[at..at + n].copy_from_slice(&bytes[..n]);
}

/// Writes a single-file NIfTI-1 image; a `.gz` suffix selects gzip.
pub fn save_nifti(image: &NiftiImage, path: &Path) -> Result<()> {
    if image.dims.is_empty() || image.dims.len() > 7 {
        return Err(Error::InvalidInput(format!("{} dimensions not supported", image.dims.len())));
    }
    if image.data.len() != image.n_voxels() {
        return Err(Error::Shape(format!(
            "{} values for dims {:?}",
            image.data.len(),
            image.dims
        )));
    }
    if let Some(d) = image.dims.iter().find(|&&d| d > i16::MAX as usize) {
        return Err(Error::InvalidInput(format!("extent {d} exceeds NIfTI-1 limits")));
    }
    let mut hdr = vec![0u8; SINGLE_FILE_OFFSET];
    let put_i16 = |buf: &mut [u8], at: usize, v: i16| buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |buf: &mut [u8], at: usize, v: f32| buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
    hdr[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut hdr, 40, image.dims.len() as i16);
    for (i, &d) in image.dims.iter().enumerate() {
        put_i16(&mut hdr, 42 + 2 * i, d as i16);
    }
    for i in image.dims.len() + 1..8 {
        put_i16(&mut hdr, 40 + 2 * i, 1);
    }
    put_i16(&mut hdr, 70, image.datatype.code());
    put_i16(&mut hdr, 72, (image.datatype.size() * 8) as i16);
    put_f32(&mut hdr, 76, 1.0);
    for (i, &p) in image.pixdim.iter().enumerate().take(7) {
        put_f32(&mut hdr, 80 + 4 * i, p as f32);
    }
    put_f32(&mut hdr, 108, SINGLE_FILE_OFFSET as f32);
    put_f32(&mut hdr, 112, 1.0);
    hdr[123] = 2 | 8; // mm, seconds
    put_text(&mut hdr, 148, 80, &image.descrip);
    put_i16(&mut hdr, 254, 2);
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut hdr, 280 + 16 * r + 4 * c, image.affine[r][c] as f32);
        }
    }
    put_text(&mut hdr, 328, 16, &image.intent_name);
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut body = Vec::with_capacity(image.data.len() * image.datatype.size());
    match image.datatype {
        Datatype::Uint8 => body.extend(image.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
        Datatype::Int16 => {
            for &v in &image.data {
                body.extend_from_slice(&(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).to_le_bytes());
            }
        }
        Datatype::Float32 => {
            for &v in &image.data {
                body.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Datatype::Float64 => {
            for &v in &image.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let result = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&hdr)
            .and_then(|_| enc.write_all(&body))
            .and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&hdr).and_then(|_| w.write_all(&body)).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image(datatype: Datatype) -> NiftiImage {
        let dims = vec![8, 8, 8, 3];
        let n: usize = dims.iter().product();
        let data = (0..n).map(|i| ((i * 7919) % 1000) as f64 * 0.37 - 50.0).collect::<Vec<_>>();
        let data = match datatype {
            Datatype::Float32 => data.into_iter().map(|v| v as f32 as f64).collect(),
            _ => data,
        };
        let mut img = NiftiImage::new(dims, data, datatype);
        img.pixdim = vec![0.76, 0.76, 0.76, 1.0];
        img.affine = [
            [0.76, 0.0, 0.0, -10.5],
            [0.0, 0.76, 0.0, 3.25],
            [0.0, 0.0, 0.76, 7.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        img.intent_name = "lmax=8;desc;odf".into();
        img
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (dt, name) in [(Datatype::Float32, "a.nii"), (Datatype::Float64, "b.nii.gz")] {
            let img = sample_image(dt);
            let path = dir.path().join(name);
            save_nifti(&img, &path).unwrap();
            let back = load_nifti(&path).unwrap();
            assert_eq!(back.dims, img.dims);
            assert_eq!(back.data, img.data);
            assert_eq!(back.intent_name, img.intent_name);
            for (a, b) in back.pixdim.iter().zip(&img.pixdim) {
                assert_eq!(*a as f32, *b as f32);
            }
            for r in 0..3 {
                for c in 0..4 {
                    assert_eq!(back.affine[r][c] as f32, img.affine[r][c] as f32);
                }
            }
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.nii");
        save_nifti(&sample_image(Datatype::Float32), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        match load_nifti(&path) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.nii");
        save_nifti(&sample_image(Datatype::Float64), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn large_header_dims_are_exposed() {
        let mut hdr = vec![0u8; SINGLE_FILE_OFFSET];
        hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [4i16, 190, 224, 178, 70].iter().enumerate() {
            hdr[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        hdr[70..72].copy_from_slice(&2i16.to_le_bytes());
        hdr[72..74].copy_from_slice(&8i16.to_le_bytes());
        hdr[108..112].copy_from_slice(&352f32.to_le_bytes());
        hdr[344..348].copy_from_slice(b"n+1\0");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.nii");
        std::fs::write(&path, &hdr).unwrap();
        let h = read_nifti_header(&path).unwrap();
        assert_eq!(h.dims, vec![190, 224, 178, 70]);
        assert_eq!(h.affine, identity());
        // The payload is missing, so a full load reports the truncation.
        assert!(matches!(load_nifti(&path), Err(Error::Format { field, .. }) if field == "vox_offset"));
    }

    #[test]
    fn integer_types_and_qform() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.nii");
        let mut img = NiftiImage::new(vec![2, 2, 2], vec![0.0, 1.0, 2.0, -3.0, 4.0, 5.0, 6.0, 7.0], Datatype::Int16);
        img.pixdim = vec![2.0, 2.0, 2.0];
        save_nifti(&img, &path).unwrap();
        let back = load_nifti(&path).unwrap();
        assert_eq!(back.data, img.data);

        // Switch the file to qform-only with identity rotation.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[252..254].copy_from_slice(&1i16.to_le_bytes());
        bytes[254..256].copy_from_slice(&0i16.to_le_bytes());
        bytes[268..272].copy_from_slice(&5f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let back = load_nifti(&path).unwrap();
        assert_eq!(back.affine[0], [2.0, 0.0, 0.0, 5.0]);
        assert_eq!(back.affine[2], [0.0, 0.0, 2.0, 0.0]);
    }
}
