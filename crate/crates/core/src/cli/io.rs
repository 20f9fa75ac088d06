//! File formats: PFM depth and images, PGM masks, PPM images, KITTI pose
//! text, and CSV tables. Every writer goes through a temp file in the target
//! directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::CliError;
use crate::geometry::{DepthMap, Image, Pose, Trajectory};
use crate::plane::WeightMask;

/// Rotation drift accepted when parsing pose text.
pub const POSE_TOLERANCE: f64 = 1e-4;

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Cursor over a netpbm-style header: whitespace-separated tokens, `#`
/// comments to end of line, and a single whitespace byte before the raster.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Header { bytes, pos: 0 }
    }

    fn token(&mut self) -> Option<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok()).flatten()
    }

    fn number<T: std::str::FromStr>(&mut self, path: &Path, what: &str) -> Result<T, CliError> {
        self.token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| CliError::format(path, format!("missing or invalid {what}")))
    }

    /// Skips the single whitespace byte that ends the header.
    fn raster(self) -> &'a [u8] {
        &self.bytes[(self.pos + 1).min(self.bytes.len())..]
    }
}

/// Raw PFM contents: rows top-to-bottom, channels interleaved.
struct Pfm {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    let row = width * channels;
    for v in (0..height).rev() {
        for x in &data[v * row..(v + 1) * row] {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out
}

fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<Pfm, CliError> {
    let mut h = Header::new(bytes);
    let channels = match h.token() {
        Some("Pf") => 1,
        Some("PF") => 3,
        _ => return Err(CliError::format(path, "not a PFM file")),
    };
    let width: usize = h.number(path, "width")?;
    let height: usize = h.number(path, "height")?;
    let scale: f64 = h.number(path, "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(CliError::format(path, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let raster = h.raster();
    let row = width * channels;
    let expected = row * height * 4;
    if raster.len() < expected {
        return Err(CliError::format(path, format!("raster has {} bytes, expected {expected}", raster.len())));
    }
    let mut data = vec![0.0; row * height];
    for (i, chunk) in raster[..expected].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        // Stored bottom row first.
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = f64::from(x);
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), CliError> {
    write_atomic(path, &encode_pfm(depth.width(), depth.height(), 1, depth.data()))
}

pub fn read_depth(path: &Path) -> Result<DepthMap, CliError> {
    let pfm = decode_pfm(path, &read(path)?)?;
    if pfm.channels != 1 {
        return Err(CliError::format(path, "depth maps must be single-channel PFM"));
    }
    DepthMap::new(pfm.width, pfm.height, pfm.data).map_err(|e| CliError::format(path, e.to_string()))
}

/// Images are written as PFM with one or three channels.
pub fn write_image(path: &Path, image: &Image) -> Result<(), CliError> {
    if !matches!(image.channels(), 1 | 3) {
        return Err(CliError::format(path, "PFM images need one or three channels"));
    }
    write_atomic(path, &encode_pfm(image.width(), image.height(), image.channels(), image.data()))
}

/// Reads a PFM image, or a binary PPM/PGM scaled to [0, 1] by its maxval.
pub fn read_image(path: &Path) -> Result<Image, CliError> {
    let bytes = read(path)?;
    let (width, height, channels, data) = if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_netpbm(path, &bytes)?
    } else {
        let pfm = decode_pfm(path, &bytes)?;
        (pfm.width, pfm.height, pfm.channels, pfm.data)
    };
    Image::new(width, height, channels, data).map_err(|e| CliError::format(path, e.to_string()))
}

/// Binary P5/P6 with 8- or 16-bit samples, normalized by maxval.
fn decode_netpbm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>), CliError> {
    let mut h = Header::new(bytes);
    let channels = match h.token() {
        Some("P5") => 1,
        Some("P6") => 3,
        _ => return Err(CliError::format(path, "expected a binary PGM or PPM")),
    };
    let width: usize = h.number(path, "width")?;
    let height: usize = h.number(path, "height")?;
    let maxval: u32 = h.number(path, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(CliError::format(path, format!("maxval {maxval} out of range")));
    }
    let raster = h.raster();
    let n = width * height * channels;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    if raster.len() < n * bytes_per {
        return Err(CliError::format(path, "raster is truncated"));
    }
    let scale = f64::from(maxval);
    let data = (0..n)
        .map(|i| {
            let raw = if bytes_per == 1 {
                u32::from(raster[i])
            } else {
                u32::from(u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]))
            };
            (f64::from(raw) / scale).min(1.0)
        })
        .collect();
    Ok((width, height, channels, data))
}

/// 8-bit PGM, weight 1.0 stored as 255.
pub fn write_mask(path: &Path, mask: &WeightMask) -> Result<(), CliError> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.weights().iter().map(|w| (w.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(path, &out)
}

pub fn read_mask(path: &Path) -> Result<WeightMask, CliError> {
    let bytes = read(path)?;
    if !bytes.starts_with(b"P5") {
        return Err(CliError::format(path, "masks must be binary PGM (P5)"));
    }
    let (width, height, _, data) = decode_netpbm(path, &bytes)?;
    WeightMask::new(width, height, data).map_err(|e| CliError::format(path, e.to_string()))
}

/// One line per pose: the twelve row-major entries of `[R | t]`, written in
/// shortest round-trip form.
pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let line: Vec<String> = p.to_row_major_3x4().iter().map(|x| format!("{x}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_poses(path: &Path, trajectory: &Trajectory) -> Result<(), CliError> {
    write_atomic(path, format_poses(trajectory.poses()).as_bytes())
}

pub fn parse_poses(path: &Path, text: &str) -> Result<Trajectory, CliError> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::parse(path, line_no, e.to_string()))?;
        if values.len() != 12 {
            return Err(CliError::parse(path, line_no, format!("expected 12 values, found {}", values.len())));
        }
        let v = &values;
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let pose = Pose::from_approximate(r, t, POSE_TOLERANCE).map_err(|e| CliError::parse(path, line_no, e.to_string()))?;
        poses.push(pose);
    }
    Trajectory::new(poses).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn read_poses(path: &Path) -> Result<Trajectory, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_poses(path, &text)
}

/// Buffers CSV rows in memory and writes them atomically on `finish`.
pub struct CsvTable {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).map_err(CliError::csv)?;
        Ok(CsvTable { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(CliError::csv)
    }

    pub fn finish(self, path: &Path) -> Result<(), CliError> {
        let bytes = self.writer.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
        write_atomic(path, &bytes)
    }
}

/// Formats an optional value, leaving the cell empty when absent.
pub fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}
