//! Minimal uncompressed DICOM and 16-bit PGM readers, and the three-channel
//! magnitude / edge-magnitude / edge-angle encoding.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::augment::{resize_bilinear, Image};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";
pub const DICOM_OUTPUT_SIZE: usize = 512;

type Tag = (u16, u16);

const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
const NUMBER_OF_FRAMES: Tag = (0x0028, 0x0008);
const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const RESCALE_INTERCEPT: Tag = (0x0028, 0x1052);
const RESCALE_SLOPE: Tag = (0x0028, 0x1053);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);

fn tag_name((g, e): Tag) -> String {
    format!("({g:04X},{e:04X})")
}

/// A single-frame 16-bit grayscale image. Physical value of pixel `p` is
/// `slope · p + intercept`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGray16 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
    pub slope: f64,
    pub intercept: f64,
}

impl RawGray16 {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("zero-area image {width}×{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Format(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        Ok(RawGray16 {
            width,
            height,
            pixels,
            slope: 1.0,
            intercept: 0.0,
        })
    }

    pub fn with_rescale(mut self, slope: f64, intercept: f64) -> Self {
        self.slope = slope;
        self.intercept = intercept;
        self
    }

    pub fn physical(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&p| self.slope * p as f64 + self.intercept)
            .collect()
    }
}

fn long_length(vr: &[u8]) -> bool {
    matches!(
        vr,
        b"OB" | b"OW" | b"OF" | b"SQ" | b"UT" | b"UN" | b"UC" | b"UR" | b"OD" | b"OL" | b"OV" | b"SV" | b"UV"
    )
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn decimal(tag: Tag, value: &[u8]) -> Result<f64> {
    let s = text(value);
    let first = s.split('\\').next().unwrap_or("").trim();
    first
        .parse()
        .map_err(|_| Error::Format(format!("{} holds non-numeric value {s:?}", tag_name(tag))))
}

fn ushort(tag: Tag, value: &[u8]) -> Result<u16> {
    value
        .get(..2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| Error::Format(format!("{} is shorter than two bytes", tag_name(tag))))
}

pub fn parse_minimal_dicom(path: &Path) -> Result<RawGray16> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dicom_bytes(&bytes)
}

/// Parses a Part-10 file (128-byte preamble, `DICM`) in explicit-VR little
/// endian with 16-bit single-frame grayscale pixel data.
pub fn parse_dicom_bytes(bytes: &[u8]) -> Result<RawGray16> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(Error::Format("missing DICM preamble".into()));
    }
    let mut pos = 132;
    let mut syntax: Option<String> = None;
    let (mut rows, mut cols, mut bits, mut signed) = (None, None, None, false);
    let (mut slope, mut intercept) = (1.0, 0.0);
    let mut pixels: Option<&[u8]> = None;

    while pos + 8 <= bytes.len() {
        let group = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
        let elem = u16::from_le_bytes([bytes[pos + 2], bytes[pos + 3]]);
        let tag = (group, elem);
        if group != 0x0002 {
            match syntax.as_deref() {
                Some(EXPLICIT_VR_LITTLE_ENDIAN) => {}
                Some(other) => {
                    return Err(Error::Unsupported(format!(
                        "transfer syntax {other} in {} (only explicit VR little endian is read)",
                        tag_name(TRANSFER_SYNTAX)
                    )))
                }
                None => {
                    return Err(Error::Unsupported(format!(
                        "missing transfer syntax {}",
                        tag_name(TRANSFER_SYNTAX)
                    )))
                }
            }
        }
        let vr = &bytes[pos + 4..pos + 6];
        let (len, header) = if long_length(vr) {
            let b = bytes
                .get(pos + 8..pos + 12)
                .ok_or_else(|| Error::Format(format!("truncated header of {}", tag_name(tag))))?;
            (u32::from_le_bytes(b.try_into().unwrap()), 12)
        } else {
            (u16::from_le_bytes([bytes[pos + 6], bytes[pos + 7]]) as u32, 8)
        };
        if len == u32::MAX {
            return Err(Error::Unsupported(format!(
                "undefined-length element {}",
                tag_name(tag)
            )));
        }
        let start = pos + header;
        let end = start + len as usize;
        let value = bytes
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("value of {} runs past end of file", tag_name(tag))))?;
        match tag {
            TRANSFER_SYNTAX => syntax = Some(text(value)),
            SAMPLES_PER_PIXEL if ushort(tag, value)? != 1 => {
                return Err(Error::Unsupported(format!("multi-sample pixels in {}", tag_name(tag))))
            }
            NUMBER_OF_FRAMES if decimal(tag, value)? > 1.0 => {
                return Err(Error::Unsupported(format!("multi-frame image in {}", tag_name(tag))))
            }
            ROWS => rows = Some(ushort(tag, value)? as usize),
            COLUMNS => cols = Some(ushort(tag, value)? as usize),
            BITS_ALLOCATED => bits = Some(ushort(tag, value)?),
            PIXEL_REPRESENTATION => signed = ushort(tag, value)? == 1,
            RESCALE_SLOPE => slope = decimal(tag, value)?,
            RESCALE_INTERCEPT => intercept = decimal(tag, value)?,
            PIXEL_DATA => pixels = Some(value),
            _ => {}
        }
        pos = end;
    }

    let rows = rows.ok_or_else(|| Error::Unsupported(format!("missing Rows {}", tag_name(ROWS))))?;
    let cols = cols.ok_or_else(|| Error::Unsupported(format!("missing Columns {}", tag_name(COLUMNS))))?;
    match bits {
        Some(16) => {}
        Some(b) => {
            return Err(Error::Unsupported(format!(
                "BitsAllocated {b} in {} (only 16 is read)",
                tag_name(BITS_ALLOCATED)
            )))
        }
        None => {
            return Err(Error::Unsupported(format!(
                "missing BitsAllocated {}",
                tag_name(BITS_ALLOCATED)
            )))
        }
    }
    let data = pixels.ok_or_else(|| Error::Unsupported(format!("missing PixelData {}", tag_name(PIXEL_DATA))))?;
    let need = rows * cols * 2;
    if data.len() < need {
        return Err(Error::Format(format!(
            "PixelData {} holds {} bytes, {rows}×{cols} needs {need}",
            tag_name(PIXEL_DATA),
            data.len()
        )));
    }
    let mut px: Vec<u16> = data[..need].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    if signed {
        // Store two's-complement samples offset by 2^15 and fold the offset
        // into the intercept so physical values are unchanged.
        for p in &mut px {
            *p = (*p as i16 as i32 + 32768) as u16;
        }
        intercept -= 32768.0 * slope;
    }
    Ok(RawGray16::new(cols, rows, px)?.with_rescale(slope, intercept))
}

fn push_element(out: &mut Vec<u8>, (g, e): Tag, vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&g.to_le_bytes());
    out.extend_from_slice(&e.to_le_bytes());
    out.extend_from_slice(vr);
    if long_length(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

fn padded(s: &str, pad: u8) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

/// Writes the subset [`parse_dicom_bytes`] understands, declaring
/// `transfer_syntax`.
pub fn encode_minimal_dicom(raw: &RawGray16, transfer_syntax: &str) -> Vec<u8> {
    let mut meta = Vec::new();
    push_element(&mut meta, TRANSFER_SYNTAX, b"UI", &padded(transfer_syntax, 0));
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    push_element(&mut out, (0x0002, 0x0000), b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    push_element(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes());
    push_element(&mut out, ROWS, b"US", &(raw.height as u16).to_le_bytes());
    push_element(&mut out, COLUMNS, b"US", &(raw.width as u16).to_le_bytes());
    push_element(&mut out, BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
    push_element(&mut out, PIXEL_REPRESENTATION, b"US", &0u16.to_le_bytes());
    push_element(&mut out, RESCALE_INTERCEPT, b"DS", &padded(&raw.intercept.to_string(), b' '));
    push_element(&mut out, RESCALE_SLOPE, b"DS", &padded(&raw.slope.to_string(), b' '));
    let px: Vec<u8> = raw.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
    push_element(&mut out, PIXEL_DATA, b"OW", &px);
    out
}

/// Binary PGM (`P5`) with big-endian samples when `maxval > 255`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<RawGray16> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(Error::Format("PGM magic is not P5".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Format(format!("PGM {what} is not a number")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    let body = bytes.get(pos + 1..).unwrap_or(&[]);
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    if body.len() < need {
        return Err(Error::Format(format!("PGM payload has {} bytes, needs {need}", body.len())));
    }
    let pixels = if wide {
        body[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        body[..need].iter().map(|&b| b as u16).collect()
    };
    RawGray16::new(width, height, pixels)
}

pub fn read_pgm16(path: &Path) -> Result<RawGray16> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm16(&bytes)
}

pub fn encode_pgm16(raw: &RawGray16) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", raw.width, raw.height).into_bytes();
    for p in &raw.pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

/// 3×3 Sobel responses `(g_x, g_y)` with replicated borders.
pub fn sobel(values: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, height as isize - 1) as usize;
        let x = x.clamp(0, width as isize - 1) as usize;
        values[y * width + x]
    };
    let mut gx = Vec::with_capacity(values.len());
    let mut gy = Vec::with_capacity(values.len());
    for y in 0..height as isize {
        for x in 0..width as isize {
            let right = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1);
            let left = at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1);
            let below = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1);
            let above = at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1);
            // Adding +0.0 turns -0.0 into +0.0 so atan2 never lands on -π.
            gx.push(right - left + 0.0);
            gy.push(below - above + 0.0);
        }
    }
    (gx, gy)
}

/// Red = min-max normalized magnitude, green = Sobel magnitude over its
/// maximum, blue = edge angle `(θ + π) / 2π` (0 where there is no edge),
/// resized to `size × size`.
pub fn dicom_to_rgb(raw: &RawGray16, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = (raw.height, raw.width);
    if h == 0 || w == 0 || raw.pixels.len() != h * w {
        return Err(Error::Format(format!("invalid {w}×{h} image")));
    }
    let phys = raw.physical();
    let lo = phys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = phys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let red: Vec<f64> = if hi > lo {
        phys.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; phys.len()]
    };
    let (gx, gy) = sobel(&red, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    let mut data = Vec::with_capacity(3 * h * w);
    data.extend(red.iter().map(|&v| v as f32));
    data.extend(mag.iter().map(|&m| if peak > 0.0 { (m / peak) as f32 } else { 0.0 }));
    data.extend(gx.iter().zip(&gy).zip(&mag).map(|((&x, &y), &m)| {
        if m > 0.0 {
            ((y.atan2(x) + PI) / (2.0 * PI)) as f32
        } else {
            0.0
        }
    }));
    let img = Image::new(3, h, w, data)?;
    Ok(resize_bilinear(&img, size, size)?.into_tensor())
}
