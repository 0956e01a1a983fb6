//! Grayscale image files and plain-text data exports.
//!
//! PGM (P2 ASCII and P5 binary, maxval up to 255) is always available. PNG
//! needs the `png` feature.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::quantize;

/// Reads an 8-bit grayscale PGM or PNG into `[0, 255]` reals, unit spacing.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        return load_png(path, &bytes);
    }
    decode_pgm(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Writes `g` clamped and rounded half-up. `.png` selects PNG, anything else
/// binary PGM.
pub fn save_image(g: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return save_png(g, path);
    }
    fs::write(path, encode_pgm(g)).map_err(|e| Error::io(path, e))
}

/// Binary (P5) encoding.
pub fn encode_pgm(g: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", g.width(), g.height()).into_bytes();
    out.extend(g.data().iter().map(|&v| quantize(v)));
    out
}

/// ASCII (P2) encoding, one image row per line.
pub fn encode_pgm_ascii(g: &ImageGrid) -> String {
    let mut out = format!("P2\n{} {}\n255\n", g.width(), g.height());
    for j in 0..g.height() {
        let line: Vec<String> = g.row(j).iter().map(|&v| quantize(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

struct Header<'a> {
    rest: &'a [u8],
}

impl<'a> Header<'a> {
    fn skip_ws_and_comments(&mut self) {
        loop {
            while let Some((&c, tail)) = self.rest.split_first() {
                if c.is_ascii_whitespace() {
                    self.rest = tail;
                } else {
                    break;
                }
            }
            if self.rest.first() == Some(&b'#') {
                let end = self
                    .rest
                    .iter()
                    .position(|&c| c == b'\n')
                    .unwrap_or(self.rest.len());
                self.rest = &self.rest[end..];
            } else {
                return;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_ws_and_comments();
        let len = self.rest.iter().take_while(|c| c.is_ascii_digit()).count();
        if len == 0 {
            return Err(format!("expected {what}"));
        }
        let text = std::str::from_utf8(&self.rest[..len]).unwrap_or_default();
        self.rest = &self.rest[len..];
        text.parse()
            .map_err(|_| format!("{what} '{text}' out of range"))
    }
}

/// Parses a P2 or P5 PGM with maxval <= 255. Samples are rescaled to
/// `[0, 255]` when maxval is smaller.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        Some(b"P1" | b"P3" | b"P4" | b"P6" | b"P7") => {
            return Err("grayscale required: only P2/P5 PGM is supported".into())
        }
        _ => return Err("not a PGM file (missing P2/P5 magic)".into()),
    };
    let mut hdr = Header { rest: &bytes[2..] };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported, 8-bit PGM required"));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| "image dimensions overflow".to_string())?;
    let scale = 255.0 / maxval as f64;
    let samples: Vec<usize> = if binary {
        // Exactly one whitespace byte separates maxval from the raster.
        match hdr.rest.split_first() {
            Some((c, tail)) if c.is_ascii_whitespace() => hdr.rest = tail,
            _ => return Err("missing separator before raster".into()),
        }
        if hdr.rest.len() < n {
            return Err(format!(
                "truncated raster: need {n} bytes, found {}",
                hdr.rest.len()
            ));
        }
        hdr.rest[..n].iter().map(|&b| b as usize).collect()
    } else {
        (0..n)
            .map(|k| hdr.number(&format!("sample {k}")))
            .collect::<std::result::Result<_, _>>()?
    };
    if let Some(bad) = samples.iter().find(|&&s| s > maxval) {
        return Err(format!("sample {bad} exceeds maxval {maxval}"));
    }
    let data = samples
        .into_iter()
        .map(|s| {
            if maxval == 255 {
                s as f64
            } else {
                s as f64 * scale
            }
        })
        .collect();
    ImageGrid::from_vec(width, height, data, 1.0).map_err(|e| e.to_string())
}

#[cfg(feature = "png")]
fn load_png(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    use image::{ColorType, ImageFormat};
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if img.color() != ColorType::L8 {
        return Err(Error::format(
            path,
            format!(
                "grayscale required: PNG is {:?}, expected 8-bit gray",
                img.color()
            ),
        ));
    }
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(f64::from).collect();
    ImageGrid::from_vec(w as usize, h as usize, data, 1.0)
}

#[cfg(not(feature = "png"))]
fn load_png(path: &Path, _bytes: &[u8]) -> Result<ImageGrid> {
    Err(Error::format(
        path,
        "PNG support not built (enable the `png` feature)",
    ))
}

#[cfg(feature = "png")]
fn save_png(g: &ImageGrid, path: &Path) -> Result<()> {
    let raw: Vec<u8> = g.data().iter().map(|&v| quantize(v)).collect();
    let buf = image::GrayImage::from_raw(g.width() as u32, g.height() as u32, raw)
        .ok_or_else(|| Error::format(path, "image buffer size mismatch"))?;
    buf.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(not(feature = "png"))]
fn save_png(_g: &ImageGrid, path: &Path) -> Result<()> {
    Err(Error::format(
        path,
        "PNG support not built (enable the `png` feature)",
    ))
}

/// Two-column CSV `x,intensity` for one image row.
pub fn write_slice_csv(values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("x,intensity\n");
    for (x, v) in values.iter().enumerate() {
        out.push_str(&format!("{x},{v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Whitespace-delimited grid, one image row per line.
pub fn write_surface(g: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for j in 0..g.height() {
        let line: Vec<String> = g.row(j).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
