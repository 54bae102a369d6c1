//! Binary netpbm IO: 8-bit PGM (`P5`) for grayscale and PPM (`P6`) for RGB.
//!
//! This is the only image format the tools speak. Values map linearly between
//! bytes and `[0, 1]` floats (`v / 255` on read, `round(clamp(v) * 255)` on
//! write). Only `maxval = 255` files are accepted.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageF;

/// Read a binary PGM/PPM file into an [`ImageF`].
pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    })
}

/// Write an [`ImageF`] as binary PGM (1 channel) or PPM (3 channels).
pub fn write_pnm(path: impl AsRef<Path>, img: &ImageF) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(img.data().len() + 32);
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{} {}\n255\n", img.width(), img.height()).expect("vec write");
    for &v in img.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn decode(bytes: &[u8]) -> std::result::Result<ImageF, String> {
    let mut pos = 0usize;

    let magic = next_token(bytes, &mut pos).ok_or("missing magic number")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}, want P5 or P6")),
    };

    let mut header = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| format!("missing {name}"))?;
        header[i] = tok
            .parse()
            .map_err(|_| format!("bad {name} {tok:?}"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval != 255 {
        return Err(format!("only 8-bit images supported (maxval 255), got {maxval}"));
    }

    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing separator before raster".into());
    }
    pos += 1;

    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos))?;
    let data = raster.iter().map(|&b| b as f64 / 255.0).collect();
    ImageF::from_vec(width, height, channels, data).map_err(|e| e.to_string())
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}
