use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim("image", format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, data.len())));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Top-left `w × h` window.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::dim("crop", format!("{w}x{h} at ({x0},{y0}) exceeds {}x{}", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let o = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[o..o + w * 3]);
        }
        Ok(Image { width: w, height: h, data })
    }

    /// Planar CHW values on the `[0, 255]` scale.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[c * hw + i] = self.data[i * 3 + c] as f64;
            }
        }
        out
    }

    /// `1 × 3 × H × W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.to_planar()).expect("consistent image size")
    }

    /// Round and clamp planar CHW values back to 8 bits.
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Image> {
        let hw = width * height;
        if planar.len() != 3 * hw {
            return Err(Error::dim("image", format!("{} planar values for {width}x{height}", planar.len())));
        }
        let mut data = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = planar[c * hw + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(Image { width, height, data })
    }

    /// Image from sample `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let (_, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::dim("image", format!("expected 3 channels on axis 1, got {c}")));
        }
        Image::from_planar(w, h, t.sample(n))
    }
}

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::io(path, detail)
}

/// Binary PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, "truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| parse_err(path, "non-ASCII PPM header"))?.to_string());
    }
    if fields[0] != "P6" {
        return Err(parse_err(path, format!("unsupported format `{}` (only binary P6)", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| parse_err(path, format!("bad {what} `{s}`")));
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if maxval != 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(parse_err(path, format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(pos))));
    }
    Image::new(w, h, bytes[pos..pos + need].to_vec())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e.to_string()))?;
    decode_ppm(&bytes, path)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e.to_string()))
}

/// All `.ppm` files in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e.to_string()))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            load_image(&p).map(|img| (name, img))
        })
        .collect()
}
