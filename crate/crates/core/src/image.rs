//! RGB images with values in [0, 1], lossless PPM/PGM codecs and PNG
//! decoding for real data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `H×W×3` image with channel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Copy of the `h×w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "crop {h}×{w} at ({top}, {left}) outside {}×{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let start = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image { height: h, width: w, data })
    }

    /// Bilinear resize of the region `[y0, y0+h) × [x0, x0+w)` (in source
    /// pixels, possibly fractional) to `out_h×out_w`, sampling pixel centers.
    pub fn resize_region(&self, y0: f64, x0: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Image {
        let sy = h / out_h as f64;
        let sx = w / out_w as f64;
        let sample = |pos: f64, len: usize| {
            let p = pos.clamp(0.0, (len - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, p - lo as f64)
        };
        Image::from_fn(out_h, out_w, |oy, ox| {
            let (y_lo, y_hi, fy) = sample(y0 + (oy as f64 + 0.5) * sy - 0.5, self.height);
            let (x_lo, x_hi, fx) = sample(x0 + (ox as f64 + 0.5) * sx - 0.5, self.width);
            let (a, b, c, d) = (
                self.pixel(y_lo, x_lo),
                self.pixel(y_lo, x_hi),
                self.pixel(y_hi, x_lo),
                self.pixel(y_hi, x_hi),
            );
            std::array::from_fn(|k| {
                let top = a[k] + (b[k] - a[k]) * fx;
                let bottom = c[k] + (d[k] - c[k]) * fx;
                top + (bottom - top) * fy
            })
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resize_region(0.0, 0.0, self.height as f64, self.width as f64, out_h, out_w)
    }

    /// Largest centered square, resized to `size×size`.
    pub fn center_square(&self, size: usize) -> Image {
        let side = self.height.min(self.width);
        let top = (self.height - side) / 2;
        let left = (self.width - side) / 2;
        self.crop(top, left, side, side)
            .expect("centered square fits")
            .resize(size, size)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, 3], self.data.clone()).expect("consistent image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        match t.shape() {
            &[h, w, 3] => Image::new(h, w, t.data().to_vec()),
            s => Err(Error::Shape(format!("expected [H, W, 3], got {s:?}"))),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| to_u8(*v)).collect()
    }

    fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Image {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Image { height, width, data }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks equally sized images into a `[B, H, W, 3]` tensor.
pub fn stack_images(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("cannot stack an empty image list".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "mixed image sizes {h}×{w} and {}×{}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(&[images.len(), h, w, 3], data)
}

/// Splits a `[B, H, W, 3]` tensor back into images.
pub fn unstack_images(batch: &Tensor) -> Result<Vec<Image>> {
    match batch.shape() {
        &[_, h, w, 3] => Ok(batch
            .data()
            .chunks(h * w * 3)
            .map(|c| Image::new(h, w, c.to_vec()).expect("chunk matches shape"))
            .collect()),
        s => Err(Error::Shape(format!("expected [B, H, W, 3], got {s:?}"))),
    }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Loads a binary PPM (P6, maxval 255) or PNG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| decode_err(path, e.to_string()))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes).map_err(|r| decode_err(path, r))
    } else if bytes.starts_with(b"\x89PNG") {
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
            .map_err(|e| decode_err(path, e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image::from_bytes(h as usize, w as usize, img.as_raw()))
    } else {
        Err(decode_err(path, "unsupported format (expected binary PPM or PNG)"))
    }
}

/// Parses the whitespace-separated header fields of a PNM file, skipping
/// comments. Returns the fields and the offset of the pixel data.
fn pnm_header(bytes: &[u8], fields: usize) -> std::result::Result<(Vec<usize>, usize), String> {
    let mut values = Vec::new();
    let mut i = 2;
    while values.len() < fields {
        match bytes.get(i) {
            None => return Err("truncated header".into()),
            Some(b'#') => {
                while bytes.get(i).is_some_and(|&b| b != b'\n') {
                    i += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => i += 1,
            Some(b) if b.is_ascii_digit() => {
                let start = i;
                while bytes.get(i).is_some_and(u8::is_ascii_digit) {
                    i += 1;
                }
                let text = std::str::from_utf8(&bytes[start..i]).map_err(|e| e.to_string())?;
                values.push(text.parse::<usize>().map_err(|e| e.to_string())?);
            }
            Some(b) => return Err(format!("unexpected byte {b:#04x} in header")),
        }
    }
    if !bytes.get(i).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    Ok((values, i + 1))
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let (v, offset) = pnm_header(bytes, 3)?;
    let (w, h, max) = (v[0], v[1], v[2]);
    if max != 255 {
        return Err(format!("only maxval 255 is supported, got {max}"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    let body = &bytes[offset..];
    if body.len() < w * h * 3 {
        return Err(format!("expected {} pixel bytes, found {}", w * h * 3, body.len()));
    }
    Ok(Image::from_bytes(h, w, &body[..w * h * 3]))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(img))
}

/// Saves an 8-bit grayscale PGM (P5) from values in [0, 1].
pub fn save_pgm(values: &[f64], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!("{} values for a {height}×{width} map", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| to_u8(*v)));
    write_file(path.as_ref(), &out)
}

/// Reads a P5 grayscale map written by [`save_pgm`].
pub fn load_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| decode_err(path, e.to_string()))?;
    if !bytes.starts_with(b"P5") {
        return Err(decode_err(path, "not a binary PGM"));
    }
    let (v, offset) = pnm_header(&bytes, 3).map_err(|r| decode_err(path, r))?;
    let (w, h) = (v[0], v[1]);
    let body = bytes.get(offset..offset + w * h).ok_or_else(|| decode_err(path, "truncated pixel data"))?;
    Ok((h, w, body.to_vec()))
}
