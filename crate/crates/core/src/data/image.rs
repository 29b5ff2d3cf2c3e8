use super::DataError;

/// Row-major `height × width × 3` RGB image with values in `[0, 1]`.
///
/// Generated images only hold multiples of 1/255 so that 8-bit files round-trip exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Image::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb.map(byte_to_unit));
        }
        img
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        Image {
            width,
            height,
            data: bytes.iter().map(|&b| byte_to_unit(b)).collect(),
        }
    }

    /// Values clamped to `[0, 1]` and rounded to the nearest 8-bit level.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| unit_to_byte(v)).collect()
    }

    pub fn quantized(&self) -> Image {
        Image::from_bytes(self.width, self.height, &self.to_bytes())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3 × height × width` copy, the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(width: usize, height: usize, planar: &[f32]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[p * 3 + c] = planar[c * plane + p];
            }
        }
        Image { width, height, data }
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub(crate) fn byte_to_unit(b: u8) -> f32 {
    f32::from(b) / 255.0
}

pub(crate) fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary region over an image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }
}

/// Replace every masked pixel by `fill`; all other pixels are untouched.
pub fn fill_masked(image: &Image, mask: &Mask, fill: [f32; 3]) -> Result<Image, DataError> {
    if image.width != mask.width || image.height != mask.height {
        return Err(DataError::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width, mask.height, image.width, image.height
        )));
    }
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_mut(3).zip(&mask.bits) {
        if m {
            px.copy_from_slice(&fill);
        }
    }
    Ok(out)
}

/// 0.299 R + 0.587 G + 0.114 B, then the 4-neighbour Laplacian with zero padding,
/// absolute value, min-max normalisation to `[0, 1]`, replicated to three channels.
/// An all-zero response stays all zero.
pub fn derive_shape_instance(image: &Image) -> Image {
    let (w, h) = (image.width, image.height);
    let gray: Vec<f64> = image
        .data
        .chunks(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            gray[y as usize * w + x as usize]
        }
    };
    let mut response = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let lap = at(x, y - 1) + at(x - 1, y) + at(x + 1, y) + at(x, y + 1) - 4.0 * at(x, y);
            response[y as usize * w + x as usize] = lap.abs();
        }
    }
    let min = response.iter().copied().fold(f64::INFINITY, f64::min);
    let max = response.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = Image::new(w, h);
    for (px, &r) in out.data.chunks_mut(3).zip(&response) {
        let v = if range > 0.0 { ((r - min) / range) as f32 } else { 0.0 };
        px.fill(v);
    }
    out
}
