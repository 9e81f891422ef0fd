//! Pixel containers shared by the scene generator, LSE and the encoder.

use std::fmt;

/// RGB image, row-major `H × W × 3`, channel values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), height * width * 3);
        Self {
            height,
            width,
            pixels: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        }
    }

    /// Quantizes back to bytes. Exact for images built by [`Image::from_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resampling of the region `[y0, y1) × [x0, x1)` to
    /// `height × width` (pixel-center aligned).
    pub fn resize_region(&self, y0: usize, x0: usize, y1: usize, x1: usize, height: usize, width: usize) -> Image {
        let mut out = Image::new(height, width);
        let sy = (y1 - y0) as f32 / height as f32;
        let sx = (x1 - x0) as f32 / width as f32;
        for oy in 0..height {
            let fy = (y0 as f32 + (oy as f32 + 0.5) * sy - 0.5).clamp(y0 as f32, (y1 - 1) as f32);
            let iy = fy.floor() as usize;
            let iy1 = (iy + 1).min(y1 - 1);
            let wy = fy - iy as f32;
            for ox in 0..width {
                let fx = (x0 as f32 + (ox as f32 + 0.5) * sx - 0.5).clamp(x0 as f32, (x1 - 1) as f32);
                let ix = fx.floor() as usize;
                let ix1 = (ix + 1).min(x1 - 1);
                let wx = fx - ix as f32;
                let mut rgb = [0.0; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let top = self.get(iy, ix, c) * (1.0 - wx) + self.get(iy, ix1, c) * wx;
                    let bot = self.get(iy1, ix, c) * (1.0 - wx) + self.get(iy1, ix1, c) * wx;
                    *v = top * (1.0 - wy) + bot * wy;
                }
                out.set(oy, ox, rgb);
            }
        }
        out
    }
}

/// A clip of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub frames: Vec<Image>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn extent(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), Image::extent)
    }
}

/// Binary mask, row-major `H × W`, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn fill_rect(&mut self, r: &Rect) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.data[y * self.width + x] = 1;
            }
        }
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn subtract(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            if b != 0 {
                *a = 0;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<Rect> {
        let mut bb: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let r = bb.get_or_insert(Rect { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    r.x0 = r.x0.min(x);
                    r.y0 = r.y0.min(y);
                    r.x1 = r.x1.max(x + 1);
                    r.y1 = r.y1.max(y + 1);
                }
            }
        }
        bb
    }

    /// Whether a point in pixel coordinates falls on a set pixel.
    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        if !(x >= 0.0 && y >= 0.0) {
            return false;
        }
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        xi < self.width && yi < self.height && self.get(yi, xi)
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x0 as f32 && x < self.x1 as f32 && y >= self.y0 as f32 && y < self.y1 as f32
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}
