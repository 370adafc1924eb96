//! Flow and image containers, file formats, synthetic warped pairs,
//! evaluation metrics, and flow visualization.

pub mod flo;
pub mod metrics;
pub mod ppm;
pub mod synthetic;
pub mod viz;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no valid pixels")]
    EmptyValid,
    #[error("bad sample spec: {0}")]
    BadSpec(String),
}

/// RGB image, row-major [h, w, 3], values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image { h, w, rgb: vec![0.0; h * w * 3] }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.rgb[(y * self.w + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.rgb[(y * self.w + x) * 3 + c] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.rgb.iter().all(|v| v.is_finite())
    }
}

/// Dense displacement field, row-major [h, w, 2] with (dx, dy) per pixel
/// (dx along width), plus a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub flow: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { h, w, flow: vec![0.0; h * w * 2], valid: vec![true; h * w] }
    }

    pub fn dx(&self, y: usize, x: usize) -> f32 {
        self.flow[(y * self.w + x) * 2]
    }

    pub fn dy(&self, y: usize, x: usize) -> f32 {
        self.flow[(y * self.w + x) * 2 + 1]
    }

    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        let i = (y * self.w + x) * 2;
        self.flow[i] = dx;
        self.flow[i + 1] = dy;
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.w + x]
    }
}
