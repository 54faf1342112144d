use crate::error::{DpatError, Result};
use crate::tensor::Tensor;

/// A video clip stored as `(T, H, W, C)` row-major pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
    pub label: usize,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f64>,
        label: usize,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(DpatError::DimensionMismatch("clip axes must be non-empty".into()));
        }
        if pixels.len() != frames * height * width * channels {
            return Err(DpatError::DimensionMismatch(format!(
                "{} pixels for a {frames}x{height}x{width}x{channels} clip",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DpatError::Data(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            pixels,
            label,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width * self.channels;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Same clip with its frame order reversed.
    pub fn reversed(&self) -> Self {
        let n = self.height * self.width * self.channels;
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for t in (0..self.frames).rev() {
            pixels.extend_from_slice(&self.pixels[t * n..(t + 1) * n]);
        }
        Self {
            pixels,
            ..self.clone()
        }
    }
}

/// Per-frame token sequences, shape `(T, N+1, D)`; token 0 of every frame
/// is the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    frames: usize,
    tokens: usize,
    dim: usize,
    data: Tensor,
}

impl TokenTensor {
    pub fn new(frames: usize, tokens: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::from_vec(&[frames, tokens, dim], data)?;
        Ok(Self {
            frames,
            tokens,
            dim,
            data,
        })
    }

    pub fn from_tensor(frames: usize, tokens: usize, t: Tensor) -> Result<Self> {
        let dim = t.cols();
        let data = t.reshape(&[frames, tokens, dim])?;
        Ok(Self {
            frames,
            tokens,
            dim,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.tokens, self.dim)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    pub fn token(&self, t: usize, n: usize) -> &[f64] {
        let off = (t * self.tokens + n) * self.dim;
        &self.data.data()[off..off + self.dim]
    }

    /// Flattened `(T·(N+1), D)` matrix in frame-major order.
    pub fn as_rows(&self) -> Tensor {
        self.data
            .clone()
            .reshape(&[self.frames * self.tokens, self.dim])
            .expect("row view")
    }

    /// `(T, N+1, D)` → `(N+1, T, D)` as a flat row matrix.
    pub fn to_token_major(&self) -> Tensor {
        let rows = gather(&self.data, &token_major_index(self.frames, self.tokens), self.dim);
        Tensor::from_vec(&[self.tokens, self.frames, self.dim], rows).expect("token-major view")
    }

    pub fn bit_eq(&self, other: &TokenTensor) -> bool {
        self.data.bit_eq(&other.data)
    }
}

fn gather(t: &Tensor, index: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(index.len() * dim);
    for &i in index {
        out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
    }
    out
}

/// Row permutation taking frame-major `(T, L)` order to token-major `(L, T)`.
pub fn token_major_index(frames: usize, tokens: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(frames * tokens);
    for n in 0..tokens {
        for t in 0..frames {
            idx.push(t * tokens + n);
        }
    }
    idx
}

/// Inverse of [`token_major_index`].
pub fn frame_major_index(frames: usize, tokens: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(frames * tokens);
    for t in 0..frames {
        for n in 0..tokens {
            idx.push(n * frames + t);
        }
    }
    idx
}
