//! Raster types shared by every stage: images, binary masks and lobe atlases.

pub mod io;
pub mod phantom;

pub use io::{export_pgm, read_atlas, read_image, read_mask, write_atlas, write_image, write_mask};
pub use phantom::{generate_phantom, insert_lesion, LesionRequest, LesionSpec, PhantomConfig, PhantomSubject};

use crate::error::{Error, Result};

/// Number of lobe labels (4 lobes per hemisphere).
pub const REGION_COUNT: u8 = 8;

/// Row-major 2-D raster of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image dimensions {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} values for a {width}x{height} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp_unit(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Stored modality images lie in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Storage range `[0,1]` to network working range `[-1,1]`.
    pub fn to_working(&self) -> Image {
        self.map(|v| 2.0 * v - 1.0)
    }

    pub fn to_storage(&self) -> Image {
        self.map(|v| (v + 1.0) / 2.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Binary pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} mask values for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.width == img.width() && self.height == img.height()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Per-pixel lobe labels: 0 is background, 1–4 left hemisphere, 5–8 right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atlas {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl Atlas {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} atlas labels for {width}x{height}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > REGION_COUNT) {
            return Err(Error::InvalidArgument(format!("atlas label {bad} outside 0..=8")));
        }
        Ok(Self { width, height, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Pixels with a nonzero label.
    pub fn foreground(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.labels.iter().map(|&l| l != 0).collect() }
    }

    /// Label with the most pixels from `pixels`, ties toward the smaller label.
    /// Returns `None` if every pixel is background.
    pub fn majority_label(&self, pixels: impl IntoIterator<Item = (usize, usize)>) -> Option<u8> {
        let mut counts = [0usize; REGION_COUNT as usize + 1];
        for (r, c) in pixels {
            counts[self.get(r, c) as usize] += 1;
        }
        let mut best: Option<(u8, usize)> = None;
        for label in 1..=REGION_COUNT {
            let n = counts[label as usize];
            if n > 0 && best.is_none_or(|(_, m)| n > m) {
                best = Some((label, n));
            }
        }
        best.map(|(l, _)| l)
    }
}
