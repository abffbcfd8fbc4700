//! Deterministic 2-D brain phantoms with paired MRI/PET, a gray-matter mask,
//! an 8-sector lobe atlas, and optional hypometabolic lesions.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Atlas, Image, Mask};
use crate::error::{Error, Result};

pub const MRI_GRAY: f64 = 0.55;
pub const MRI_WHITE: f64 = 0.8;
pub const PET_GRAY: f64 = 0.85;
pub const PET_WHITE: f64 = 0.45;

#[derive(Clone, Debug, PartialEq)]
pub struct LesionRequest {
    pub radius: f64,
    pub contrast: f64,
    /// Disk center `(row, col)`; chosen at random inside the cortex when absent.
    pub center: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    /// Gray-matter ring thickness in pixels; scales with raster size when `None`.
    pub gm_thickness: Option<f64>,
    pub noise_sigma: f64,
    pub field_amplitude: f64,
    pub lesion: Option<LesionRequest>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, gm_thickness: None, noise_sigma: 0.02, field_amplitude: 0.1, lesion: None }
    }
}

impl PhantomConfig {
    pub fn square(size: usize) -> Self {
        Self { width: size, height: size, ..Self::default() }
    }

    pub fn with_lesion(mut self, radius: f64, contrast: f64) -> Self {
        self.lesion = Some(LesionRequest { radius, contrast, center: None });
        self
    }

    fn scale(&self) -> f64 {
        self.width.min(self.height) as f64 / 64.0
    }

    pub fn thickness(&self) -> f64 {
        self.gm_thickness.unwrap_or(10.0 * self.scale())
    }
}

/// Hypometabolic disk. Lesion pixels are the disk pixels inside gray matter.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionSpec {
    pub center: (f64, f64),
    pub radius: f64,
    pub contrast: f64,
    pub true_region: u8,
}

impl LesionSpec {
    /// Spec with the region left to be computed by [`insert_lesion`].
    pub fn at(center: (f64, f64), radius: f64, contrast: f64) -> Self {
        Self { center, radius, contrast, true_region: 0 }
    }

    /// Raster pixels whose centers fall inside the disk.
    pub fn disk_pixels(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let (cr, cc) = self.center;
        let r2 = self.radius * self.radius;
        let mut out = Vec::new();
        for r in 0..height {
            for c in 0..width {
                let (dr, dc) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
                if dr * dr + dc * dc <= r2 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    fn fits_raster(&self, width: usize, height: usize) -> bool {
        let (cr, cc) = self.center;
        cr - self.radius >= 0.0
            && cc - self.radius >= 0.0
            && cr + self.radius <= height as f64
            && cc + self.radius <= width as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub mri: Image,
    pub pet: Image,
    pub gm_mask: Mask,
    pub atlas: Atlas,
    pub lesion: Option<LesionSpec>,
}

impl PhantomSubject {
    /// Gray-matter pixels under the lesion disk.
    pub fn lesion_pixels(&self) -> Vec<(usize, usize)> {
        match &self.lesion {
            Some(l) => l
                .disk_pixels(self.pet.width(), self.pet.height())
                .into_iter()
                .filter(|&(r, c)| self.gm_mask.get(r, c))
                .collect(),
            None => Vec::new(),
        }
    }
}

struct Geometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    thickness: f64,
}

impl Geometry {
    fn radius2(&self, x: f64, y: f64, shrink: f64) -> f64 {
        let (dx, dy) = ((x - self.cx) / (self.a - shrink), (y - self.cy) / (self.b - shrink));
        dx * dx + dy * dy
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        self.radius2(x, y, 0.0) <= 1.0
    }

    fn white(&self, x: f64, y: f64) -> bool {
        self.radius2(x, y, self.thickness) <= 1.0
    }

    /// Left/right split at the vertical midline, then four 45° wedges per side.
    fn label(&self, x: f64, y: f64) -> u8 {
        if !self.inside(x, y) {
            return 0;
        }
        let theta = (self.cy - y).atan2((x - self.cx).abs());
        let lobe = (((FRAC_PI_2 - theta) / FRAC_PI_4).floor() as i64).clamp(0, 3) as u8;
        if x < self.cx {
            1 + lobe
        } else {
            5 + lobe
        }
    }
}

/// Smooth multiplicative field `1 + amplitude·F` with `F ∈ [-1, 1]`.
fn smooth_field<R: Rng>(rng: &mut R, width: usize, height: usize, amplitude: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let kx = rng.random_range(-1.5..1.5);
            let ky = rng.random_range(-1.5..1.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            (kx, ky, phase)
        })
        .collect();
    let mut out = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let (u, v) = (c as f64 / width as f64, r as f64 / height as f64);
            let f: f64 = waves.iter().map(|(kx, ky, ph)| (2.0 * PI * (kx * u + ky * v) + ph).cos()).sum::<f64>() / 3.0;
            out.push(1.0 + amplitude * f);
        }
    }
    out
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Builds one subject as a pure function of `(seed, cfg)`.
pub fn generate_phantom(seed: u64, cfg: &PhantomConfig) -> Result<PhantomSubject> {
    let (w, h) = (cfg.width, cfg.height);
    if w < 32 || h < 32 {
        return Err(Error::InvalidArgument(format!("phantom raster {w}x{h} below 32x32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.scale();
    let geom = Geometry {
        cx: w as f64 / 2.0 + rng.random_range(-1.0..1.0) * s,
        cy: h as f64 / 2.0 + rng.random_range(-1.0..1.0) * s,
        a: 0.36 * w as f64 * rng.random_range(0.95..1.05),
        b: 0.42 * h as f64 * rng.random_range(0.95..1.05),
        thickness: cfg.thickness(),
    };
    let mri_field = smooth_field(&mut rng, w, h, cfg.field_amplitude);
    let pet_field = smooth_field(&mut rng, w, h, cfg.field_amplitude);

    let mut mri = vec![0.0; w * h];
    let mut pet = vec![0.0; w * h];
    let mut gm = vec![false; w * h];
    let mut labels = vec![0u8; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            labels[i] = geom.label(x, y);
            if labels[i] == 0 {
                continue;
            }
            let (m, p) = if geom.white(x, y) {
                (MRI_WHITE, PET_WHITE)
            } else {
                gm[i] = true;
                (MRI_GRAY, PET_GRAY)
            };
            let nm: f64 = rng.sample(StandardNormal);
            let np: f64 = rng.sample(StandardNormal);
            mri[i] = to_f32_precision((m * mri_field[i] + cfg.noise_sigma * nm).clamp(0.0, 1.0));
            pet[i] = to_f32_precision((p * pet_field[i] + cfg.noise_sigma * np).clamp(0.0, 1.0));
        }
    }
    let subject = PhantomSubject {
        id: format!("phantom-{seed:06}"),
        mri: Image::new(w, h, mri)?,
        pet: Image::new(w, h, pet)?,
        gm_mask: Mask::new(w, h, gm)?,
        atlas: Atlas::new(w, h, labels)?,
        lesion: None,
    };
    match &cfg.lesion {
        None => Ok(subject),
        Some(req) => {
            let center = match req.center {
                Some(c) => c,
                None => {
                    // separate stream so the lesion-free twin shares every other draw
                    let mut lrng = ChaCha8Rng::seed_from_u64(seed);
                    lrng.set_stream(1);
                    place_lesion(&subject, &geom, req.radius, &mut lrng)?
                }
            };
            insert_lesion(&subject, &LesionSpec::at(center, req.radius, req.contrast))
        }
    }
}

/// Outermost disk position along a random ray that keeps the disk inside the brain.
fn place_lesion<R: Rng>(subject: &PhantomSubject, geom: &Geometry, radius: f64, rng: &mut R) -> Result<(f64, f64)> {
    let phi = rng.random_range(0.0..2.0 * PI);
    let (w, h) = (subject.pet.width(), subject.pet.height());
    let mut rho = 1.0;
    while rho > 0.0 {
        let center = (geom.cy + rho * geom.b * phi.sin(), geom.cx + rho * geom.a * phi.cos());
        let spec = LesionSpec::at(center, radius, 0.5);
        if spec.fits_raster(w, h) && spec.disk_pixels(w, h).iter().all(|&(r, c)| subject.atlas.get(r, c) != 0) {
            return Ok(center);
        }
        rho -= 0.01;
    }
    Err(Error::LesionOutsideCortex(format!("no position for radius {radius}")))
}

/// Copy of `subject` with PET reduced by `(1 - contrast)` on the lesion pixels
/// (disk ∩ gray matter) and `true_region` set to their majority lobe.
pub fn insert_lesion(subject: &PhantomSubject, spec: &LesionSpec) -> Result<PhantomSubject> {
    if !(0.0..1.0).contains(&spec.contrast) || spec.radius <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lesion contrast {} must lie in [0,1) and radius {} be positive",
            spec.contrast, spec.radius
        )));
    }
    let (w, h) = (subject.pet.width(), subject.pet.height());
    if !spec.fits_raster(w, h) {
        return Err(Error::LesionOutsideCortex("disk leaves the raster".into()));
    }
    let disk = spec.disk_pixels(w, h);
    if disk.iter().any(|&(r, c)| subject.atlas.get(r, c) == 0) {
        return Err(Error::LesionOutsideCortex("disk overlaps background".into()));
    }
    let pixels: Vec<(usize, usize)> = disk.into_iter().filter(|&(r, c)| subject.gm_mask.get(r, c)).collect();
    let region = subject
        .atlas
        .majority_label(pixels.iter().copied())
        .ok_or_else(|| Error::LesionOutsideCortex("disk contains no gray matter".into()))?;
    let mut out = subject.clone();
    for &(r, c) in &pixels {
        let v = out.pet.get(r, c) * (1.0 - spec.contrast);
        out.pet.set(r, c, to_f32_precision(v));
    }
    out.lesion = Some(LesionSpec { true_region: region, ..spec.clone() });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_subjects() {
        let cfg = PhantomConfig::default().with_lesion(8.0, 0.3);
        assert_eq!(generate_phantom(7, &cfg).unwrap(), generate_phantom(7, &cfg).unwrap());
        assert_ne!(generate_phantom(7, &cfg).unwrap().pet, generate_phantom(8, &cfg).unwrap().pet);
    }

    #[test]
    fn atlas_partitions_the_brain() {
        let s = generate_phantom(3, &PhantomConfig::default()).unwrap();
        let brain = s.atlas.labels().iter().filter(|&&l| l != 0).count();
        let per_label: usize = (1..=8).map(|l| s.atlas.labels().iter().filter(|&&x| x == l).count()).sum();
        assert_eq!(per_label, brain);
        for l in 1..=8u8 {
            assert!(s.atlas.labels().contains(&l), "label {l} missing");
        }
        // background is exactly zero in both modalities
        for (i, &l) in s.atlas.labels().iter().enumerate() {
            if l == 0 {
                assert_eq!(s.mri.data()[i], 0.0);
                assert_eq!(s.pet.data()[i], 0.0);
            }
        }
        assert!(s.gm_mask.is_subset_of(&s.atlas.foreground()));
        assert!(s.mri.is_unit_range() && s.pet.is_unit_range());
    }

    #[test]
    fn tissue_intensities_near_nominal() {
        let s = generate_phantom(11, &PhantomConfig::default()).unwrap();
        let mean_over = |img: &Image, gray: bool| {
            let v: Vec<f64> = (0..img.len())
                .filter(|&i| s.atlas.labels()[i] != 0 && s.gm_mask.data()[i] == gray)
                .map(|i| img.data()[i])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean_over(&s.mri, true) - MRI_GRAY).abs() < 0.06);
        assert!((mean_over(&s.mri, false) - MRI_WHITE).abs() < 0.08);
        assert!((mean_over(&s.pet, true) - PET_GRAY).abs() < 0.09);
        assert!((mean_over(&s.pet, false) - PET_WHITE).abs() < 0.05);
    }

    #[test]
    fn lesion_scales_pet_against_twin() {
        let healthy = generate_phantom(21, &PhantomConfig::default()).unwrap();
        let sick = generate_phantom(21, &PhantomConfig::default().with_lesion(8.0, 0.3)).unwrap();
        assert_eq!(healthy.mri, sick.mri);
        let px = sick.lesion_pixels();
        assert!(!px.is_empty());
        let mean = |img: &Image| px.iter().map(|&(r, c)| img.get(r, c)).sum::<f64>() / px.len() as f64;
        assert!((mean(&sick.pet) - 0.7 * mean(&healthy.pet)).abs() < 0.03);
        let lesion: std::collections::HashSet<_> = px.iter().copied().collect();
        for r in 0..64 {
            for c in 0..64 {
                if !lesion.contains(&(r, c)) {
                    assert_eq!(sick.pet.get(r, c), healthy.pet.get(r, c));
                }
            }
        }
    }

    #[test]
    fn lesion_pixels_inside_gray_matter_and_large_enough() {
        for seed in 0..60 {
            let s = generate_phantom(seed, &PhantomConfig::default().with_lesion(8.0, 0.3)).unwrap();
            let px = s.lesion_pixels();
            assert!(px.iter().all(|&(r, c)| s.gm_mask.get(r, c)));
            // must clear the area-scaled cluster threshold of 94 with margin
            assert!(px.len() >= 110, "seed {seed}: only {} lesion pixels", px.len());
            let lesion = s.lesion.as_ref().unwrap();
            assert_eq!(Some(lesion.true_region), s.atlas.majority_label(px));
        }
    }

    #[test]
    fn zero_contrast_leaves_pet_unchanged() {
        let s = generate_phantom(5, &PhantomConfig::default()).unwrap();
        let center =
            generate_phantom(5, &PhantomConfig::default().with_lesion(8.0, 0.3)).unwrap().lesion.unwrap().center;
        let out = insert_lesion(&s, &LesionSpec::at(center, 8.0, 0.0)).unwrap();
        assert_eq!(out.pet, s.pet);
        assert_eq!(out.mri, s.mri);
    }

    #[test]
    fn disk_over_background_rejected() {
        let s = generate_phantom(5, &PhantomConfig::default()).unwrap();
        let err = insert_lesion(&s, &LesionSpec::at((4.0, 4.0), 3.0, 0.3)).unwrap_err();
        assert!(matches!(err, Error::LesionOutsideCortex(_)));
    }

    fn synthetic_subject(labels: Vec<u8>, w: usize, h: usize) -> PhantomSubject {
        PhantomSubject {
            id: "syn".into(),
            mri: Image::filled(w, h, 0.5),
            pet: Image::filled(w, h, 0.8),
            gm_mask: Mask::new(w, h, vec![true; w * h]).unwrap(),
            atlas: Atlas::new(w, h, labels).unwrap(),
            lesion: None,
        }
    }

    #[test]
    fn true_region_is_disk_majority() {
        let (w, h) = (20, 20);
        let inside = synthetic_subject(vec![3; w * h], w, h);
        let out = insert_lesion(&inside, &LesionSpec::at((10.0, 10.0), 4.0, 0.3)).unwrap();
        assert_eq!(out.lesion.unwrap().true_region, 3);

        // 60% of the disk pixels carry label 2, the rest (and everything else) label 3
        let spec = LesionSpec::at((10.0, 10.0), 4.0, 0.3);
        let disk = spec.disk_pixels(w, h);
        let n2 = disk.len() * 6 / 10;
        let mut labels = vec![3u8; w * h];
        for &(r, c) in &disk[..n2] {
            labels[r * w + c] = 2;
        }
        let straddle = synthetic_subject(labels, w, h);
        let out = insert_lesion(&straddle, &spec).unwrap();
        assert_eq!(out.lesion.unwrap().true_region, 2);
    }

    #[test]
    fn small_raster_rejected() {
        assert!(generate_phantom(0, &PhantomConfig::square(16)).is_err());
    }
}
