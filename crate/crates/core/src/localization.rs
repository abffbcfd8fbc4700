//! Lesion localization from a real/pseudo-normal PET pair: difference map,
//! Z-scores, one-sided threshold, connected clusters, size filter and lobe
//! assignment.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::{Atlas, Image, Mask};

pub const DEFAULT_Z_THRESH: f64 = -1.65;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;

/// Pixel set over which μ and σ are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StatsDomain {
    #[default]
    Gm,
    Whole,
}

impl StatsDomain {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gm" => Ok(Self::Gm),
            "whole" => Ok(Self::Whole),
            other => Err(Error::Config(format!("stats_domain must be gm or whole, got {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gm => "gm",
            Self::Whole => "whole",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "4" => Ok(Self::Four),
            "8" => Ok(Self::Eight),
            other => Err(Error::Config(format!("connectivity must be 4 or 8, got {other:?}"))),
        }
    }

    pub fn neighbours(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        match self {
            Self::Four => &FOUR,
            Self::Eight => &EIGHT,
        }
    }

    pub fn code(self) -> usize {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizeParams {
    pub z_thresh: f64,
    /// `None` scales the cluster threshold with the raster area.
    pub k_thresh: Option<usize>,
    pub connectivity: Connectivity,
    pub stats_domain: StatsDomain,
}

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            z_thresh: DEFAULT_Z_THRESH,
            k_thresh: None,
            connectivity: Connectivity::Eight,
            stats_domain: StatsDomain::Gm,
        }
    }
}

impl LocalizeParams {
    pub fn k_for(&self, width: usize, height: usize) -> usize {
        self.k_thresh.unwrap_or_else(|| default_k_thresh(width, height))
    }
}

/// Z-scores on gray matter. `z` is 0 outside `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZScoreMap {
    pub z: Image,
    pub valid: Mask,
    pub mu: f64,
    pub sigma: f64,
}

impl ZScoreMap {
    pub fn width(&self) -> usize {
        self.z.width()
    }

    pub fn height(&self) -> usize {
        self.z.height()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub id: usize,
    /// `(row, col)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub size: usize,
    /// Most negative Z inside the cluster; NaN until annotated.
    pub peak_z: f64,
    pub centroid: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionReport {
    pub subject_id: String,
    /// Surviving clusters, largest first.
    pub clusters: Vec<Cluster>,
    /// Lobe label of each surviving cluster, aligned with `clusters`.
    pub cluster_regions: Vec<u8>,
    pub predicted_region: Option<u8>,
    pub detected: bool,
}

pub fn difference_map(real_pet: &Image, pseudo_pet: &Image) -> Result<Image> {
    real_pet.ensure_same_shape(pseudo_pet, "difference_map")?;
    let data = real_pet.data().iter().zip(pseudo_pet.data()).map(|(r, p)| r - p).collect();
    Image::new(real_pet.width(), real_pet.height(), data)
}

/// Standardizes `diff` with μ and population σ taken over `domain`.
pub fn zscore_map(diff: &Image, gm: &Mask, domain: StatsDomain) -> Result<ZScoreMap> {
    if !gm.matches(diff) {
        return Err(Error::ShapeMismatch(format!(
            "zscore_map: mask {}x{} vs map {}x{}",
            gm.width(),
            gm.height(),
            diff.width(),
            diff.height()
        )));
    }
    let values: Vec<f64> = match domain {
        StatsDomain::Gm => diff.data().iter().zip(gm.data()).filter(|(_, &m)| m).map(|(&v, _)| v).collect(),
        StatsDomain::Whole => diff.data().to_vec(),
    };
    if values.len() < 2 {
        return Err(Error::InvalidArgument("statistics domain needs at least 2 pixels".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::ConstantDifferenceMap);
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sigma = (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    if !sigma.is_finite() {
        return Err(Error::NonFinite("difference map".into()));
    }
    let data = diff.data().iter().zip(gm.data()).map(|(&v, &m)| if m { (v - mu) / sigma } else { 0.0 }).collect();
    Ok(ZScoreMap { z: Image::new(diff.width(), diff.height(), data)?, valid: gm.clone(), mu, sigma })
}

/// Valid pixels with `z < z_thresh` (strict).
pub fn threshold_map(zmap: &ZScoreMap, z_thresh: f64) -> Mask {
    let data = zmap.z.data().iter().zip(zmap.valid.data()).map(|(&z, &v)| v && z < z_thresh).collect();
    Mask::new(zmap.width(), zmap.height(), data).unwrap()
}

/// Connected components ordered by size descending, then by first pixel in raster order.
pub fn connected_components(m: &Mask, connectivity: Connectivity) -> Vec<Cluster> {
    let (w, h) = (m.width(), m.height());
    let mut seen = vec![false; w * h];
    let mut clusters = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !m.data()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for &(dr, dc) in connectivity.neighbours() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if m.data()[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let centroid =
            (pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n, pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n);
        clusters.push(Cluster { id: 0, size: pixels.len(), pixels, peak_z: f64::NAN, centroid });
    }
    // discovery is already in raster order of first pixel; a stable sort keeps it for ties
    clusters.sort_by_key(|c| std::cmp::Reverse(c.size));
    for (i, c) in clusters.iter_mut().enumerate() {
        c.id = i + 1;
    }
    clusters
}

pub fn annotate_peaks(clusters: &mut [Cluster], zmap: &ZScoreMap) {
    for c in clusters {
        c.peak_z = c.pixels.iter().map(|&(r, col)| zmap.z.get(r, col)).fold(f64::INFINITY, f64::min);
    }
}

/// Keeps clusters with `size > k_thresh` (strict).
pub fn filter_clusters(clusters: Vec<Cluster>, k_thresh: usize) -> Vec<Cluster> {
    clusters.into_iter().filter(|c| c.size > k_thresh).collect()
}

/// `round(1500 · W · H / 65536)`: the 256×256 threshold scaled by area.
pub fn default_k_thresh(width: usize, height: usize) -> usize {
    (1500.0 * (width * height) as f64 / 65536.0).round() as usize
}

/// Lobe with the largest overlap; ties go to the smaller label.
pub fn assign_region(cluster: &Cluster, atlas: &Atlas) -> Result<u8> {
    if cluster.pixels.iter().any(|&(r, c)| r >= atlas.height() || c >= atlas.width()) {
        return Err(Error::ShapeMismatch("cluster pixel outside atlas".into()));
    }
    atlas.majority_label(cluster.pixels.iter().copied()).ok_or(Error::Unassignable)
}

pub fn localize(
    subject_id: &str,
    real_pet: &Image,
    pseudo_pet: &Image,
    gm: &Mask,
    atlas: &Atlas,
    params: &LocalizeParams,
) -> Result<LesionReport> {
    if atlas.width() != real_pet.width() || atlas.height() != real_pet.height() {
        return Err(Error::ShapeMismatch("localize: atlas size differs from PET".into()));
    }
    let diff = difference_map(real_pet, pseudo_pet)?;
    let zmap = match zscore_map(&diff, gm, params.stats_domain) {
        Ok(z) => z,
        // nothing deviates from a constant map, so there is nothing to detect
        Err(Error::ConstantDifferenceMap) => return Ok(LesionReport::empty(subject_id)),
        Err(e) => return Err(e),
    };
    let mut clusters = connected_components(&threshold_map(&zmap, params.z_thresh), params.connectivity);
    annotate_peaks(&mut clusters, &zmap);
    let clusters = filter_clusters(clusters, params.k_for(real_pet.width(), real_pet.height()));
    let cluster_regions = clusters.iter().map(|c| assign_region(c, atlas)).collect::<Result<Vec<_>>>()?;
    Ok(LesionReport {
        subject_id: subject_id.to_string(),
        detected: !clusters.is_empty(),
        predicted_region: cluster_regions.first().copied(),
        clusters,
        cluster_regions,
    })
}

/// Z-map of a pair for export, or `None` when the difference map is constant.
pub fn zscore_for_export(
    real_pet: &Image,
    pseudo_pet: &Image,
    gm: &Mask,
    domain: StatsDomain,
) -> Result<Option<ZScoreMap>> {
    match zscore_map(&difference_map(real_pet, pseudo_pet)?, gm, domain) {
        Ok(z) => Ok(Some(z)),
        Err(Error::ConstantDifferenceMap) => Ok(None),
        Err(e) => Err(e),
    }
}

impl LesionReport {
    pub fn empty(subject_id: &str) -> Self {
        Self {
            subject_id: subject_id.to_string(),
            clusters: Vec::new(),
            cluster_regions: Vec::new(),
            predicted_region: None,
            detected: false,
        }
    }

    /// Line-oriented record:
    ///
    /// ```text
    /// subject <id>
    /// detected <true|false>
    /// predicted_region <1-8|none>
    /// clusters <n>
    /// cluster <size> <peak_z> <centroid_row> <centroid_col> <region>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "subject {}", self.subject_id).unwrap();
        writeln!(out, "detected {}", self.detected).unwrap();
        match self.predicted_region {
            Some(r) => writeln!(out, "predicted_region {r}").unwrap(),
            None => writeln!(out, "predicted_region none").unwrap(),
        }
        writeln!(out, "clusters {}", self.clusters.len()).unwrap();
        for (c, r) in self.clusters.iter().zip(&self.cluster_regions) {
            writeln!(out, "cluster {} {:.6} {:.3} {:.3} {}", c.size, c.peak_z, c.centroid.0, c.centroid.1, r).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, bits: &[u8]) -> Mask {
        Mask::new(w, h, bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn difference_map_cases() {
        let a = Image::filled(4, 4, 0.7);
        let b = Image::filled(4, 4, 0.9);
        assert!(difference_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(difference_map(&a, &b).unwrap().data().iter().all(|&v| (v + 0.2).abs() < 1e-15));
        let ab = difference_map(&a, &b).unwrap();
        let ba = difference_map(&b, &a).unwrap();
        assert!(ab.data().iter().zip(ba.data()).all(|(x, y)| *x == -*y));
        assert!(difference_map(&a, &Image::filled(4, 3, 0.0)).is_err());
    }

    #[test]
    fn zscore_hand_example() {
        let diff = Image::new(2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let z = zscore_map(&diff, &mask_from(2, 2, &[1, 1, 1, 1]), StatsDomain::Gm).unwrap();
        assert_eq!((z.mu, z.sigma), (0.0, 1.0));
        assert_eq!(z.z.data(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn constant_map_is_an_error() {
        let e = zscore_map(&Image::filled(3, 3, 0.2), &mask_from(3, 3, &[1; 9]), StatsDomain::Gm);
        assert!(matches!(e, Err(Error::ConstantDifferenceMap)));
    }

    #[test]
    fn whole_domain_uses_every_pixel() {
        let diff = Image::new(2, 2, vec![1.0, -1.0, 5.0, 5.0]).unwrap();
        let gm = mask_from(2, 2, &[1, 1, 0, 0]);
        assert_eq!(zscore_map(&diff, &gm, StatsDomain::Gm).unwrap().mu, 0.0);
        let whole = zscore_map(&diff, &gm, StatsDomain::Whole).unwrap();
        assert_eq!(whole.mu, 2.5);
        assert_eq!(whole.z.get(1, 0), 0.0);
    }

    fn zmap(vals: &[f64]) -> ZScoreMap {
        ZScoreMap {
            z: Image::new(vals.len(), 1, vals.to_vec()).unwrap(),
            valid: Mask::new(vals.len(), 1, vec![true; vals.len()]).unwrap(),
            mu: 0.0,
            sigma: 1.0,
        }
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(threshold_map(&zmap(&[-1.65, 0.0, 3.0]), -1.65).count(), 0);
        assert_eq!(threshold_map(&zmap(&[-2.0, -1.0, -3.0]), -1.65).data(), &[true, false, true]);
    }

    #[test]
    fn component_examples() {
        assert!(connected_components(&Mask::empty(4, 4), Connectivity::Eight).is_empty());
        let diag = mask_from(2, 2, &[1, 0, 0, 1]);
        let c = connected_components(&diag, Connectivity::Eight);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].size, 2);
        assert_eq!(connected_components(&diag, Connectivity::Four).len(), 2);
        let corners = mask_from(3, 3, &[1, 0, 1, 0, 0, 0, 1, 0, 1]);
        let c = connected_components(&corners, Connectivity::Eight);
        assert_eq!(c.iter().map(|c| c.size).collect::<Vec<_>>(), vec![1, 1, 1, 1]);
        assert_eq!(c[0].pixels, vec![(0, 0)]);
        assert_eq!(c[3].pixels, vec![(2, 2)]);
    }

    #[test]
    fn ordering_by_size_then_position() {
        let m = mask_from(5, 1, &[1, 0, 1, 1, 0]);
        let c = connected_components(&m, Connectivity::Eight);
        assert_eq!(c[0].pixels, vec![(0, 2), (0, 3)]);
        assert_eq!(c[0].centroid, (0.0, 2.5));
        assert_eq!((c[0].id, c[1].id), (1, 2));
    }

    fn sized(size: usize) -> Cluster {
        Cluster { id: 0, pixels: vec![(0, 0); size], size, peak_z: -2.0, centroid: (0.0, 0.0) }
    }

    #[test]
    fn filter_is_strict() {
        assert!(filter_clusters(vec![sized(1500)], 1500).is_empty());
        let kept = filter_clusters(vec![sized(2000), sized(100)], 1500);
        assert_eq!(kept.iter().map(|c| c.size).collect::<Vec<_>>(), vec![2000]);
        assert_eq!(default_k_thresh(64, 64), 94);
        assert_eq!(default_k_thresh(256, 256), 1500);
    }

    #[test]
    fn region_assignment() {
        let atlas = Atlas::new(10, 1, vec![2, 2, 2, 2, 2, 2, 7, 7, 7, 7]).unwrap();
        let c =
            Cluster { id: 1, pixels: (0..10).map(|i| (0, i)).collect(), size: 10, peak_z: -2.0, centroid: (0.0, 4.5) };
        assert_eq!(assign_region(&c, &atlas).unwrap(), 2);
        let tie = Atlas::new(4, 1, vec![4, 4, 3, 3]).unwrap();
        let c =
            Cluster { id: 1, pixels: (0..4).map(|i| (0, i)).collect(), size: 4, peak_z: -2.0, centroid: (0.0, 1.5) };
        assert_eq!(assign_region(&c, &tie).unwrap(), 3);
        let bg = Atlas::new(4, 1, vec![0; 4]).unwrap();
        assert!(matches!(assign_region(&c, &bg), Err(Error::Unassignable)));
        let five = Atlas::new(4, 1, vec![5; 4]).unwrap();
        assert_eq!(assign_region(&c, &five).unwrap(), 5);
    }

    #[test]
    fn identical_pair_not_detected() {
        let img = Image::from_fn(8, 8, |r, c| (r * 8 + c) as f64 / 64.0);
        let gm = Mask::new(8, 8, vec![true; 64]).unwrap();
        let atlas = Atlas::new(8, 8, vec![1; 64]).unwrap();
        let r = localize("s", &img, &img, &gm, &atlas, &LocalizeParams::default()).unwrap();
        assert!(!r.detected && r.predicted_region.is_none());
    }

    #[test]
    fn report_text_layout() {
        let mut r = LesionReport::empty("p001");
        assert_eq!(r.to_text(), "subject p001\ndetected false\npredicted_region none\nclusters 0\n");
        r.clusters.push(Cluster { id: 1, pixels: vec![(1, 2)], size: 1, peak_z: -2.5, centroid: (1.0, 2.0) });
        r.cluster_regions.push(6);
        r.predicted_region = Some(6);
        r.detected = true;
        assert!(r.to_text().ends_with("clusters 1\ncluster 1 -2.500000 1.000 2.000 6\n"));
    }
}
