//! Probability map to binary label map: Otsu thresholding followed by
//! removal of small connected components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMap, ProbMap};

/// Component size cutoff at the reference patch area.
pub const REFERENCE_MIN_SIZE: usize = 30;
/// Patch area at which [`REFERENCE_MIN_SIZE`] applies (256 × 256).
pub const REFERENCE_AREA: usize = 256 * 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    /// Fixed component cutoff; `None` scales [`REFERENCE_MIN_SIZE`] by patch area.
    pub min_size: Option<usize>,
    pub connectivity: Connectivity,
    pub otsu_bins: usize,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            min_size: None,
            connectivity: Connectivity::Eight,
            otsu_bins: 256,
        }
    }
}

impl PostprocConfig {
    pub fn min_size_for(&self, width: usize, height: usize) -> usize {
        self.min_size.unwrap_or_else(|| scaled_min_size(width, height))
    }
}

/// `REFERENCE_MIN_SIZE` scaled to a `width × height` raster, at least 1.
pub fn scaled_min_size(width: usize, height: usize) -> usize {
    let scaled = REFERENCE_MIN_SIZE as f64 * (width * height) as f64 / REFERENCE_AREA as f64;
    (scaled.round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtsuResult {
    /// Pixels strictly above this value are foreground.
    pub threshold: f32,
    pub binary: LabelMap,
    /// Last histogram bin of the background class; `None` for a degenerate
    /// (single-bin) histogram.
    pub split_bin: Option<usize>,
    pub between_variance: f64,
}

pub fn histogram_bin(p: f32, bins: usize) -> usize {
    ((p as f64 * bins as f64).floor() as usize).min(bins - 1)
}

/// Otsu's method on an equal-width histogram over `[0, 1]`.
///
/// Class statistics use the exact pixel values accumulated per bin. Ties
/// resolve to the lowest split. The returned threshold is the largest
/// background value, so `p > threshold` reproduces the chosen split. When
/// every pixel lands in one bin the threshold is the map's maximum and the
/// binary map is empty.
pub fn otsu_threshold(p: &ProbMap, bins: usize) -> Result<OtsuResult> {
    if bins < 2 {
        return Err(Error::InvalidConfig("otsu needs at least 2 bins".into()));
    }
    let mut counts = vec![0usize; bins];
    let mut sums = vec![0f64; bins];
    let mut maxes = vec![f32::NEG_INFINITY; bins];
    for &v in p.data() {
        let b = histogram_bin(v, bins);
        counts[b] += 1;
        sums[b] += v as f64;
        maxes[b] = maxes[b].max(v);
    }
    let n = p.data().len() as f64;
    let total: f64 = sums.iter().sum();
    let (mut w0, mut s0) = (0usize, 0f64);
    let mut best: Option<(usize, f64)> = None;
    for k in 0..bins - 1 {
        w0 += counts[k];
        s0 += sums[k];
        let w1 = p.data().len() - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = s0 / w0 as f64;
        let mu1 = (total - s0) / w1 as f64;
        let var = (w0 as f64 / n) * (w1 as f64 / n) * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    let (threshold, split_bin, between_variance) = match best {
        Some((k, var)) => {
            let t = maxes[..=k].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (t, Some(k), var)
        }
        None => (p.data().iter().copied().fold(f32::NEG_INFINITY, f32::max), None, 0.0),
    };
    let binary = LabelMap::new(
        p.width(),
        p.height(),
        p.data().iter().map(|&v| (v > threshold) as u8).collect(),
    )?;
    Ok(OtsuResult {
        threshold,
        binary,
        split_bin,
        between_variance,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub width: usize,
    pub height: usize,
    /// Per-pixel component id, 0 for background, ids `1..=count`.
    pub labels: Vec<u32>,
    pub count: usize,
    /// Pixel count of component `i + 1` at index `i`.
    pub sizes: Vec<usize>,
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling. Ids are assigned in raster order of each
/// component's first pixel.
pub fn connected_components(v: &LabelMap, connectivity: Connectivity) -> ComponentLabeling {
    let (w, h) = (v.width(), v.height());
    let mut provisional = vec![0u32; w * h];
    let mut ds = DisjointSet { parent: vec![0] };
    // Only neighbours already visited in raster order.
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0)],
    };
    for y in 0..h {
        for x in 0..w {
            if !v.get(x, y) {
                continue;
            }
            let mut assigned = 0u32;
            for &(dx, dy) in back {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize {
                    continue;
                }
                let nl = provisional[ny as usize * w + nx as usize];
                if nl == 0 {
                    continue;
                }
                if assigned == 0 {
                    assigned = nl;
                } else {
                    ds.union(assigned, nl);
                }
            }
            if assigned == 0 {
                assigned = ds.parent.len() as u32;
                ds.parent.push(assigned);
            }
            provisional[y * w + x] = assigned;
        }
    }
    let mut remap = vec![0u32; ds.parent.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; w * h];
    for (i, &l) in provisional.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let root = ds.find(l) as usize;
        if remap[root] == 0 {
            sizes.push(0);
            remap[root] = sizes.len() as u32;
        }
        let id = remap[root];
        sizes[id as usize - 1] += 1;
        labels[i] = id;
    }
    ComponentLabeling {
        width: w,
        height: h,
        labels,
        count: sizes.len(),
        sizes,
    }
}

/// Clears every foreground component with fewer than `min_size` pixels.
pub fn remove_small(v: &LabelMap, min_size: usize, connectivity: Connectivity) -> LabelMap {
    if min_size == 0 {
        return v.clone();
    }
    let cc = connected_components(v, connectivity);
    let data = cc
        .labels
        .iter()
        .map(|&id| (id != 0 && cc.sizes[id as usize - 1] >= min_size) as u8)
        .collect();
    LabelMap::new(v.width(), v.height(), data).expect("same shape")
}

/// Otsu binarization followed by small-component removal.
pub fn postprocess(p: &ProbMap, cfg: &PostprocConfig) -> Result<(OtsuResult, LabelMap)> {
    let otsu = otsu_threshold(p, cfg.otsu_bins)?;
    let cleaned = remove_small(&otsu.binary, cfg.min_size_for(p.width(), p.height()), cfg.connectivity);
    Ok((otsu, cleaned))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob(w: usize, h: usize, data: Vec<f32>) -> ProbMap {
        ProbMap::new(w, h, data).unwrap()
    }

    #[test]
    fn bimodal_map_splits_cleanly() {
        let data: Vec<f32> = (0..100).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let r = otsu_threshold(&prob(10, 10, data.clone()), 256).unwrap();
        assert!((0.1..0.9).contains(&r.threshold));
        for (i, &v) in data.iter().enumerate() {
            assert_eq!(r.binary.data()[i] == 1, v == 0.9);
        }
    }

    #[test]
    fn constant_map_is_all_background() {
        let r = otsu_threshold(&ProbMap::filled(7, 3, 0.7), 256).unwrap();
        assert_eq!(r.threshold, 0.7);
        assert_eq!(r.binary, LabelMap::zeros(7, 3));
        assert_eq!(r.split_bin, None);
        assert!(otsu_threshold(&ProbMap::filled(2, 2, 0.1), 1).is_err());
    }

    #[test]
    fn diagonal_pair_depends_on_connectivity() {
        let v = LabelMap::from_fn(2, 2, |x, y| x == y);
        assert_eq!(connected_components(&v, Connectivity::Four).count, 2);
        assert_eq!(connected_components(&v, Connectivity::Eight).count, 1);
        let single = LabelMap::from_fn(3, 3, |x, y| x == 1 && y == 1);
        let cc = connected_components(&single, Connectivity::Eight);
        assert_eq!((cc.count, cc.sizes.clone()), (1, vec![1]));
    }

    #[test]
    fn u_shape_merges_across_passes() {
        // Two arms joined only at the bottom row.
        let v = LabelMap::from_fn(5, 4, |x, y| x == 0 || x == 4 || y == 3);
        let cc = connected_components(&v, Connectivity::Four);
        assert_eq!(cc.count, 1);
        assert_eq!(cc.sizes, vec![v.count_foreground()]);
    }

    #[test]
    fn remove_small_cases() {
        let v = LabelMap::from_fn(10, 10, |x, y| x < 5 && y == 0);
        assert_eq!(remove_small(&v, 0, Connectivity::Eight), v);
        assert_eq!(remove_small(&v, 6, Connectivity::Eight), LabelMap::zeros(10, 10));

        // components of 3, 30 and 300 pixels
        let mixed = LabelMap::from_fn(40, 40, |x, y| {
            (y == 0 && x < 3) || (y == 2 && x < 30) || ((5..15).contains(&y) && x < 30)
        });
        let before = connected_components(&mixed, Connectivity::Eight);
        let mut sizes = before.sizes.clone();
        sizes.sort();
        assert_eq!(sizes, vec![3, 30, 300]);
        let after = remove_small(&mixed, 30, Connectivity::Eight);
        let mut kept = connected_components(&after, Connectivity::Eight).sizes;
        kept.sort();
        assert_eq!(kept, vec![30, 300]);
    }

    #[test]
    fn scaled_cutoff() {
        assert_eq!(scaled_min_size(256, 256), 30);
        assert_eq!(scaled_min_size(64, 64), 2);
        assert_eq!(scaled_min_size(8, 8), 1);
        let cfg = PostprocConfig { min_size: Some(7), ..PostprocConfig::default() };
        assert_eq!(cfg.min_size_for(64, 64), 7);
    }

    #[test]
    fn connectivity_serde() {
        assert_eq!(Connectivity::try_from(4).unwrap(), Connectivity::Four);
        assert!(Connectivity::try_from(6).is_err());
    }
}
