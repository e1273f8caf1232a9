//! Detection and localization metrics.
//!
//! All curves are exact: every distinct score value is a threshold.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Vec3;
use crate::dataset::{io_err, DataError, ViewSet};

pub const DEFAULT_LIMITS: [f64; 2] = [0.3, 0.01];
pub const DEFAULT_VOXEL_SIZE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need both positive and negative labels (got {positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("no anomalous region in the ground truth")]
    NoRegions,
    #[error("integration limit must lie in (0, 1], got {0}")]
    Limit(f64),
    #[error("{0} scores but {1} labels")]
    Length(usize, usize),
    #[error("map {index} is {map:?} but its mask is {mask:?}")]
    Shape {
        index: usize,
        map: (usize, usize),
        mask: (usize, usize),
    },
    #[error("view {0} has no ground-truth mask")]
    MissingMask(usize),
    #[error("voxel size must be positive, got {0}")]
    VoxelSize(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass {
            positives,
            total: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One point of a per-region-overlap curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub pro: f64,
}

/// Labelled evaluation units: each unit has a score and belongs either to
/// the background (`None`) or to one anomalous region.
pub struct RegionUnits<'a> {
    pub scores: &'a [f64],
    pub regions: &'a [Option<usize>],
    pub n_regions: usize,
}

/// PRO against FPR for every distinct threshold, in decreasing threshold order.
pub fn pro_curve(units: &RegionUnits<'_>) -> Result<Vec<ProPoint>, MetricError> {
    let RegionUnits {
        scores,
        regions,
        n_regions,
    } = *units;
    if scores.len() != regions.len() {
        return Err(MetricError::Length(scores.len(), regions.len()));
    }
    if n_regions == 0 {
        return Err(MetricError::NoRegions);
    }
    let mut sizes = vec![0usize; n_regions];
    for r in regions.iter().flatten() {
        sizes[*r] += 1;
    }
    let negatives = regions.iter().filter(|r| r.is_none()).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = Vec::new();
    let mut false_pos = 0usize;
    let mut overlap_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            match regions[order[i]] {
                Some(r) => overlap_sum += 1.0 / sizes[r] as f64,
                None => false_pos += 1,
            }
            i += 1;
        }
        curve.push(ProPoint {
            threshold: t,
            fpr: if negatives == 0 { 0.0 } else { false_pos as f64 / negatives as f64 },
            pro: overlap_sum / n_regions as f64,
        });
    }
    Ok(curve)
}

/// Trapezoidal area under PRO(FPR) on `[0, limit]`, divided by `limit`.
/// The curve starts at the origin (threshold above every score).
pub fn area_to_limit(curve: &[ProPoint], limit: f64) -> Result<f64, MetricError> {
    if !(limit > 0.0 && limit <= 1.0) {
        return Err(MetricError::Limit(limit));
    }
    let mut area = 0.0;
    let (mut x0, mut y0) = (0.0, 0.0);
    for p in curve {
        let (x1, y1) = (p.fpr, p.pro);
        if x1 >= limit {
            if x1 > x0 {
                let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
                area += (limit - x0) * (y0 + y_at) / 2.0;
            }
            return Ok((area / limit).clamp(0.0, 1.0));
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
        (x0, y0) = (x1, y1);
    }
    // Curve ended before the limit: PRO stays at its last value.
    area += (limit - x0) * y0;
    Ok((area / limit).clamp(0.0, 1.0))
}

/// 4-connected components of the nonzero pixels, numbered in scan order.
pub fn label_regions(mask: ArrayView2<'_, f32>) -> (Array2<Option<usize>>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::from_elem((h, w), None);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0.0 || labels[[y, x]].is_some() {
                continue;
            }
            labels[[y, x]] = Some(next);
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && mask[[ny, nx]] != 0.0 && labels[[ny, nx]].is_none() {
                        labels[[ny, nx]] = Some(next);
                        queue.push_back((ny, nx));
                    }
                }
            }
            next += 1;
        }
    }
    (labels, next)
}

/// Flattens maps and masks into region-labelled units. Region ids are
/// offset so components of different maps stay distinct.
fn pixel_units(maps: &[ArrayView2<'_, f64>], masks: &[ArrayView2<'_, f32>]) -> Result<(Vec<f64>, Vec<Option<usize>>, usize), MetricError> {
    if maps.len() != masks.len() {
        return Err(MetricError::Length(maps.len(), masks.len()));
    }
    let mut scores = Vec::new();
    let mut regions = Vec::new();
    let mut offset = 0;
    for (index, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.dim() != mask.dim() {
            return Err(MetricError::Shape {
                index,
                map: map.dim(),
                mask: mask.dim(),
            });
        }
        let (labels, n) = label_regions(*mask);
        scores.extend(map.iter().copied());
        regions.extend(labels.iter().map(|l| l.map(|r| r + offset)));
        offset += n;
    }
    Ok((scores, regions, offset))
}

pub fn pixel_pro_curve(maps: &[ArrayView2<'_, f64>], masks: &[ArrayView2<'_, f32>]) -> Result<Vec<ProPoint>, MetricError> {
    let (scores, regions, n_regions) = pixel_units(maps, masks)?;
    pro_curve(&RegionUnits {
        scores: &scores,
        regions: &regions,
        n_regions,
    })
}

pub fn aupro(maps: &[ArrayView2<'_, f64>], masks: &[ArrayView2<'_, f32>], limit: f64) -> Result<f64, MetricError> {
    area_to_limit(&pixel_pro_curve(maps, masks)?, limit)
}

/// Pixel-level AUROC over all pixels of all maps.
pub fn pixel_auroc(maps: &[ArrayView2<'_, f64>], masks: &[ArrayView2<'_, f32>]) -> Result<f64, MetricError> {
    if maps.len() != masks.len() {
        return Err(MetricError::Length(maps.len(), masks.len()));
    }
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().map(|&v| v != 0.0)).collect();
    auroc(&scores, &labels)
}

pub type VoxelKey = [i64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub voxel: VoxelKey,
    /// Mean of the contributing world points.
    pub position: Vec3,
    /// Mean of the contributing pixel scores.
    pub score: f64,
    /// True when any contributing pixel is marked anomalous.
    pub anomalous: bool,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub voxel_size: f64,
    /// Sorted by voxel key.
    pub points: Vec<ScoredPoint>,
}

/// Unprojects every valid-depth pixel of every view with its map score and
/// mask bit, then fuses points falling into the same voxel.
pub fn project_scores_to_points(
    viewset: &ViewSet,
    maps: &[ArrayView2<'_, f64>],
    voxel_size: f64,
) -> Result<PointCloud, MetricError> {
    if !(voxel_size > 0.0) {
        return Err(MetricError::VoxelSize(voxel_size));
    }
    if maps.len() != viewset.len() {
        return Err(MetricError::Length(maps.len(), viewset.len()));
    }
    struct Acc {
        pos: Vec3,
        score: f64,
        anomalous: bool,
        count: usize,
    }
    let mut voxels: BTreeMap<VoxelKey, Acc> = BTreeMap::new();
    for (index, (obs, map)) in viewset.views.iter().zip(maps).enumerate() {
        if map.dim() != obs.depth.dim() {
            return Err(MetricError::Shape {
                index,
                map: map.dim(),
                mask: obs.depth.dim(),
            });
        }
        let mask = obs.gt_mask.as_ref().ok_or(MetricError::MissingMask(obs.view_index))?;
        for ((y, x), &z) in obs.depth.indexed_iter() {
            if z <= 0.0 {
                continue;
            }
            let p = obs.camera.unproject(x as f64 + 0.5, y as f64 + 0.5, z as f64);
            let key = p.map(|c| (c / voxel_size).floor() as i64);
            let acc = voxels.entry(key).or_insert(Acc {
                pos: [0.0; 3],
                score: 0.0,
                anomalous: false,
                count: 0,
            });
            for k in 0..3 {
                acc.pos[k] += p[k];
            }
            acc.score += map[[y, x]];
            acc.anomalous |= mask[[y, x]] != 0.0;
            acc.count += 1;
        }
    }
    let points = voxels
        .into_iter()
        .map(|(voxel, a)| {
            let n = a.count as f64;
            ScoredPoint {
                voxel,
                position: a.pos.map(|c| c / n),
                score: a.score / n,
                anomalous: a.anomalous,
                count: a.count,
            }
        })
        .collect();
    Ok(PointCloud { voxel_size, points })
}

impl PointCloud {
    /// 6-connected components of the anomalous voxels, in key order.
    pub fn label_regions(&self) -> (Vec<Option<usize>>, usize) {
        let index: HashMap<VoxelKey, usize> = self
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.anomalous)
            .map(|(i, p)| (p.voxel, i))
            .collect();
        let mut labels = vec![None; self.points.len()];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for (i, p) in self.points.iter().enumerate() {
            if !p.anomalous || labels[i].is_some() {
                continue;
            }
            labels[i] = Some(next);
            queue.push_back(i);
            while let Some(c) = queue.pop_front() {
                let v = self.points[c].voxel;
                for axis in 0..3 {
                    for step in [-1, 1] {
                        let mut n = v;
                        n[axis] += step;
                        if let Some(&j) = index.get(&n) {
                            if labels[j].is_none() {
                                labels[j] = Some(next);
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
            next += 1;
        }
        (labels, next)
    }
}

/// Point-level curves pooled over several clouds.
pub fn point_pro_curve(clouds: &[PointCloud]) -> Result<Vec<ProPoint>, MetricError> {
    let mut scores = Vec::new();
    let mut regions = Vec::new();
    let mut offset = 0;
    for cloud in clouds {
        let (labels, n) = cloud.label_regions();
        scores.extend(cloud.points.iter().map(|p| p.score));
        regions.extend(labels.into_iter().map(|l| l.map(|r| r + offset)));
        offset += n;
    }
    pro_curve(&RegionUnits {
        scores: &scores,
        regions: &regions,
        n_regions: offset,
    })
}

pub fn point_auroc(clouds: &[PointCloud]) -> Result<f64, MetricError> {
    let scores: Vec<f64> = clouds.iter().flat_map(|c| c.points.iter().map(|p| p.score)).collect();
    let labels: Vec<bool> = clouds.iter().flat_map(|c| c.points.iter().map(|p| p.anomalous)).collect();
    auroc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitValue {
    pub limit: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub i_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub i_auroc: f64,
    pub p_auroc: Option<f64>,
    pub aupro: Vec<LimitValue>,
    /// Point-projected approximation of a voxel-level AUPRO; not the
    /// official voxel protocol of any benchmark.
    #[serde(rename = "pV-AUPRO")]
    pub pv_aupro: Vec<LimitValue>,
    pub pv_auroc: Option<f64>,
    pub voxel_size: f64,
    pub voxel_connectivity: usize,
    pub n_samples: usize,
    pub n_pixels: usize,
    pub n_points: usize,
    pub per_category: BTreeMap<String, CategoryMetrics>,
}

/// Writes `threshold,fpr,pro` rows.
pub fn write_curve_csv(path: &Path, curve: &[ProPoint]) -> Result<(), MetricError> {
    let mut out = String::from("threshold,fpr,pro\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.pro));
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::synth::{render_viewset, DefectKind, DefectSpec, SceneSpec};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricError::SingleClass { .. })));
    }

    /// Pairwise definition of AUROC.
    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    n += 1.0;
                    acc += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / n
    }

    #[test]
    fn auroc_matches_pairwise_definition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..6) as f64) * 0.5).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert!((auroc(&scores, &labels).unwrap() - auroc_pairs(&scores, &labels)).abs() < 1e-12);
        }
    }

    fn mask_4x4() -> Array2<f32> {
        let mut m = Array2::zeros((4, 4));
        m[[1, 1]] = 1.0;
        m[[1, 2]] = 1.0;
        m[[2, 1]] = 1.0;
        m[[2, 2]] = 1.0;
        m
    }

    #[test]
    fn aupro_perfect_and_inverted() {
        let m = mask_4x4();
        let perfect = m.mapv(f64::from);
        let inverted = perfect.mapv(|v| 1.0 - v);
        for limit in [0.01, 0.3, 1.0] {
            assert_eq!(aupro(&[perfect.view()], &[m.view()], limit).unwrap(), 1.0);
        }
        assert_eq!(aupro(&[inverted.view()], &[m.view()], 1.0).unwrap(), 0.0);
        assert!(matches!(
            aupro(&[perfect.view()], &[Array2::<f32>::zeros((4, 4)).view()], 0.3),
            Err(MetricError::NoRegions)
        ));
    }

    /// Enumerates every threshold and recomputes FPR and PRO from scratch.
    fn aupro_exhaustive(maps: &[Array2<f64>], masks: &[Array2<f32>], limit: f64) -> f64 {
        let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut regions = Vec::new();
        for (k, mask) in masks.iter().enumerate() {
            let (labels, n) = label_regions(mask.view());
            for r in 0..n {
                let px: Vec<(usize, usize)> = labels
                    .indexed_iter()
                    .filter(|(_, l)| **l == Some(r))
                    .map(|(ix, _)| ix)
                    .collect();
                regions.push((k, px));
            }
        }
        let negatives: usize = masks.iter().map(|m| m.iter().filter(|&&v| v == 0.0).count()).sum();
        let mut pts = vec![(0.0, 0.0)];
        for &t in &thresholds {
            let fp: usize = maps
                .iter()
                .zip(masks)
                .map(|(s, m)| s.iter().zip(m.iter()).filter(|(&v, &g)| v >= t && g == 0.0).count())
                .sum();
            let pro: f64 = regions
                .iter()
                .map(|(k, px)| px.iter().filter(|&&ix| maps[*k][ix] >= t).count() as f64 / px.len() as f64)
                .sum::<f64>()
                / regions.len() as f64;
            pts.push((fp as f64 / negatives as f64, pro));
        }
        let mut area = 0.0;
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x0 >= limit {
                break;
            }
            if x1 > limit {
                let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
                area += (limit - x0) * (y0 + y) / 2.0;
                break;
            }
            area += (x1 - x0) * (y0 + y1) / 2.0;
        }
        let last = *pts.last().unwrap();
        if last.0 < limit {
            area += (limit - last.0) * last.1;
        }
        area / limit
    }

    #[test]
    fn aupro_matches_exhaustive_oracle() {
        let m = mask_4x4();
        let hand = array![
            [0.1, 0.2, 0.1, 0.0],
            [0.3, 0.9, 0.6, 0.2],
            [0.1, 0.4, 0.8, 0.5],
            [0.0, 0.2, 0.3, 0.1]
        ];
        for limit in [0.1, 0.3, 0.5, 1.0] {
            let got = aupro(&[hand.view()], &[m.view()], limit).unwrap();
            let want = aupro_exhaustive(&[hand.clone()], &[m.clone()], limit);
            assert!((got - want).abs() < 1e-12, "limit {limit}: {got} vs {want}");
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let maps: Vec<Array2<f64>> = (0..2)
                .map(|_| Array2::from_shape_simple_fn((4, 4), || rng.random_range(0..8) as f64 / 8.0))
                .collect();
            let mut masks: Vec<Array2<f32>> = (0..2)
                .map(|_| Array2::from_shape_simple_fn((4, 4), || if rng.random_bool(0.3) { 1.0 } else { 0.0 }))
                .collect();
            masks[0][[0, 0]] = 1.0;
            masks[0][[3, 3]] = 0.0;
            let limit = rng.random_range(0.05..=1.0);
            let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
            let mviews: Vec<_> = masks.iter().map(|m| m.view()).collect();
            let got = aupro(&views, &mviews, limit).unwrap();
            let want = aupro_exhaustive(&maps, &masks, limit);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn regions_are_four_connected() {
        let m = array![[1.0f32, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        let (labels, n) = label_regions(m.view());
        assert_eq!(n, 3);
        assert_eq!(labels[[1, 1]], labels[[2, 1]]);
        assert_eq!(labels[[2, 0]], labels[[2, 1]]);
        assert_ne!(labels[[0, 0]], labels[[0, 2]]);
    }

    #[test]
    fn single_pixel_region_matches_auroc() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let map = Array2::from_shape_simple_fn((5, 5), || rng.random_range(0..5) as f64);
            let mut mask = Array2::<f32>::zeros((5, 5));
            mask[[2, 3]] = 1.0;
            let a = aupro(&[map.view()], &[mask.view()], 1.0).unwrap();
            let b = pixel_auroc(&[map.view()], &[mask.view()]).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn flat_view(index: usize, n: usize, depth: f32) -> crate::dataset::ViewObservation {
        let mut v = crate::dataset::tests::tiny_view(index, n, n);
        v.depth.fill(depth);
        v.gt_mask = Some(Array2::zeros((n, n)));
        v
    }

    #[test]
    fn projection_counts_and_voxel_means() {
        let mut v = flat_view(1, 8, 2.0);
        v.depth[[0, 0]] = 0.0;
        let vs = ViewSet::new("a".into(), vec![v.clone()], Label::Normal).unwrap();
        let map = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64);
        let cloud = project_scores_to_points(&vs, &[map.view()], 1e-4).unwrap();
        assert_eq!(cloud.points.len(), 63);
        // two identical views at a voxel covering everything
        let mut w = v.clone();
        w.view_index = 2;
        let vs = ViewSet::new("b".into(), vec![v, w], Label::Normal).unwrap();
        let other = map.mapv(|s| s + 10.0);
        let cloud = project_scores_to_points(&vs, &[map.view(), other.view()], 1e3).unwrap();
        // the eight octant voxels around the origin hold every point
        assert!(cloud.points.len() <= 8);
        assert_eq!(cloud.points.iter().map(|p| p.count).sum::<usize>(), 126);
        let fused: f64 = cloud.points.iter().map(|p| p.score * p.count as f64).sum();
        let valid: f64 = map.iter().skip(1).sum::<f64>() + other.iter().skip(1).sum::<f64>();
        assert!((fused - valid).abs() < 1e-9);
        // the same pixel seen twice lands in one voxel with the mean score
        let cloud = project_scores_to_points(&vs, &[map.view(), other.view()], 1e-4).unwrap();
        assert_eq!(cloud.points.len(), 63);
        assert!(cloud.points.iter().all(|p| p.count == 2));
        let mut means: Vec<f64> = cloud.points.iter().map(|p| p.score).collect();
        means.sort_by(f64::total_cmp);
        let mut want: Vec<f64> = map.iter().skip(1).map(|s| s + 5.0).collect();
        want.sort_by(f64::total_cmp);
        assert!(means.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn voxel_regions_six_connected() {
        let pt = |voxel: VoxelKey, anomalous| ScoredPoint {
            voxel,
            position: [0.0; 3],
            score: 0.0,
            anomalous,
            count: 1,
        };
        let cloud = PointCloud {
            voxel_size: 1.0,
            points: vec![
                pt([0, 0, 0], true),
                pt([0, 0, 1], true),
                pt([1, 1, 1], true),
                pt([5, 5, 5], false),
            ],
        };
        let (labels, n) = cloud.label_regions();
        assert_eq!(n, 2);
        assert_eq!(labels[0], labels[1]);
        assert_ne!(labels[1], labels[2]);
        assert_eq!(labels[3], None);
    }

    #[test]
    fn sphere_defect_voxels_marked_once() {
        let scene = SceneSpec::sphere(12, 96);
        let defect = DefectSpec {
            kind: DefectKind::TextureBlotch,
            azimuth_deg: 15.0,
            elevation_deg: 0.0,
            radius: 0.3,
            magnitude: -0.35,
            seed: 1,
        };
        let full = render_viewset(&scene, Some(&defect), "d", Label::Anomalous).unwrap();
        let seen: Vec<usize> = (0..full.len()).filter(|&i| full.views[i].has_defect_pixels()).collect();
        assert!(seen.len() >= 2);
        let two = ViewSet::new(
            "d".into(),
            seen[..2]
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut v = full.views[i].clone();
                    v.view_index = k + 1;
                    v
                })
                .collect(),
            Label::Anomalous,
        )
        .unwrap();
        let maps: Vec<Array2<f64>> = two.views.iter().map(|v| Array2::zeros(v.depth.dim())).collect();
        let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
        let voxel = 0.05;
        let cloud = project_scores_to_points(&two, &views, voxel).unwrap();
        let mut keys: Vec<VoxelKey> = cloud.points.iter().map(|p| p.voxel).collect();
        keys.dedup();
        assert_eq!(keys.len(), cloud.points.len());
        let centre = crate::synth::Shape::Sphere { radius: 1.0 }.surface_point(15.0, 0.0);
        let marked: Vec<&ScoredPoint> = cloud.points.iter().filter(|p| p.anomalous).collect();
        assert!(!marked.is_empty());
        // every marked voxel touches the analytic defect cap
        let reach = defect.radius + voxel * 3f64.sqrt();
        for p in marked {
            let lo = p.voxel.map(|k| k as f64 * voxel);
            let nearest: Vec3 = std::array::from_fn(|k| centre[k].clamp(lo[k], lo[k] + voxel));
            let d = crate::camera::norm(crate::camera::sub(nearest, centre));
            assert!(d <= reach, "voxel {:?} at {d}", p.voxel);
        }
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_monotone_transform(
            vals in prop::collection::vec(0u8..6, 16),
            bits in prop::collection::vec(any::<bool>(), 16),
        ) {
            let map = Array2::from_shape_fn((4, 4), |(y, x)| vals[y * 4 + x] as f64);
            let mut mask = Array2::from_shape_fn((4, 4), |(y, x)| if bits[y * 4 + x] { 1.0f32 } else { 0.0 });
            mask[[0, 0]] = 1.0;
            mask[[3, 3]] = 0.0;
            let warped = map.mapv(|v| (v * 0.7).exp() + 3.0);
            for limit in [0.2, 1.0] {
                let a = aupro(&[map.view()], &[mask.view()], limit).unwrap();
                let b = aupro(&[warped.view()], &[mask.view()], limit).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
            let a = pixel_auroc(&[map.view()], &[mask.view()]).unwrap();
            let b = pixel_auroc(&[warped.view()], &[mask.view()]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
