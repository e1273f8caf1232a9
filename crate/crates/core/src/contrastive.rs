//! Cross-modal contrastive alignment of refined features.
//!
//! Per view, the image and depth feature rows of the same patch form the
//! positive pair of a row-wise InfoNCE over the `P×P` cross-modal similarity
//! matrix. The same loss is applied to differential features (the change
//! between consecutive views), averaged over the `I-1` consecutive pairs
//! without wrapping around the ring.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureSet, Modality};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("modality dims differ ({d_2d} vs {d_3d}); contrastive alignment needs equal dims")]
    DimMismatch { d_2d: usize, d_3d: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// L2-normalize refined rows before building similarity matrices.
    pub normalize_rows: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            normalize_rows: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLossReport {
    pub l_view: f64,
    /// `None` when the sample has a single view.
    pub l_diff: Option<f64>,
    /// `l_view + l_diff` (a missing `l_diff` counts as 0).
    pub l_sspa: f64,
    pub per_view: Vec<f64>,
    pub per_diff: Vec<f64>,
}

/// `S = A Bᵀ` between the two modalities of one view.
pub fn semantic_similarity_matrix(f2d: &Array2<f64>, f3d: &Array2<f64>) -> Result<Array2<f64>, AlignError> {
    if f2d.ncols() != f3d.ncols() {
        return Err(AlignError::DimMismatch {
            d_2d: f2d.ncols(),
            d_3d: f3d.ncols(),
        });
    }
    if f2d.nrows() != f3d.nrows() {
        return Err(AlignError::Shape(f2d.dim(), f3d.dim()));
    }
    Ok(f2d.dot(&f3d.t()))
}

fn log_sum_exp(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `-(1/P) Σ_p [S(p,p) - logsumexp_q S(p,q)]`, with the diagonal as positives.
pub fn infonce_rowwise(s: &Array2<f64>) -> f64 {
    let p = s.nrows();
    let total: f64 = s
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(r, row)| log_sum_exp(row) - row[r])
        .sum();
    total / p as f64
}

/// Loss and `dL/dS`: `(softmax(S)_{pq} - δ_{pq}) / P`.
pub fn infonce_rowwise_grad(s: &Array2<f64>) -> (f64, Array2<f64>) {
    let p = s.nrows();
    let mut grad = Array2::zeros(s.dim());
    let mut total = 0.0;
    for (r, row) in s.axis_iter(Axis(0)).enumerate() {
        let lse = log_sum_exp(row);
        total += lse - row[r];
        for (c, &v) in row.iter().enumerate() {
            grad[[r, c]] = (v - lse).exp() / p as f64;
        }
        grad[[r, r]] -= 1.0 / p as f64;
    }
    (total / p as f64, grad)
}

/// Elementwise `next - current`.
pub fn differential_features(next: &Array2<f64>, current: &Array2<f64>) -> Result<Array2<f64>, AlignError> {
    if next.dim() != current.dim() {
        return Err(AlignError::Shape(next.dim(), current.dim()));
    }
    Ok(next - current)
}

/// Row-normalized copy and the original row norms. Zero rows stay zero.
fn normalize_rows(a: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = a.clone();
    let mut norms = Vec::with_capacity(a.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient back through row normalization: `(g - n (n·g)) / |r|`.
fn normalize_rows_backward(normalized: &Array2<f64>, norms: &[f64], grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(grad.dim());
    for (r, &len) in norms.iter().enumerate() {
        if len == 0.0 {
            continue;
        }
        let n = normalized.row(r);
        let g = grad.row(r);
        let proj = n.dot(&g);
        let mut row = out.row_mut(r);
        row.assign(&((&g - &(&n * proj)) / len));
    }
    out
}

struct Prepared {
    /// `[view][modality]` rows entering the similarity matrices.
    rows: Vec<[Array2<f64>; 2]>,
    norms: Vec<[Vec<f64>; 2]>,
}

fn prepare(refined: &FeatureSet, config: &ContrastiveConfig) -> Result<Prepared, AlignError> {
    let (d_2d, d_3d) = (refined.dim(Modality::Image), refined.dim(Modality::Depth));
    if d_2d != d_3d {
        return Err(AlignError::DimMismatch { d_2d, d_3d });
    }
    let mut rows = Vec::with_capacity(refined.n_views());
    let mut norms = Vec::with_capacity(refined.n_views());
    for pair in &refined.maps {
        if config.normalize_rows {
            let (a, na) = normalize_rows(&pair[0]);
            let (b, nb) = normalize_rows(&pair[1]);
            rows.push([a, b]);
            norms.push([na, nb]);
        } else {
            rows.push([pair[0].clone(), pair[1].clone()]);
            norms.push([vec![], vec![]]);
        }
    }
    Ok(Prepared { rows, norms })
}

/// Which terms contribute to the gradient, and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub view: f64,
    pub diff: f64,
}

/// Evaluates the alignment losses and, when `weights` is given, the gradient
/// of `weights.view·l_view + weights.diff·l_diff` w.r.t. every refined row.
pub fn sspa_forward_backward(
    refined: &FeatureSet,
    config: &ContrastiveConfig,
    weights: Option<TermWeights>,
) -> Result<(AlignmentLossReport, Option<FeatureSet>), AlignError> {
    let prep = prepare(refined, config)?;
    let n_views = refined.n_views();
    let mut grads: Option<Vec<[Array2<f64>; 2]>> = weights.map(|_| {
        prep.rows
            .iter()
            .map(|pair| [Array2::zeros(pair[0].dim()), Array2::zeros(pair[1].dim())])
            .collect()
    });

    let mut per_view = Vec::with_capacity(n_views);
    for (i, pair) in prep.rows.iter().enumerate() {
        let s = semantic_similarity_matrix(&pair[0], &pair[1])?;
        if let (Some(g), Some(w)) = (grads.as_mut(), weights) {
            let (loss, gs) = infonce_rowwise_grad(&s);
            per_view.push(loss);
            let gs = gs * (w.view / n_views as f64);
            g[i][0] += &gs.dot(&pair[1]);
            g[i][1] += &gs.t().dot(&pair[0]);
        } else {
            per_view.push(infonce_rowwise(&s));
        }
    }
    let l_view = per_view.iter().sum::<f64>() / n_views as f64;

    let mut per_diff = Vec::with_capacity(n_views.saturating_sub(1));
    for i in 0..n_views.saturating_sub(1) {
        let d2 = differential_features(&prep.rows[i + 1][0], &prep.rows[i][0])?;
        let d3 = differential_features(&prep.rows[i + 1][1], &prep.rows[i][1])?;
        let s = semantic_similarity_matrix(&d2, &d3)?;
        if let (Some(g), Some(w)) = (grads.as_mut(), weights) {
            let (loss, gs) = infonce_rowwise_grad(&s);
            per_diff.push(loss);
            let gs = gs * (w.diff / (n_views - 1) as f64);
            let g2 = gs.dot(&d3);
            let g3 = gs.t().dot(&d2);
            g[i + 1][0] += &g2;
            g[i][0] -= &g2;
            g[i + 1][1] += &g3;
            g[i][1] -= &g3;
        } else {
            per_diff.push(infonce_rowwise(&s));
        }
    }
    let l_diff = if per_diff.is_empty() {
        log::warn!("single-view sample: differential alignment loss is undefined and counted as 0");
        None
    } else {
        Some(per_diff.iter().sum::<f64>() / per_diff.len() as f64)
    };

    let report = AlignmentLossReport {
        l_view,
        l_diff,
        l_sspa: l_view + l_diff.unwrap_or(0.0),
        per_view,
        per_diff,
    };

    let grads = grads.map(|g| {
        let maps = if config.normalize_rows {
            g.into_iter()
                .enumerate()
                .map(|(i, pair)| {
                    [0, 1].map(|m| normalize_rows_backward(&prep.rows[i][m], &prep.norms[i][m], &pair[m]))
                })
                .collect()
        } else {
            g
        };
        FeatureSet::new(refined.grid, maps)
    });
    Ok((report, grads))
}

pub fn sspa_loss(refined: &FeatureSet, config: &ContrastiveConfig) -> Result<AlignmentLossReport, AlignError> {
    Ok(sspa_forward_backward(refined, config, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refine::tests::random_features;
    use ndarray::array;
    use proptest::prelude::*;

    /// Loss of one similarity matrix written straight from the definition.
    fn infonce_direct(s: &Array2<f64>) -> f64 {
        let p = s.nrows();
        let mut acc = 0.0;
        for r in 0..p {
            let mut denom = 0.0;
            for c in 0..p {
                denom += s[[r, c]].exp();
            }
            acc += (s[[r, r]].exp() / denom).ln();
        }
        -acc / p as f64
    }

    fn matmul_t_loops(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((a.nrows(), b.nrows()));
        for i in 0..a.nrows() {
            for j in 0..b.nrows() {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[j, k]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    fn normalize_loops(a: &Array2<f64>) -> Array2<f64> {
        let mut out = a.clone();
        for r in 0..a.nrows() {
            let mut n = 0.0;
            for c in 0..a.ncols() {
                n += a[[r, c]] * a[[r, c]];
            }
            let n = n.sqrt();
            if n > 0.0 {
                for c in 0..a.ncols() {
                    out[[r, c]] /= n;
                }
            }
        }
        out
    }

    /// Loop-based evaluation of the full alignment objective.
    pub(crate) fn sspa_oracle(f: &FeatureSet, normalize: bool) -> (f64, f64) {
        let n = f.n_views();
        let rows: Vec<[Array2<f64>; 2]> = (0..n)
            .map(|i| {
                [Modality::Image, Modality::Depth].map(|m| {
                    if normalize {
                        normalize_loops(f.get(i, m))
                    } else {
                        f.get(i, m).clone()
                    }
                })
            })
            .collect();
        let mut l_view = 0.0;
        for pair in &rows {
            l_view += infonce_direct(&matmul_t_loops(&pair[0], &pair[1]));
        }
        l_view /= n as f64;
        let mut l_diff = 0.0;
        for i in 0..n - 1 {
            let mut d2 = rows[i + 1][0].clone();
            let mut d3 = rows[i + 1][1].clone();
            for r in 0..d2.nrows() {
                for c in 0..d2.ncols() {
                    d2[[r, c]] -= rows[i][0][[r, c]];
                    d3[[r, c]] -= rows[i][1][[r, c]];
                }
            }
            l_diff += infonce_direct(&matmul_t_loops(&d2, &d3));
        }
        (l_view, l_diff / (n - 1) as f64)
    }

    #[test]
    fn identity_rows_give_identity_similarity() {
        let e = Array2::<f64>::eye(3);
        assert_eq!(semantic_similarity_matrix(&e, &e).unwrap(), e);
        let mut a = Array2::from_elem((3, 2), 0.7);
        a.row_mut(1).fill(0.0);
        let s = semantic_similarity_matrix(&a, &Array2::from_elem((3, 2), 1.3)).unwrap();
        assert!(s.row(1).iter().all(|&v| v == 0.0));
        assert!(matches!(
            semantic_similarity_matrix(&Array2::zeros((3, 2)), &Array2::zeros((3, 4))),
            Err(AlignError::DimMismatch { .. })
        ));
    }

    #[test]
    fn similarity_matches_loops() {
        let f = random_features(1, 1, 3, 2, 17);
        let a = f.get(0, Modality::Image);
        let b = f.get(0, Modality::Depth);
        let s = semantic_similarity_matrix(a, b).unwrap();
        let o = matmul_t_loops(a, b);
        assert!(s.iter().zip(o.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn infonce_examples() {
        let s = Array2::from_elem((4, 4), 0.3);
        assert!((infonce_rowwise(&s) - 4f64.ln()).abs() < 1e-12);
        assert!((infonce_rowwise(&s) - 1.386294).abs() < 1e-6);
        let s = Array2::<f64>::eye(4) * 1000.0;
        assert!(infonce_rowwise(&s) < 1e-6);
        let s = array![[0.3, -1.2, 2.0], [0.5, 0.1, -0.4], [1.5, 2.5, -0.7]];
        assert!((infonce_rowwise(&s) - infonce_direct(&s)).abs() < 1e-12);
    }

    #[test]
    fn differential_examples() {
        let a = array![[1.0, 2.0], [3.0, -1.0]];
        assert!(differential_features(&a, &a).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(differential_features(&(&a * 2.0), &a).unwrap(), a);
        let b = array![[0.5, 0.1], [-2.0, 4.0]];
        assert_eq!(
            differential_features(&a, &b).unwrap(),
            -differential_features(&b, &a).unwrap()
        );
        assert!(differential_features(&a, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn dominant_diagonal_drives_view_loss_to_zero() {
        // Orthogonal rows scaled to norm 10 in both modalities; raw dot products.
        let p = 4;
        let rows = Array2::<f64>::eye(p) * 10.0;
        let grid = crate::grid::PatchGrid::new(2, 2, 4);
        let f = FeatureSet::new(grid, vec![[rows.clone(), rows.clone()], [rows.clone(), rows]]);
        let raw = ContrastiveConfig { normalize_rows: false };
        let r = sspa_loss(&f, &raw).unwrap();
        // each row: log(1 + 3 e^{-100})
        assert!(r.l_view < 0.01);
        assert!((r.l_view - (1.0 + 3.0 * (-100f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_consecutive_views_give_uniform_diff() {
        let f = random_features(1, 2, 2, 3, 5);
        let two = FeatureSet::new(f.grid, vec![f.maps[0].clone(), f.maps[0].clone()]);
        for normalize_rows in [true, false] {
            let r = sspa_loss(&two, &ContrastiveConfig { normalize_rows }).unwrap();
            assert!((r.l_diff.unwrap() - 4f64.ln()).abs() < 1e-12);
            assert_eq!(r.l_sspa, r.l_view + r.l_diff.unwrap());
        }
    }

    #[test]
    fn single_view_has_no_diff_term() {
        let f = random_features(1, 2, 2, 3, 5);
        let r = sspa_loss(&f, &ContrastiveConfig::default()).unwrap();
        assert_eq!(r.l_diff, None);
        assert_eq!(r.l_sspa, r.l_view);
    }

    #[test]
    fn matches_loop_oracle() {
        for seed in 0..20 {
            let f = random_features(3, 2, 2, 3, 100 + seed);
            for normalize_rows in [true, false] {
                let r = sspa_loss(&f, &ContrastiveConfig { normalize_rows }).unwrap();
                let (v, d) = sspa_oracle(&f, normalize_rows);
                assert!((r.l_view - v).abs() < 1e-9);
                assert!((r.l_diff.unwrap() - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let weights = TermWeights { view: 1.0, diff: 1.0 };
        for seed in 0..5 {
            let mut f = random_features(3, 2, 2, 3, 200 + seed);
            // unit-norm rows
            for pair in f.maps.iter_mut() {
                for m in pair.iter_mut() {
                    *m = normalize_rows(m).0;
                }
            }
            for normalize_rows in [true, false] {
                let cfg = ContrastiveConfig { normalize_rows };
                let (_, g) = sspa_forward_backward(&f, &cfg, Some(weights)).unwrap();
                let g = g.unwrap();
                let h = 1e-3;
                for v in 0..3 {
                    for m in 0..2 {
                        for idx in 0..f.maps[v][m].len() {
                            let (r, c) = (idx / 3, idx % 3);
                            let mut plus = f.clone();
                            plus.maps[v][m][[r, c]] += h;
                            let mut minus = f.clone();
                            minus.maps[v][m][[r, c]] -= h;
                            let lp = sspa_loss(&plus, &cfg).unwrap().l_sspa;
                            let lm = sspa_loss(&minus, &cfg).unwrap().l_sspa;
                            let fd = (lp - lm) / (2.0 * h);
                            let an = g.maps[v][m][[r, c]];
                            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                            assert!(rel < 1e-4, "seed {seed} view {v} mod {m} ({r},{c}): {an} vs {fd}");
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn infonce_nonnegative_and_shift_invariant(
            vals in prop::collection::vec(-20.0f64..20.0, 16),
            shifts in prop::collection::vec(-50.0f64..50.0, 4),
        ) {
            let s = Array2::from_shape_vec((4, 4), vals).unwrap();
            let l = infonce_rowwise(&s);
            prop_assert!(l >= -1e-12);
            let mut shifted = s.clone();
            for (r, sh) in shifts.iter().enumerate() {
                shifted.row_mut(r).mapv_inplace(|v| v + sh);
            }
            prop_assert!((infonce_rowwise(&shifted) - l).abs() < 1e-9);
        }
    }
}
