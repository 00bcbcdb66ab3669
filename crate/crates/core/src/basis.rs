//! Compactly supported bi-square basis functions, grid placement with
//! pruning, and the sparse observation-by-basis matrix S.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};
use crate::geometry::{BoundingBox, Location};

/// `[1 - (d/tau)^2]^2` inside the support, zero outside.
pub fn bisquare_eval(loc: &Location, center: &Location, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(FrkError::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    Ok(bisquare_unchecked(loc.distance(center), tau))
}

#[inline]
fn bisquare_unchecked(d: f64, tau: f64) -> f64 {
    if d > tau {
        return 0.0;
    }
    let u = d / tau;
    let w = 1.0 - u * u;
    w * w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub centers: Vec<Location>,
    pub tau: f64,
}

impl BasisSet {
    pub fn new(centers: Vec<Location>, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(FrkError::InvalidParameter(format!("tau must be finite and > 0, got {tau}")));
        }
        if centers.is_empty() {
            return Err(FrkError::EmptyBasis { tau });
        }
        if let Some(c) = centers.iter().find(|c| !c.is_finite()) {
            return Err(FrkError::InvalidParameter(format!("non-finite basis center {c:?}")));
        }
        let set = Self { centers, tau };
        if let Some((i, j)) = set.find_duplicate() {
            return Err(FrkError::SingularCovariance(format!(
                "basis centers {i} and {j} coincide"
            )));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn find_duplicate(&self) -> Option<(usize, usize)> {
        let index = CenterIndex::new(&self.centers, self.tau);
        for (i, c) in self.centers.iter().enumerate() {
            let mut hit = None;
            index.for_each_near(c, |j, d| {
                if j != i && d <= 1e-9 * self.tau && hit.is_none() {
                    hit = Some(j);
                }
            });
            if let Some(j) = hit {
                return Some((i.min(j), i.max(j)));
            }
        }
        None
    }

    /// Pairwise center distances, the r x r matrix used by the correlation
    /// model and its derivatives.
    pub fn distance_matrix(&self) -> DMatrix<f64> {
        let r = self.len();
        DMatrix::from_fn(r, r, |i, j| self.centers[i].distance(&self.centers[j]))
    }

    pub fn evaluator(&self) -> BasisEvaluator<'_> {
        BasisEvaluator {
            basis: self,
            index: CenterIndex::new(&self.centers, self.tau),
        }
    }
}

/// Candidate centers on the tau x tau grid covering `area`, before pruning.
///
/// The grid origin is the lower-left corner of `area` shifted by tau/2, so the
/// first square is centered on that corner; squares are added until the area
/// is covered.
pub fn candidate_grid(area: &BoundingBox, tau: f64) -> Result<Vec<Location>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(FrkError::InvalidParameter(format!("tau must be finite and > 0, got {tau}")));
    }
    let nx = squares_along(area.width(), tau);
    let ny = squares_along(area.height(), tau);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            centers.push(Location::new(
                area.min.x + i as f64 * tau,
                area.min.y + j as f64 * tau,
            ));
        }
    }
    Ok(centers)
}

fn squares_along(extent: f64, tau: f64) -> usize {
    ((extent / tau + 0.5).ceil() as usize).max(1)
}

/// Places candidate centers on the covering grid and drops every center with
/// no observation strictly inside its support.
pub fn build_basis_set(area: &BoundingBox, tau: f64, obs: &[Location]) -> Result<BasisSet> {
    let candidates = candidate_grid(area, tau)?;
    let index = CenterIndex::new(&candidates, tau);
    let mut covered = vec![false; candidates.len()];
    for loc in obs {
        index.for_each_near(loc, |j, d| {
            if d < tau {
                covered[j] = true;
            }
        });
    }
    let centers: Vec<Location> = candidates
        .into_iter()
        .zip(covered)
        .filter_map(|(c, keep)| keep.then_some(c))
        .collect();
    if centers.is_empty() {
        return Err(FrkError::EmptyBasis { tau });
    }
    log::debug!("basis: tau = {tau}, r = {}", centers.len());
    Ok(BasisSet { centers, tau })
}

/// Uniform hash grid over basis centers with cell size tau, so that every
/// center within distance tau of a query lies in the 3x3 block of cells
/// around it.
#[derive(Debug, Clone)]
struct CenterIndex {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    centers: Vec<Location>,
}

impl CenterIndex {
    fn new(centers: &[Location], tau: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, c) in centers.iter().enumerate() {
            buckets.entry(Self::key(c, tau)).or_default().push(i);
        }
        Self {
            cell: tau,
            buckets,
            centers: centers.to_vec(),
        }
    }

    fn key(loc: &Location, cell: f64) -> (i64, i64) {
        ((loc.x / cell).floor() as i64, (loc.y / cell).floor() as i64)
    }

    /// Calls `f(index, distance)` for every center within one cell-size of
    /// `loc`, in increasing center index order.
    fn for_each_near(&self, loc: &Location, mut f: impl FnMut(usize, f64)) {
        if !loc.is_finite() {
            return;
        }
        let (kx, ky) = Self::key(loc, self.cell);
        let mut hits: Vec<(usize, f64)> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.buckets.get(&(kx + dx, ky + dy)) {
                    for &j in ids {
                        let d = loc.distance(&self.centers[j]);
                        if d <= self.cell {
                            hits.push((j, d));
                        }
                    }
                }
            }
        }
        hits.sort_unstable_by_key(|h| h.0);
        for (j, d) in hits {
            f(j, d);
        }
    }
}

/// Evaluates s(x) sparsely using a spatial index over the centers.
#[derive(Debug, Clone)]
pub struct BasisEvaluator<'a> {
    basis: &'a BasisSet,
    index: CenterIndex,
}

impl BasisEvaluator<'_> {
    pub fn r(&self) -> usize {
        self.basis.len()
    }

    /// Nonzero entries of s(loc) as (column, value), sorted by column.
    pub fn eval_sparse(&self, loc: &Location) -> Vec<(usize, f64)> {
        let tau = self.basis.tau;
        let mut out = Vec::new();
        self.index.for_each_near(loc, |j, d| {
            let v = bisquare_unchecked(d, tau);
            if v > 0.0 {
                out.push((j, v));
            }
        });
        out
    }

    pub fn eval_dense(&self, loc: &Location) -> DVector<f64> {
        let mut s = DVector::zeros(self.r());
        for (j, v) in self.eval_sparse(loc) {
            s[j] = v;
        }
        s
    }

    pub fn matrix(&self, locs: &[Location]) -> BasisMatrix {
        let mut row_ptr = Vec::with_capacity(locs.len() + 1);
        let mut entries = Vec::new();
        row_ptr.push(0);
        for loc in locs {
            entries.extend(self.eval_sparse(loc));
            row_ptr.push(entries.len());
        }
        BasisMatrix {
            ncols: self.r(),
            row_ptr,
            entries,
        }
    }
}

/// Row-compressed N x r matrix of basis evaluations. Each observation touches
/// only the handful of centers within tau, so products with S cost O(N).
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl BasisMatrix {
    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Keeps only the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> BasisMatrix {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        row_ptr.push(0);
        for &i in rows {
            entries.extend_from_slice(self.row(i));
            row_ptr.push(entries.len());
        }
        BasisMatrix {
            ncols: self.ncols,
            row_ptr,
            entries,
        }
    }

    /// S'S (r x r).
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows() {
            let row = self.row(i);
            for &(a, va) in row {
                for &(b, vb) in row {
                    g[(a, b)] += va * vb;
                }
            }
        }
        g
    }

    /// S'v.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.nrows());
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows() {
            for &(j, s) in self.row(i) {
                out[j] += s * v[i];
            }
        }
        out
    }

    /// S'M for a dense N x k matrix M.
    pub fn tr_mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.nrows());
        let mut out = DMatrix::zeros(self.ncols, m.ncols());
        for i in 0..self.nrows() {
            for &(j, s) in self.row(i) {
                for c in 0..m.ncols() {
                    out[(j, c)] += s * m[(i, c)];
                }
            }
        }
        out
    }

    /// S v for an r-vector v.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.ncols);
        DVector::from_iterator(
            self.nrows(),
            (0..self.nrows()).map(|i| self.row(i).iter().map(|&(j, s)| s * v[j]).sum()),
        )
    }

    /// S M for a dense r x k matrix M.
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows(), m.ncols());
        for i in 0..self.nrows() {
            for &(j, s) in self.row(i) {
                for c in 0..m.ncols() {
                    out[(i, c)] += s * m[(j, c)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            for &(j, s) in self.row(i) {
                d[(i, j)] = s;
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bisquare_closed_forms() {
        let c = Location::new(10.0, -4.0);
        assert_eq!(bisquare_eval(&c, &c, 7.0).unwrap(), 1.0);
        let edge = Location::new(10.0 + 7.0, -4.0);
        assert_eq!(bisquare_eval(&edge, &c, 7.0).unwrap(), 0.0);
        let half = Location::new(10.0, -4.0 + 3.5);
        assert!((bisquare_eval(&half, &c, 7.0).unwrap() - 0.5625).abs() < 1e-15);
        let outside = Location::new(100.0, 100.0);
        assert_eq!(bisquare_eval(&outside, &c, 7.0).unwrap(), 0.0);
    }

    #[test]
    fn bisquare_rejects_bad_tau() {
        let c = Location::new(0.0, 0.0);
        assert!(matches!(bisquare_eval(&c, &c, 0.0), Err(FrkError::InvalidParameter(_))));
        assert!(bisquare_eval(&c, &c, -1.0).is_err());
        assert!(bisquare_eval(&c, &c, f64::NAN).is_err());
    }

    #[test]
    fn dense_observations_keep_full_grid() {
        let area = BoundingBox::new(0.0, 0.0, 1000.0, 1000.0).unwrap();
        let obs: Vec<Location> = (0..=200)
            .flat_map(|i| (0..=200).map(move |j| Location::new(i as f64 * 5.0, j as f64 * 5.0)))
            .collect();
        let r_max = candidate_grid(&area, 100.0).unwrap().len();
        let basis = build_basis_set(&area, 100.0, &obs).unwrap();
        assert_eq!(basis.len(), r_max);
        assert_eq!(r_max, 11 * 11);
    }

    #[test]
    fn multicell_area_grid_count() {
        // 164 x 122 points at 25 m, tau = 150.
        let area = BoundingBox::new(0.0, 0.0, 163.0 * 25.0, 121.0 * 25.0).unwrap();
        assert_eq!(candidate_grid(&area, 150.0).unwrap().len(), 588);
    }

    #[test]
    fn sparse_roads_are_pruned() {
        let area = BoundingBox::new(0.0, 0.0, 22_000.0, 10_000.0).unwrap();
        // two straight roads
        let mut obs = Vec::new();
        for i in 0..4000 {
            let t = i as f64 / 4000.0;
            obs.push(Location::new(t * 22_000.0, 3000.0 + 2000.0 * t));
            obs.push(Location::new(11_000.0 + 500.0 * t, t * 10_000.0));
        }
        let r_max = candidate_grid(&area, 250.0).unwrap().len();
        let basis = build_basis_set(&area, 250.0, &obs).unwrap();
        assert!(basis.len() < r_max / 4, "r = {}, r_max = {r_max}", basis.len());
    }

    #[test]
    fn single_observation_keeps_one_center() {
        let area = BoundingBox::new(0.0, 0.0, 1000.0, 1000.0).unwrap();
        let basis = build_basis_set(&area, 100.0, &[Location::new(300.0, 400.0)]).unwrap();
        assert_eq!(basis.centers, vec![Location::new(300.0, 400.0)]);
    }

    #[test]
    fn empty_basis_is_an_error() {
        let area = BoundingBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        let far = [Location::new(1e6, 1e6)];
        assert!(matches!(
            build_basis_set(&area, 10.0, &far),
            Err(FrkError::EmptyBasis { .. })
        ));
    }

    #[test]
    fn duplicate_centers_rejected() {
        let c = Location::new(1.0, 2.0);
        assert!(matches!(
            BasisSet::new(vec![c, Location::new(5.0, 5.0), c], 3.0),
            Err(FrkError::SingularCovariance(_))
        ));
    }

    #[test]
    fn sparse_matrix_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers: Vec<Location> = (0..12)
            .map(|_| Location::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)))
            .collect();
        let basis = BasisSet::new(centers.clone(), 90.0).unwrap();
        let locs: Vec<Location> = (0..50)
            .map(|_| Location::new(rng.random_range(-20.0..320.0), rng.random_range(-20.0..320.0)))
            .collect();
        let s = basis.evaluator().matrix(&locs).to_dense();
        for (i, loc) in locs.iter().enumerate() {
            for (l, c) in centers.iter().enumerate() {
                let want = bisquare_eval(loc, c, 90.0).unwrap();
                assert_eq!(s[(i, l)], want, "entry ({i}, {l})");
            }
        }
    }

    #[test]
    fn sparse_products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers: Vec<Location> = (0..8)
            .map(|i| Location::new(40.0 * i as f64, rng.random_range(0.0..50.0)))
            .collect();
        let basis = BasisSet::new(centers, 60.0).unwrap();
        let locs: Vec<Location> = (0..30)
            .map(|_| Location::new(rng.random_range(0.0..300.0), rng.random_range(0.0..50.0)))
            .collect();
        let sm = basis.evaluator().matrix(&locs);
        let s = sm.to_dense();
        let v = DVector::from_fn(30, |i, _| (i as f64).sin());
        let w = DVector::from_fn(8, |i, _| (i as f64).cos());
        let m = DMatrix::from_fn(30, 3, |i, j| (i * j) as f64 * 0.1);
        assert!((sm.gram() - s.tr_mul(&s)).amax() < 1e-12);
        assert!((sm.tr_mul_vec(&v) - s.tr_mul(&v)).amax() < 1e-12);
        assert!((sm.mul_vec(&w) - &s * &w).amax() < 1e-12);
        assert!((sm.tr_mul_dense(&m) - s.tr_mul(&m)).amax() < 1e-12);
        let sub = sm.select_rows(&[3, 0, 7]);
        assert_eq!(sub.row(1), sm.row(0));
    }
}
