//! Spatial graph over sensor locations and its learnable spectral rescaling.
//!
//! The adjacency is a Gaussian kernel of pairwise distance. Its eigenpairs
//! are computed once at construction; the dynamic adjacency used by the
//! convolution is `P * diag(lambda * alpha) * P^T` with positive `alpha`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymmetricEigen};

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    /// Latitude/longitude in degrees, great-circle distance in km.
    #[default]
    Latlon,
    /// Planar coordinates, Euclidean distance.
    Euclidean,
}

impl std::str::FromStr for Units {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latlon" => Ok(Units::Latlon),
            "euclidean" => Ok(Units::Euclidean),
            other => Err(Error::Config(format!(
                "units must be `latlon` or `euclidean`, got `{other}`"
            ))),
        }
    }
}

/// Haversine distance between two (lat, lon) points in degrees.
pub fn great_circle_km(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (lat1, lon1) = (a[0].to_radians(), a[1].to_radians());
    let (lat2, lon2) = (b[0].to_radians(), b[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn distance(a: [f64; 2], b: [f64; 2], units: Units) -> f64 {
    match units {
        Units::Latlon => great_circle_km(a, b),
        Units::Euclidean => ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt(),
    }
}

fn check_coords(coords: &[[f64; 2]]) -> Result<()> {
    if coords.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "graph needs at least 2 nodes, got {}",
            coords.len()
        )));
    }
    if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(Error::InvalidInput(format!("node {i} has non-finite coordinates")));
    }
    Ok(())
}

pub fn pairwise_distances(coords: &[[f64; 2]], units: Units) -> Result<Array2<f64>> {
    check_coords(coords)?;
    let n = coords.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = distance(coords[i], coords[j], units);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Median of the strictly upper-triangular pairwise distances.
///
/// Falls back to 1.0 when every pair coincides, since a zero bandwidth is
/// undefined.
pub fn median_distance(dist: ArrayView2<f64>) -> f64 {
    let n = dist.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| dist[[i, j]])
        .collect();
    v.sort_by(f64::total_cmp);
    let m = if v.is_empty() {
        0.0
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `A[i][j] = exp(-dist(i,j)^2 / (2 sigma^2))`.
pub fn build_gaussian_adjacency(coords: &[[f64; 2]], units: Units, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("sigma must be positive and finite, got {sigma}")));
    }
    let dist = pairwise_distances(coords, units)?;
    Ok(gaussian_kernel(dist.view(), sigma))
}

fn gaussian_kernel(dist: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    let denom = 2.0 * sigma * sigma;
    dist.mapv(|d| (-(d * d) / denom).exp())
}

/// Sensor graph with cached eigendecomposition of its adjacency.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    pub coords: Vec<[f64; 2]>,
    pub units: Units,
    pub sigma: f64,
    pub adjacency: Array2<f64>,
    pub eigen: SymmetricEigen,
}

impl SpatialGraph {
    /// Build the graph; `sigma = None` selects the median pairwise distance.
    pub fn new(coords: Vec<[f64; 2]>, units: Units, sigma: Option<f64>) -> Result<Self> {
        let dist = pairwise_distances(&coords, units)?;
        let sigma = match sigma {
            Some(s) if s > 0.0 && s.is_finite() => s,
            Some(s) => {
                return Err(Error::InvalidInput(format!(
                    "sigma must be positive and finite, got {s}"
                )))
            }
            None => median_distance(dist.view()),
        };
        let adjacency = gaussian_kernel(dist.view(), sigma);
        let eigen = linalg::eigh(adjacency.view(), "gaussian adjacency")?;
        Ok(SpatialGraph {
            coords,
            units,
            sigma,
            adjacency,
            eigen,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn eigvecs(&self) -> ArrayView2<'_, f64> {
        self.eigen.vectors.view()
    }

    pub fn eigvals(&self) -> &Array1<f64> {
        &self.eigen.values
    }

    /// Dynamic adjacency under the given per-eigenvalue scaling.
    pub fn dynamic_adjacency(&self, scaler: &SpectralScaler) -> Result<Array2<f64>> {
        let scaled = scale_eigenvalues(self.eigvals().as_slice().unwrap(), &scaler.alpha())?;
        reconstruct_dynamic_adjacency(self.eigvecs(), &scaled)
    }
}

pub fn eigendecompose(a: ArrayView2<f64>) -> Result<SymmetricEigen> {
    linalg::eigh(a, "adjacency")
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learnable per-eigenvalue scaling factors, kept positive through a
/// softplus of an unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralScaler {
    pub raw: Array1<f64>,
}

impl SpectralScaler {
    /// All factors equal to one.
    pub fn identity(n: usize) -> Self {
        SpectralScaler {
            raw: Array1::from_elem(n, softplus_inv(1.0)),
        }
    }

    pub fn from_alpha(alpha: &[f64]) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Constraint(format!("scaling factor must be positive, got {a}")));
        }
        Ok(SpectralScaler {
            raw: alpha.iter().map(|&a| softplus_inv(a)).collect(),
        })
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.raw.iter().map(|&r| softplus(r)).collect()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Elementwise `lambda_i * alpha_i`; every factor must be positive.
pub fn scale_eigenvalues(lambda: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != alpha.len() {
        return Err(Error::shape("scale_eigenvalues", lambda.len(), alpha.len()));
    }
    if let Some((i, a)) = alpha.iter().enumerate().find(|(_, a)| !(**a > 0.0)) {
        return Err(Error::Constraint(format!(
            "scaling factor {i} is {a}; negative or zero factors invert or erase the graph"
        )));
    }
    Ok(lambda.iter().zip(alpha).map(|(l, a)| l * a).collect())
}

/// `P * diag(scaled) * P^T`.
pub fn reconstruct_dynamic_adjacency(p: ArrayView2<f64>, scaled: &[f64]) -> Result<Array2<f64>> {
    linalg::compose(p, scaled)
}

/// Gradient of a scalar loss with respect to the raw scaler parameters,
/// given the gradient `g_adj` with respect to the dynamic adjacency.
///
/// `d loss / d alpha_i = lambda_i * (P^T G P)_ii`, chained through softplus.
pub fn scaler_backward(graph: &SpatialGraph, scaler: &SpectralScaler, g_adj: ArrayView2<f64>) -> Array1<f64> {
    let p = graph.eigvecs();
    let gp = g_adj.dot(&p);
    let lambda = graph.eigvals();
    Array1::from_iter((0..p.ncols()).map(|i| {
        let quad: f64 = p.column(i).dot(&gp.column(i));
        lambda[i] * quad * sigmoid(scaler.raw[i])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_coords_give_ones() {
        let a = build_gaussian_adjacency(&[[10.0, 20.0], [10.0, 20.0]], Units::Latlon, 5.0).unwrap();
        assert_eq!(a, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn huge_sigma_flattens_kernel() {
        let coords = [[0.0, 0.0], [1.0, 1.0], [-2.0, 3.0]];
        let a = build_gaussian_adjacency(&coords, Units::Latlon, 1e9).unwrap();
        assert!(a.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn points_on_a_line() {
        let d = 7.5;
        let coords = [[0.0, 0.0], [d, 0.0], [2.0 * d, 0.0]];
        let a = build_gaussian_adjacency(&coords, Units::Euclidean, d).unwrap();
        assert!((a[[0, 1]] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((a[[0, 2]] - (-2.0f64).exp()).abs() < 1e-15);
        // same spacing along a meridian, in km
        let deg = d / (EARTH_RADIUS_KM * std::f64::consts::PI / 180.0);
        let coords = [[0.0, 0.0], [deg, 0.0], [2.0 * deg, 0.0]];
        let a = build_gaussian_adjacency(&coords, Units::Latlon, d).unwrap();
        assert!((a[[0, 1]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((a[[0, 2]] - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_gaussian_adjacency(&[[0.0, f64::NAN], [1.0, 1.0]], Units::Latlon, 1.0).is_err());
        assert!(build_gaussian_adjacency(&[[0.0, 0.0]], Units::Latlon, 1.0).is_err());
        assert!(build_gaussian_adjacency(&[[0.0, 0.0], [1.0, 1.0]], Units::Latlon, 0.0).is_err());
    }

    #[test]
    fn adjacency_invariants() {
        let coords = vec![[37.0, -122.0], [37.1, -122.2], [36.9, -121.9], [37.05, -122.05]];
        let g = SpatialGraph::new(coords, Units::Latlon, None).unwrap();
        let a = &g.adjacency;
        for i in 0..4 {
            assert_eq!(a[[i, i]], 1.0);
            for j in 0..4 {
                assert_eq!(a[[i, j]], a[[j, i]]);
                assert!((0.0..=1.0).contains(&a[[i, j]]));
            }
        }
        let p = g.eigvecs();
        let ptp = p.t().dot(&p);
        assert!(linalg::max_abs_diff(ptp.view(), Array2::eye(4).view()) < 1e-8);
        let back = reconstruct_dynamic_adjacency(p, g.eigvals().as_slice().unwrap()).unwrap();
        assert!(linalg::max_abs_diff(back.view(), a.view()) < 1e-8);
    }

    #[test]
    fn scaling_examples() {
        assert_eq!(scale_eigenvalues(&[3.0, -1.0], &[0.5, 1.5]).unwrap(), vec![1.5, -1.5]);
        assert_eq!(scale_eigenvalues(&[3.0, -1.0], &[1.0, 1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(matches!(
            scale_eigenvalues(&[3.0, -1.0], &[1.0, -0.1]),
            Err(Error::Constraint(_))
        ));
        assert!(matches!(
            scale_eigenvalues(&[3.0, -1.0], &[0.0, 1.0]),
            Err(Error::Constraint(_))
        ));
        assert!(SpectralScaler::from_alpha(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn doubling_alpha_doubles_adjacency() {
        let coords = vec![[0.0, 0.0], [0.3, 0.1], [0.2, 0.5]];
        let g = SpatialGraph::new(coords, Units::Euclidean, Some(0.4)).unwrap();
        let two = SpectralScaler::from_alpha(&[2.0; 3]).unwrap();
        let abar = g.dynamic_adjacency(&two).unwrap();
        assert!(linalg::max_abs_diff(abar.view(), (&g.adjacency * 2.0).view()) < 1e-8);
        let zero = reconstruct_dynamic_adjacency(g.eigvecs(), &[0.0; 3]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!((softplus(SpectralScaler::identity(1).raw[0]) - 1.0).abs() < 1e-15);
    }
}
