//! PCA selection of a small Gaussian basis from a sampled kernel bank, and
//! the attention weights that fuse it.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    kernel_inner_product, make_gaussian_kernel, Covariance2, KernelBank, KernelSpec, SIGMA_FLOOR,
};

/// Components whose eigenvalue is below this fraction of the largest
/// component energy are discarded.
pub const EIGEN_TOL_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankBasis {
    /// Half-width of the bank grids the components live on.
    pub radius: usize,
    /// Whether component 0 is the bank mean rather than an eigenvector.
    pub has_mean_component: bool,
    /// Flattened component grids, mean first when present.
    pub grids: Vec<Vec<f64>>,
    /// Eigenvalues of the eigenvector components, descending.
    pub eigenvalues: Vec<f64>,
    /// Moment-matched covariance of every component.
    pub covariances: Vec<Covariance2>,
    pub logits: Vec<f64>,
    pub fused_weights: Vec<f64>,
}

impl LowRankBasis {
    /// Number of retained components.
    pub fn k(&self) -> usize {
        self.covariances.len()
    }

    /// Builds a basis directly from covariances, bypassing PCA.
    pub fn from_covariances(radius: usize, covariances: Vec<Covariance2>) -> Result<Self> {
        if covariances.is_empty() {
            return Err(Error::InvalidArgument("basis needs at least one covariance".into()));
        }
        let mut grids = Vec::with_capacity(covariances.len());
        for cov in &covariances {
            grids.push(make_gaussian_kernel(&KernelSpec::centered(*cov, radius.max(1)))?.into_weights());
        }
        let k = covariances.len();
        Ok(Self {
            radius,
            has_mean_component: false,
            grids,
            eigenvalues: Vec::new(),
            covariances,
            logits: vec![0.0; k],
            fused_weights: vec![1.0 / k as f64; k],
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BasisRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: BasisRecord = serde_json::from_str(text)?;
        let mut basis = Self::from_covariances(rec.radius, rec.covariances)?;
        if rec.logits.len() != basis.k() {
            return Err(Error::Format("logit count differs from covariance count".into()));
        }
        basis.eigenvalues = rec.eigenvalues;
        basis.fused_weights = softmax_normalize(&rec.logits)?;
        basis.logits = rec.logits;
        Ok(basis)
    }
}

/// On-disk form of a basis; grids are regenerated from the covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisRecord {
    radius: usize,
    eigenvalues: Vec<f64>,
    covariances: Vec<Covariance2>,
    logits: Vec<f64>,
}

impl From<&LowRankBasis> for BasisRecord {
    fn from(b: &LowRankBasis) -> Self {
        Self {
            radius: b.radius,
            eigenvalues: b.eigenvalues.clone(),
            covariances: b.covariances.clone(),
            logits: b.logits.clone(),
        }
    }
}

/// Fits an axis-aligned Gaussian to a grid by matching the second moments of
/// its absolute weights.
pub fn moment_match(grid: &[f64], radius: usize) -> Result<Covariance2> {
    let side = 2 * radius + 1;
    if grid.len() != side * side {
        return Err(Error::Shape(format!(
            "grid of {} weights is not {side}×{side}",
            grid.len()
        )));
    }
    let (mut mass, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for i in 0..side {
        let d0 = i as f64 - radius as f64;
        for j in 0..side {
            let d1 = j as f64 - radius as f64;
            let w = grid[i * side + j].abs();
            mass += w;
            m0 += w * d0 * d0;
            m1 += w * d1 * d1;
        }
    }
    let floor = SIGMA_FLOOR * SIGMA_FLOOR;
    if mass <= 0.0 {
        return Covariance2::new(floor, floor, 0.0);
    }
    Covariance2::new((m0 / mass).max(floor), (m1 / mass).max(floor), 0.0)
}

/// Selects at most `k_max` components from the bank.
///
/// The bank mean is component 0 whenever its norm is non-negligible; the
/// remaining slots go to the leading eigenvectors of the sample covariance of
/// the flattened, centered kernels. Eigenvectors are sign-normalized so that
/// their largest-magnitude entry is positive.
pub fn pca_select(bank: &KernelBank, k_max: usize) -> Result<LowRankBasis> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be positive".into()));
    }
    if bank.len() < k_max {
        return Err(Error::InvalidArgument(format!(
            "bank of {} kernels cannot supply {k_max} components",
            bank.len()
        )));
    }
    let radius = bank.radius();
    let dim = (2 * radius + 1).pow(2);
    let n = bank.len();

    let mut mean = vec![0.0; dim];
    for k in bank.kernels() {
        for (m, w) in mean.iter_mut().zip(k.weights()) {
            *m += w;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mean_energy: f64 = mean.iter().map(|m| m * m).sum();

    let mut centered = DMatrix::<f64>::zeros(n, dim);
    for (r, k) in bank.kernels().iter().enumerate() {
        for (c, (w, m)) in k.weights().iter().zip(&mean).enumerate() {
            centered[(r, c)] = w - m;
        }
    }
    let cov = if n > 1 {
        centered.tr_mul(&centered) / (n - 1) as f64
    } else {
        DMatrix::zeros(dim, dim)
    };
    let (eigenvalues, vectors) = symmetric_eigen_sorted(cov);

    let scale = eigenvalues.first().copied().unwrap_or(0.0).max(mean_energy);
    let tol = EIGEN_TOL_REL * scale;
    let use_mean = mean_energy.sqrt() > tol;

    let mut grids = Vec::new();
    let mut kept = Vec::new();
    if use_mean {
        grids.push(mean);
    }
    for (lambda, v) in eigenvalues.into_iter().zip(vectors) {
        if grids.len() >= k_max || lambda <= tol {
            break;
        }
        grids.push(v);
        kept.push(lambda);
    }
    if grids.is_empty() {
        return Err(Error::InvalidArgument("bank has no non-negligible component".into()));
    }

    let covariances = grids
        .iter()
        .map(|g| moment_match(g, radius))
        .collect::<Result<Vec<_>>>()?;
    let k = grids.len();
    Ok(LowRankBasis {
        radius,
        has_mean_component: use_mean,
        grids,
        eigenvalues: kept,
        covariances,
        logits: vec![0.0; k],
        fused_weights: vec![1.0 / k as f64; k],
    })
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending, vectors as
/// sign-normalized columns.
fn symmetric_eigen_sorted(m: DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..dim)
        .map(|i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            normalize_sign(&mut v);
            (eig.eigenvalues[i], v)
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| argmax_abs(&a.1).cmp(&argmax_abs(&b.1)))
    });
    pairs.into_iter().unzip()
}

fn argmax_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

fn normalize_sign(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    if v[argmax_abs(v)] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Sets `logits[k] = <G(Σ_k), G(I)>` on a grid of half-width `grid_radius`
/// and refreshes the fused weights.
pub fn init_weights(basis: &LowRankBasis, grid_radius: usize) -> Result<LowRankBasis> {
    if basis.k() == 0 {
        return Err(Error::InvalidArgument("basis is empty".into()));
    }
    let identity = make_gaussian_kernel(&KernelSpec::centered(
        Covariance2::isotropic(1.0)?,
        grid_radius,
    ))?;
    let logits = basis
        .covariances
        .iter()
        .map(|cov| {
            let g = make_gaussian_kernel(&KernelSpec::centered(*cov, grid_radius))?;
            kernel_inner_product(&g, &identity)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = basis.clone();
    out.fused_weights = softmax_normalize(&logits)?;
    out.logits = logits;
    Ok(out)
}

/// Max-shifted softmax.
pub fn softmax_normalize(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if !logits.iter().all(|w| w.is_finite()) {
        return Err(Error::InvalidArgument("softmax input is not finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}
