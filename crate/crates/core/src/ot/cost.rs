use crate::autodiff::Real;

use super::OtError;

/// Dense row-major squared-distance cost. `scale` is the squared length the
/// raw distances were divided by (1 when not normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub scale: f64,
}

impl CostMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "cost data is not rows x cols");
        CostMatrix { rows, cols, data, scale: 1.0 }
    }
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// `delta(X) = sqrt(d) * max_k std_i(X_ik)` with the population standard
/// deviation. Also returns the coordinate attaining the max.
pub fn cost_scale<S: Real>(points: &[S], dim: usize) -> (S, usize) {
    let n = points.len() / dim;
    let mut best = (S::cst(0.0), 0usize);
    for k in 0..dim {
        let col: Vec<S> = (0..n).map(|i| points[i * dim + k]).collect();
        let mean = S::sum(&col) / n as f64;
        let centered: Vec<S> = col.iter().map(|&x| x - mean).collect();
        let var = S::dot(&centered, &centered) / n as f64;
        if k == 0 || var.value() > best.0.value() {
            best = (var, k);
        }
    }
    let (var, k) = best;
    if var.value() <= 0.0 {
        return (S::cst(0.0), k);
    }
    (var.sqrt() * (dim as f64).sqrt(), k)
}

fn check_points(len: usize, dim: usize) -> Result<usize, OtError> {
    if dim == 0 || len % dim != 0 {
        return Err(OtError::Shape(format!("{len} values do not form points of dimension {dim}")));
    }
    if len == 0 {
        return Err(OtError::Empty);
    }
    Ok(len / dim)
}

/// Squared Euclidean costs `C_ij = |u_i - v_j|^2`, optionally divided by
/// `delta(u)^2` so that epsilon is scale-free. Normalization is skipped when
/// `delta(u) = 0` (all source points identical).
pub fn cost_matrix(source: &[f64], target: &[f64], dim: usize, normalize: bool) -> Result<CostMatrix, OtError> {
    let (data, scale) = cost_matrix_real(source, target, dim, normalize)?;
    let n = source.len() / dim;
    Ok(CostMatrix { rows: n, cols: target.len() / dim, data, scale: scale.value() })
}

/// Differentiable form of [`cost_matrix`]; returns the entries and the
/// squared scale they were divided by.
pub fn cost_matrix_real<S: Real>(source: &[S], target: &[S], dim: usize, normalize: bool) -> Result<(Vec<S>, S), OtError> {
    let n = check_points(source.len(), dim)?;
    let m = check_points(target.len(), dim)?;
    let mut scale = S::cst(1.0);
    if normalize {
        let (delta, _) = cost_scale(source, dim);
        let d2 = delta.square();
        if d2.value() > 0.0 && (1.0 / d2.value()).is_finite() {
            scale = d2;
        }
    }
    let inv = S::cst(1.0) / scale;
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let u = &source[i * dim..(i + 1) * dim];
        for j in 0..m {
            let d = S::sq_dist(u, &target[j * dim..(j + 1) * dim]);
            data.push(if normalize { d * inv } else { d });
        }
    }
    Ok((data, scale))
}
