use nalgebra::{DMatrix, DVector};

/// Tensor-product quadrature rule on [-1, 1]^k.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    /// M x k, one node per row.
    pub nodes: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn k(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, g: F) -> f64 {
        let k = self.k();
        let mut x = vec![0.0; k];
        (0..self.len())
            .map(|m| {
                for (j, xj) in x.iter_mut().enumerate() {
                    *xj = self.nodes[(m, j)];
                }
                self.weights[m] * g(&x)
            })
            .sum()
    }
}

/// Nodes (ascending) and weights of the m-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre_1d(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let mf = m as f64;
    for i in 0..m.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (mf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            // three-term recurrence for P_m(x) and P_{m-1}(x)
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=m {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            let (pm, pm1) = if m == 1 { (x, 1.0) } else { (p1, p0) };
            dp = mf * (x * pm - pm1) / (x * x - 1.0);
            let dx = pm / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        if m == 1 {
            x = 0.0;
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    (nodes, weights)
}

/// Tensor product of `m_per_dim`-point rules; M = m_per_dim^k nodes with the
/// last coordinate varying fastest.
pub fn gauss_legendre_grid(k: usize, m_per_dim: usize) -> QuadratureGrid {
    let (x1, w1) = gauss_legendre_1d(m_per_dim);
    let total = m_per_dim.pow(k as u32);
    let mut nodes = DMatrix::zeros(total, k);
    let mut weights = DVector::zeros(total);
    for m in 0..total {
        let mut rest = m;
        let mut w = 1.0;
        for j in (0..k).rev() {
            let idx = rest % m_per_dim;
            rest /= m_per_dim;
            nodes[(m, j)] = x1[idx];
            w *= w1[idx];
        }
        weights[m] = w;
    }
    QuadratureGrid { nodes, weights }
}
