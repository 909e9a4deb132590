//! Gauss–Hermite quadrature rules.

/// Nodes and weights for `∫ e^{-x²} f(x) dx`, plus the rescaled rule for
/// expectations under a standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// `√2 · nodes`: evaluation points for `E[f(Z)]`, `Z ~ N(0,1)`.
    pub normal_nodes: Vec<f64>,
    /// `weights / √π`; sums to one.
    pub normal_weights: Vec<f64>,
}

impl GaussHermite {
    /// Rule of the given order, computed by Newton iteration on the
    /// orthonormal Hermite recurrence.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let nf = n as f64;
        let mut z: f64 = 0.0;
        for i in 0..n.div_ceil(2) {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[n / 2] = 0.0;
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let normal_nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let normal_weights = w.iter().map(|v| v / sqrt_pi).collect();
        Self { nodes: x, weights: w, normal_nodes, normal_weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[f(μ + σ Z)]` for `Z ~ N(0,1)`.
    pub fn normal_expectation<F: Fn(f64) -> f64>(&self, mu: f64, sigma: f64, f: F) -> f64 {
        self.normal_nodes
            .iter()
            .zip(&self.normal_weights)
            .map(|(z, w)| w * f(mu + sigma * z))
            .sum()
    }
}
