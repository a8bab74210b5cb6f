//! Truncated Taylor arithmetic for exact derivatives of smooth cutoffs.

/// Taylor coefficients `c_k` of a function at a point, up to a fixed order.
#[derive(Debug, Clone)]
pub(crate) struct Jet(pub(crate) Vec<f64>);

impl Jet {
    pub(crate) fn var(x: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = x;
        if order > 0 {
            c[1] = 1.0;
        }
        Jet(c)
    }

    pub(crate) fn constant(x: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = x;
        Jet(c)
    }

    pub(crate) fn affine(&self, scale: f64, shift: f64) -> Self {
        let mut c: Vec<f64> = self.0.iter().map(|v| v * scale).collect();
        c[0] += shift;
        Jet(c)
    }

    pub(crate) fn add(&self, o: &Jet) -> Self {
        Jet(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }

    pub(crate) fn mul(&self, o: &Jet) -> Self {
        let n = self.0.len();
        let mut c = vec![0.0; n];
        for i in 0..n {
            for j in 0..n - i {
                c[i + j] += self.0[i] * o.0[j];
            }
        }
        Jet(c)
    }

    pub(crate) fn powi(&self, p: u32) -> Self {
        (0..p).fold(Jet::constant(1.0, self.0.len() - 1), |acc, _| acc.mul(self))
    }

    pub(crate) fn exp(&self) -> Self {
        let a = &self.0;
        let mut e = vec![0.0; a.len()];
        e[0] = a[0].exp();
        for k in 1..a.len() {
            e[k] = (1..=k).map(|j| j as f64 * a[j] * e[k - j]).sum::<f64>() / k as f64;
        }
        Jet(e)
    }

    pub(crate) fn recip(&self) -> Self {
        let a = &self.0;
        let mut b = vec![0.0; a.len()];
        b[0] = 1.0 / a[0];
        for k in 1..a.len() {
            b[k] = -(1..=k).map(|j| a[j] * b[k - j]).sum::<f64>() / a[0];
        }
        Jet(b)
    }

    /// `k`-th derivative at the expansion point.
    pub(crate) fn derivative(&self, k: usize) -> f64 {
        self.0[k] * (1..=k).map(|i| i as f64).product::<f64>()
    }
}

/// `exp(-1/t)` for `t > 0`.
pub(crate) fn flat_bump(t: &Jet) -> Jet {
    t.recip().affine(-1.0, 0.0).exp()
}
