/// Natural cubic spline through `(x_j, y_j)` with strictly increasing `x`.
pub(crate) struct NaturalSpline<'a> {
    x: &'a [f64],
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl<'a> NaturalSpline<'a> {
    pub fn new(x: &'a [f64], y: Vec<f64>) -> Self {
        let n = x.len();
        assert_eq!(n, y.len());
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for the interior second derivatives (Thomas algorithm).
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        NaturalSpline { x, y, m }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let x = self.x;
        let n = x.len();
        if n == 1 {
            return self.y[0];
        }
        let j = match x.partition_point(|&xi| xi <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = x[j + 1] - x[j];
        let a = (x[j + 1] - t) / h;
        let b = (t - x[j]) / h;
        a * self.y[j]
            + b * self.y[j + 1]
            + ((a * a * a - a) * self.m[j] + (b * b * b - b) * self.m[j + 1]) * h * h / 6.0
    }
}

pub(crate) fn linear_interp(x: &[f64], y: &[f64], t: f64) -> f64 {
    let n = x.len();
    if n == 1 {
        return y[0];
    }
    let j = match x.partition_point(|&xi| xi <= t) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let w = (t - x[j]) / (x[j + 1] - x[j]);
    y[j] + w * (y[j + 1] - y[j])
}
