//! Method of moving asymptotes for bound-constrained problems with a few
//! inequality constraints `g_i(x) ≤ 0`.
//!
//! Each update builds the convex separable approximation around the current
//! iterate and solves it with a primal-dual interior point method.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmaParams {
    /// Initial asymptote distance as a fraction of the variable range.
    pub asymptote_init: f64,
    /// Asymptote contraction factor on oscillation.
    pub asymptote_decrease: f64,
    /// Asymptote expansion factor on monotone progress.
    pub asymptote_increase: f64,
    /// Smallest asymptote distance as a fraction of the variable range.
    pub asymptote_min_gap: f64,
    /// Penalty on the constraint relaxation variables.
    pub constraint_penalty: f64,
    /// Largest change of a variable per update, as a fraction of its range.
    pub move_limit: f64,
    pub albefa: f64,
    pub raa0: f64,
}

impl Default for MmaParams {
    fn default() -> Self {
        Self {
            asymptote_init: 0.017,
            asymptote_decrease: 0.55,
            asymptote_increase: 1.05,
            asymptote_min_gap: 1e-4,
            constraint_penalty: 1000.0,
            move_limit: 0.1,
            albefa: 0.1,
            raa0: 1e-5,
        }
    }
}

impl MmaParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("asymptote_init", self.asymptote_init > 0.0),
            ("asymptote_decrease", self.asymptote_decrease > 0.0 && self.asymptote_decrease < 1.0),
            ("asymptote_increase", self.asymptote_increase >= 1.0),
            ("asymptote_min_gap", self.asymptote_min_gap > 0.0 && self.asymptote_min_gap <= self.asymptote_init),
            ("constraint_penalty", self.constraint_penalty > 0.0),
            ("move_limit", self.move_limit > 0.0 && self.move_limit <= 1.0),
            ("albefa", self.albefa > 0.0 && self.albefa < 1.0),
            ("raa0", self.raa0 > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::invalid(format!("MMA parameter {name} out of range")));
            }
        }
        Ok(())
    }
}

/// Iterate history and asymptotes carried between updates.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaState {
    pub params: MmaParams,
    pub lower_bound: Vec<f64>,
    pub upper_bound: Vec<f64>,
    pub xold1: Vec<f64>,
    pub xold2: Vec<f64>,
    pub low: Vec<f64>,
    pub upp: Vec<f64>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmaUpdate {
    pub x: Vec<f64>,
    /// Set when the subproblem solve broke down and the most feasible point
    /// of the move box was taken instead.
    pub fallback: bool,
}

impl MmaState {
    pub fn new(n: usize, lower_bound: f64, upper_bound: f64, params: MmaParams) -> Result<Self> {
        params.validate()?;
        if !(upper_bound > lower_bound) {
            return Err(Error::invalid("MMA bounds must satisfy lower < upper"));
        }
        Ok(Self {
            params,
            lower_bound: vec![lower_bound; n],
            upper_bound: vec![upper_bound; n],
            xold1: Vec::new(),
            xold2: Vec::new(),
            low: vec![0.0; n],
            upp: vec![0.0; n],
            iteration: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.lower_bound.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower_bound.is_empty()
    }

    /// Forgets the iterate history so the next update starts from the
    /// initial asymptotes.
    pub fn reset(&mut self) {
        self.iteration = 0;
        self.xold1.clear();
        self.xold2.clear();
    }

    /// One MMA step from `x` given the objective, its gradient, and the
    /// constraint values and gradients (one row per constraint).
    pub fn update(&mut self, x: &[f64], f0: f64, df0: &[f64], g: &[f64], dg: &[Vec<f64>]) -> Result<MmaUpdate> {
        let n = self.len();
        if x.len() != n || df0.len() != n || dg.len() != g.len() || dg.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("MMA input dimensions are inconsistent"));
        }
        if !f0.is_finite() || df0.iter().chain(g).chain(dg.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("MMA received a non-finite objective or gradient"));
        }
        // A problem without constraints gets an inactive dummy row.
        let (g, dg): (Vec<f64>, Vec<Vec<f64>>) =
            if g.is_empty() { (vec![-1.0], vec![vec![0.0; n]]) } else { (g.to_vec(), dg.to_vec()) };
        let m = g.len();
        let p = self.params;
        self.iteration += 1;

        let range: Vec<f64> = (0..n).map(|j| self.upper_bound[j] - self.lower_bound[j]).collect();
        if self.iteration <= 2 || self.xold2.len() != n {
            for j in 0..n {
                self.low[j] = x[j] - p.asymptote_init * range[j];
                self.upp[j] = x[j] + p.asymptote_init * range[j];
            }
        } else {
            for j in 0..n {
                let trend = (x[j] - self.xold1[j]) * (self.xold1[j] - self.xold2[j]);
                let factor = if trend < 0.0 {
                    p.asymptote_decrease
                } else if trend > 0.0 {
                    p.asymptote_increase
                } else {
                    1.0
                };
                let low = x[j] - factor * (self.xold1[j] - self.low[j]);
                let upp = x[j] + factor * (self.upp[j] - self.xold1[j]);
                let gap = p.asymptote_min_gap * range[j];
                self.low[j] = low.clamp(x[j] - 10.0 * range[j], x[j] - gap);
                self.upp[j] = upp.clamp(x[j] + gap, x[j] + 10.0 * range[j]);
            }
        }

        let mut alfa = vec![0.0; n];
        let mut beta = vec![0.0; n];
        for j in 0..n {
            alfa[j] = (self.low[j] + p.albefa * (x[j] - self.low[j]))
                .max(x[j] - p.move_limit * range[j])
                .max(self.lower_bound[j]);
            beta[j] = (self.upp[j] - p.albefa * (self.upp[j] - x[j]))
                .min(x[j] + p.move_limit * range[j])
                .min(self.upper_bound[j]);
        }

        let mut sub = Subproblem {
            low: self.low.clone(),
            upp: self.upp.clone(),
            alfa,
            beta,
            p0: vec![0.0; n],
            q0: vec![0.0; n],
            pm: DMatrix::zeros(m, n),
            qm: DMatrix::zeros(m, n),
            b: DVector::zeros(m),
            c: DVector::from_element(m, p.constraint_penalty),
        };
        for j in 0..n {
            let ux = self.upp[j] - x[j];
            let xl = x[j] - self.low[j];
            let ux2 = ux * ux;
            let xl2 = xl * xl;
            let reg = p.raa0 / range[j].max(1e-5);
            let (pos, neg) = (df0[j].max(0.0), (-df0[j]).max(0.0));
            let shift = 0.001 * (pos + neg) + reg;
            sub.p0[j] = (pos + shift) * ux2;
            sub.q0[j] = (neg + shift) * xl2;
            for i in 0..m {
                let d = dg[i][j];
                let (pos, neg) = (d.max(0.0), (-d).max(0.0));
                let shift = 0.001 * (pos + neg) + reg;
                sub.pm[(i, j)] = (pos + shift) * ux2;
                sub.qm[(i, j)] = (neg + shift) * xl2;
            }
        }
        for i in 0..m {
            let mut bi = -g[i];
            for j in 0..n {
                bi += sub.pm[(i, j)] / (self.upp[j] - x[j]) + sub.qm[(i, j)] / (x[j] - self.low[j]);
            }
            sub.b[i] = bi;
        }

        let (xnew, fallback) = match sub.solve() {
            Some(xn) if xn.iter().all(|v| v.is_finite()) => (xn, false),
            _ => {
                log::warn!("MMA subproblem failed; taking the most feasible point of the move box");
                let xn = (0..n)
                    .map(|j| {
                        let slope: f64 = dg.iter().map(|r| r[j]).sum();
                        if slope > 0.0 {
                            sub.alfa[j]
                        } else if slope < 0.0 {
                            sub.beta[j]
                        } else {
                            x[j]
                        }
                    })
                    .collect();
                (xn, true)
            }
        };
        let xnew: Vec<f64> = xnew.iter().enumerate().map(|(j, &v)| v.clamp(sub.alfa[j], sub.beta[j])).collect();

        self.xold2 = std::mem::replace(&mut self.xold1, x.to_vec());
        Ok(MmaUpdate { x: xnew, fallback })
    }
}

/// Separable subproblem with `a0 = 1`, `a_i = 0`, `d_i = 1`.
struct Subproblem {
    low: Vec<f64>,
    upp: Vec<f64>,
    alfa: Vec<f64>,
    beta: Vec<f64>,
    p0: Vec<f64>,
    q0: Vec<f64>,
    pm: DMatrix<f64>,
    qm: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
}

#[derive(Clone)]
struct Primal {
    x: Vec<f64>,
    y: DVector<f64>,
    z: f64,
    lam: DVector<f64>,
    xsi: Vec<f64>,
    eta: Vec<f64>,
    mu: DVector<f64>,
    zet: f64,
    s: DVector<f64>,
}

impl Subproblem {
    fn plam_qlam(&self, lam: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = self.p0.len();
        let pl = self.pm.tr_mul(lam);
        let ql = self.qm.tr_mul(lam);
        ((0..n).map(|j| self.p0[j] + pl[j]).collect(), (0..n).map(|j| self.q0[j] + ql[j]).collect())
    }

    fn gvec(&self, x: &[f64]) -> DVector<f64> {
        let n = x.len();
        let ux: DVector<f64> = DVector::from_iterator(n, (0..n).map(|j| 1.0 / (self.upp[j] - x[j])));
        let xl: DVector<f64> = DVector::from_iterator(n, (0..n).map(|j| 1.0 / (x[j] - self.low[j])));
        &self.pm * ux + &self.qm * xl
    }

    fn residual(&self, v: &Primal, epsi: f64) -> Vec<f64> {
        let n = v.x.len();
        let m = v.y.len();
        let (plam, qlam) = self.plam_qlam(&v.lam);
        let gvec = self.gvec(&v.x);
        let mut r = Vec::with_capacity(3 * n + 4 * m + 2);
        for j in 0..n {
            let ux = self.upp[j] - v.x[j];
            let xl = v.x[j] - self.low[j];
            r.push(plam[j] / (ux * ux) - qlam[j] / (xl * xl) - v.xsi[j] + v.eta[j]);
        }
        for i in 0..m {
            r.push(self.c[i] + v.y[i] - v.mu[i] - v.lam[i]);
        }
        r.push(1.0 - v.zet);
        for i in 0..m {
            r.push(gvec[i] - v.y[i] + v.s[i] - self.b[i]);
        }
        for j in 0..n {
            r.push(v.xsi[j] * (v.x[j] - self.alfa[j]) - epsi);
        }
        for j in 0..n {
            r.push(v.eta[j] * (self.beta[j] - v.x[j]) - epsi);
        }
        for i in 0..m {
            r.push(v.mu[i] * v.y[i] - epsi);
        }
        r.push(v.zet * v.z - epsi);
        for i in 0..m {
            r.push(v.lam[i] * v.s[i] - epsi);
        }
        r
    }

    fn solve(&self) -> Option<Vec<f64>> {
        let n = self.p0.len();
        let m = self.b.len();
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let maxabs = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));

        let x: Vec<f64> = (0..n).map(|j| 0.5 * (self.alfa[j] + self.beta[j])).collect();
        let mut v = Primal {
            xsi: (0..n).map(|j| (1.0 / (x[j] - self.alfa[j])).max(1.0)).collect(),
            eta: (0..n).map(|j| (1.0 / (self.beta[j] - x[j])).max(1.0)).collect(),
            x,
            y: DVector::from_element(m, 1.0),
            z: 1.0,
            lam: DVector::from_element(m, 1.0),
            mu: self.c.map(|c| (0.5 * c).max(1.0)),
            zet: 1.0,
            s: DVector::from_element(m, 1.0),
        };

        let mut epsi = 1.0;
        while epsi > 1e-7 {
            let mut res = self.residual(&v, epsi);
            let mut resnorm = norm(&res);
            let mut resmax = maxabs(&res);
            let mut inner = 0;
            while resmax > 0.9 * epsi && inner < 200 {
                inner += 1;
                let (plam, qlam) = self.plam_qlam(&v.lam);
                let gvec = self.gvec(&v.x);
                let mut gg = DMatrix::zeros(m, n);
                let mut delx = vec![0.0; n];
                let mut diagx = vec![0.0; n];
                for j in 0..n {
                    let ux = self.upp[j] - v.x[j];
                    let xl = v.x[j] - self.low[j];
                    let (ux2, xl2) = (ux * ux, xl * xl);
                    for i in 0..m {
                        gg[(i, j)] = self.pm[(i, j)] / ux2 - self.qm[(i, j)] / xl2;
                    }
                    let dxa = v.x[j] - self.alfa[j];
                    let dbx = self.beta[j] - v.x[j];
                    delx[j] = plam[j] / ux2 - qlam[j] / xl2 - epsi / dxa + epsi / dbx;
                    diagx[j] = 2.0 * (plam[j] / (ux2 * ux) + qlam[j] / (xl2 * xl)) + v.xsi[j] / dxa + v.eta[j] / dbx;
                }
                let dely: DVector<f64> =
                    DVector::from_iterator(m, (0..m).map(|i| self.c[i] + v.y[i] - v.lam[i] - epsi / v.y[i]));
                let delz = 1.0 - epsi / v.z;
                let dellam: DVector<f64> =
                    DVector::from_iterator(m, (0..m).map(|i| gvec[i] - v.y[i] - self.b[i] + epsi / v.lam[i]));
                let diagy: DVector<f64> = DVector::from_iterator(m, (0..m).map(|i| 1.0 + v.mu[i] / v.y[i]));
                let diaglamyi: DVector<f64> =
                    DVector::from_iterator(m, (0..m).map(|i| v.s[i] / v.lam[i] + 1.0 / diagy[i]));

                // Reduced (m+1)-system in (Δλ, Δz).
                let dx_over: DVector<f64> = DVector::from_iterator(n, (0..n).map(|j| delx[j] / diagx[j]));
                let blam = &dellam + dely.component_div(&diagy) - &gg * &dx_over;
                let mut aa = DMatrix::zeros(m + 1, m + 1);
                for i in 0..m {
                    for k in 0..m {
                        let mut sum = 0.0;
                        for j in 0..n {
                            sum += gg[(i, j)] * gg[(k, j)] / diagx[j];
                        }
                        aa[(i, k)] = sum;
                    }
                    aa[(i, i)] += diaglamyi[i];
                }
                aa[(m, m)] = -v.zet / v.z;
                let mut bb = DVector::zeros(m + 1);
                bb.rows_mut(0, m).copy_from(&blam);
                bb[m] = delz;
                let sol = aa.lu().solve(&bb)?;
                let dlam = sol.rows(0, m).into_owned();
                let dz = sol[m];
                let gtl = gg.tr_mul(&dlam);
                let dx: Vec<f64> = (0..n).map(|j| -delx[j] / diagx[j] - gtl[j] / diagx[j]).collect();
                let dy: DVector<f64> = DVector::from_iterator(m, (0..m).map(|i| (-dely[i] + dlam[i]) / diagy[i]));
                let dxsi: Vec<f64> = (0..n)
                    .map(|j| {
                        let dxa = v.x[j] - self.alfa[j];
                        -v.xsi[j] + epsi / dxa - v.xsi[j] * dx[j] / dxa
                    })
                    .collect();
                let deta: Vec<f64> = (0..n)
                    .map(|j| {
                        let dbx = self.beta[j] - v.x[j];
                        -v.eta[j] + epsi / dbx + v.eta[j] * dx[j] / dbx
                    })
                    .collect();
                let dmu: DVector<f64> =
                    DVector::from_iterator(m, (0..m).map(|i| -v.mu[i] + epsi / v.y[i] - v.mu[i] * dy[i] / v.y[i]));
                let dzet = -v.zet + epsi / v.z - v.zet * dz / v.z;
                let ds: DVector<f64> =
                    DVector::from_iterator(m, (0..m).map(|i| -v.s[i] + epsi / v.lam[i] - v.s[i] * dlam[i] / v.lam[i]));

                let mut stmx = 1.0f64;
                let mut ratio = |d: f64, val: f64| stmx = stmx.max(-1.01 * d / val);
                for i in 0..m {
                    ratio(dy[i], v.y[i]);
                    ratio(dlam[i], v.lam[i]);
                    ratio(dmu[i], v.mu[i]);
                    ratio(ds[i], v.s[i]);
                }
                ratio(dz, v.z);
                ratio(dzet, v.zet);
                for j in 0..n {
                    ratio(dxsi[j], v.xsi[j]);
                    ratio(deta[j], v.eta[j]);
                    ratio(dx[j], v.x[j] - self.alfa[j]);
                    ratio(-dx[j], self.beta[j] - v.x[j]);
                }
                let mut steg = 1.0 / stmx;

                let old = v.clone();
                let mut tries = 0;
                let mut resnew = 2.0 * resnorm;
                while resnew > resnorm && tries < 50 {
                    tries += 1;
                    v.x = (0..n).map(|j| old.x[j] + steg * dx[j]).collect();
                    v.y = &old.y + &dy * steg;
                    v.z = old.z + steg * dz;
                    v.lam = &old.lam + &dlam * steg;
                    v.xsi = (0..n).map(|j| old.xsi[j] + steg * dxsi[j]).collect();
                    v.eta = (0..n).map(|j| old.eta[j] + steg * deta[j]).collect();
                    v.mu = &old.mu + &dmu * steg;
                    v.zet = old.zet + steg * dzet;
                    v.s = &old.s + &ds * steg;
                    res = self.residual(&v, epsi);
                    resnew = norm(&res);
                    steg *= 0.5;
                }
                resnorm = resnew;
                resmax = maxabs(&res);
            }
            epsi *= 0.1;
        }
        Some(v.x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_point_stays_put() {
        let mut mma = MmaState::new(5, 0.0, 1.0, MmaParams::default()).unwrap();
        let x = vec![0.1, 0.3, 0.5, 0.7, 0.9];
        for _ in 0..3 {
            let up = mma.update(&x, 1.0, &[0.0; 5], &[-0.2], &[vec![1.0; 5]]).unwrap();
            for (a, b) in up.x.iter().zip(&x) {
                // Interior-point centering leaves a residual far below the move box.
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut mma = MmaState::new(1, 0.0, 1.0, MmaParams::default()).unwrap();
        let mut x: Vec<f64> = vec![0.9];
        let mut count = 0;
        while (x[0] - 0.3).abs() >= 1e-4 && count < 50 {
            let f = (x[0] - 0.3).powi(2);
            x = mma.update(&x, f, &[2.0 * (x[0] - 0.3)], &[], &[]).unwrap().x;
            count += 1;
        }
        assert!((x[0] - 0.3).abs() < 1e-4, "x = {} after {count} updates", x[0]);
    }

    #[test]
    fn violated_constraint_reduces_volume() {
        let n = 20;
        let mut mma = MmaState::new(n, 0.0, 1.0, MmaParams::default()).unwrap();
        let x: Vec<f64> = (0..n).map(|j| 0.5 + 0.02 * j as f64).collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        let df0: Vec<f64> = (0..n).map(|j| -0.1 * (j as f64 - 10.0)).collect();
        let up = mma.update(&x, 1.0, &df0, &[mean - 0.3], &[vec![1.0 / n as f64; n]]).unwrap();
        let new_mean = up.x.iter().sum::<f64>() / n as f64;
        assert!(new_mean < mean, "{new_mean} vs {mean}");
        assert!(!up.fallback);
    }

    #[test]
    fn iterates_respect_bounds_and_move_limit() {
        let params = MmaParams { asymptote_init: 0.5, ..Default::default() };
        let mut mma = MmaState::new(3, 0.0, 1.0, params).unwrap();
        let mut x = vec![0.05, 0.5, 0.95];
        for _ in 0..10 {
            let up = mma.update(&x, 1.0, &[1.0, -1.0, -1.0], &[], &[]).unwrap();
            for (a, b) in up.x.iter().zip(&x) {
                assert!((a - b).abs() <= 0.1 + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
            for j in 0..3 {
                assert!(mma.low[j] < x[j] && x[j] < mma.upp[j]);
            }
            x = up.x;
        }
        assert!(x[0] < 1e-6 && x[2] > 1.0 - 1e-6);
    }

    #[test]
    fn constrained_linear_program_reaches_vertex() {
        // Minimize -Σ w_j x_j subject to mean(x) ≤ 0.4: fill the largest weights.
        let n = 10;
        let mut mma = MmaState::new(n, 0.0, 1.0, MmaParams::default()).unwrap();
        let w: Vec<f64> = (0..n).map(|j| 1.0 + j as f64).collect();
        let mut x = vec![0.4; n];
        for _ in 0..300 {
            let g = x.iter().sum::<f64>() / n as f64 - 0.4;
            let df: Vec<f64> = w.iter().map(|wj| -wj / 10.0).collect();
            x = mma.update(&x, 0.0, &df, &[g], &[vec![1.0 / n as f64; n]]).unwrap().x;
        }
        for j in 0..6 {
            assert!(x[j] < 1e-3, "x[{j}] = {}", x[j]);
        }
        for j in 6..n {
            assert!(x[j] > 1.0 - 1e-3, "x[{j}] = {}", x[j]);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut mma = MmaState::new(2, 0.0, 1.0, MmaParams::default()).unwrap();
        assert!(mma.update(&[0.5], 1.0, &[0.0], &[], &[]).is_err());
        assert!(mma.update(&[0.5, 0.5], f64::NAN, &[0.0, 0.0], &[], &[]).is_err());
        assert!(MmaState::new(2, 1.0, 0.0, MmaParams::default()).is_err());
        let bad = MmaParams { move_limit: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
