//! Region-model simulations: error equalization under adversarial region
//! weights, and the imbalance bound on a 2-D Gaussian mixture.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convex region loss `a · ‖m − c‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRegion {
    pub center: Vec<f64>,
    pub curvature: f64,
}

impl QuadraticRegion {
    pub fn loss(&self, m: &[f64]) -> f64 {
        self.curvature * m.iter().zip(&self.center).map(|(x, c)| (x - c).powi(2)).sum::<f64>()
    }

    fn grad_into(&self, m: &[f64], scale: f64, out: &mut [f64]) {
        for ((o, x), c) in out.iter_mut().zip(m).zip(&self.center) {
            *o += scale * 2.0 * self.curvature * (x - c);
        }
    }
}

/// Regions with densities `tau` sharing one model parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGame {
    pub regions: Vec<QuadraticRegion>,
    pub tau: Vec<f64>,
}

impl RegionGame {
    pub fn new(regions: Vec<QuadraticRegion>, tau: Vec<f64>) -> Result<Self> {
        if regions.is_empty() || regions.len() != tau.len() {
            return Err(Error::config("need one density per region and at least one region"));
        }
        let dim = regions[0].center.len();
        if dim == 0 || regions.iter().any(|r| r.center.len() != dim) {
            return Err(Error::config("region centers must share a nonzero dimension"));
        }
        if regions.iter().any(|r| !(r.curvature > 0.0) || r.center.iter().any(|c| !c.is_finite())) {
            return Err(Error::config("region losses must be strictly convex with finite centers"));
        }
        if tau.iter().any(|&t| !(t >= 0.0)) || (tau.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("densities must be nonnegative and sum to 1"));
        }
        Ok(Self { regions, tau })
    }

    /// `k` regions around a perturbed regular simplex in `R^(k-1)` (or `R^1`
    /// for a single region), curvatures in `[0.5, 2]`, random densities.
    pub fn random(k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("need at least one region"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = (k - 1).max(1);
        let jitter = Normal::new(0.0, 0.2).expect("valid sigma");
        let regions = (0..k)
            .map(|i| QuadraticRegion {
                center: (0..dim)
                    .map(|j| 2.0 * helmert(k, j, i) + jitter.sample(&mut rng))
                    .collect(),
                curvature: rng.random_range(0.5..=2.0),
            })
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Self::new(regions, raw.iter().map(|t| t / total).collect())
    }

    pub fn dim(&self) -> usize {
        self.regions[0].center.len()
    }

    pub fn losses(&self, m: &[f64]) -> Vec<f64> {
        self.regions.iter().map(|r| r.loss(m)).collect()
    }

    /// Minimizer of the density-weighted loss, i.e. plain risk minimization.
    pub fn erm_point(&self) -> Vec<f64> {
        self.weighted_center(&self.tau)
    }

    fn weighted_center(&self, q: &[f64]) -> Vec<f64> {
        let norm: f64 = q.iter().zip(&self.regions).map(|(w, r)| w * r.curvature).sum();
        (0..self.dim())
            .map(|j| {
                q.iter()
                    .zip(&self.regions)
                    .map(|(w, r)| w * r.curvature * r.center[j])
                    .sum::<f64>()
                    / norm
            })
            .collect()
    }
}

/// Entry `(j, i)` of the orthonormal Helmert basis of the sum-zero subspace.
fn helmert(k: usize, j: usize, i: usize) -> f64 {
    if k == 1 {
        return 0.0;
    }
    let j1 = (j + 1) as f64;
    let norm = (j1 * (j1 + 1.0)).sqrt();
    if i <= j {
        1.0 / norm
    } else if i == j + 1 {
        -j1 / norm
    } else {
        0.0
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameTrajectory {
    /// Region losses after each alternating step (entry 0 is the start).
    pub losses: Vec<Vec<f64>>,
    /// Adversary weights after each step.
    pub weights: Vec<Vec<f64>>,
    /// Weighted objective before the weight step, after it, and after the model step.
    pub objective: Vec<[f64; 3]>,
    pub model: Vec<f64>,
}

impl GameTrajectory {
    pub fn final_gap(&self) -> f64 {
        let last = self.losses.last().expect("nonempty");
        let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = last.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }
}

fn weighted(q: &[f64], losses: &[f64]) -> f64 {
    q.iter().zip(losses).map(|(w, l)| w * l).sum()
}

/// Alternating play: the adversary takes a projected ascent step on the
/// simplex (starting from the densities), then the model descends the
/// adversary-weighted loss. The model starts at the risk minimizer.
pub fn simulate_prop2(game: &RegionGame, steps: usize, lr: f64) -> Result<GameTrajectory> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config("learning rate must be positive"));
    }
    let mut m = game.erm_point();
    let mut q = game.tau.clone();
    let start = game.losses(&m);
    let limit = 10.0 * start.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut traj = GameTrajectory {
        losses: vec![start],
        weights: vec![q.clone()],
        objective: Vec::with_capacity(steps),
        model: m.clone(),
    };
    let mut grad = vec![0.0; game.dim()];
    for step in 0..steps {
        let losses = game.losses(&m);
        let before = weighted(&q, &losses);
        let ascended: Vec<f64> = q.iter().zip(&losses).map(|(w, l)| w + lr * l).collect();
        q = project_simplex(&ascended);
        let after_w = weighted(&q, &losses);

        grad.iter_mut().for_each(|g| *g = 0.0);
        for (w, r) in q.iter().zip(&game.regions) {
            r.grad_into(&m, *w, &mut grad);
        }
        for (x, g) in m.iter_mut().zip(&grad) {
            *x -= lr * g;
        }
        let losses = game.losses(&m);
        if losses.iter().any(|l| !l.is_finite() || *l > limit) {
            return Err(Error::Numerical(format!("region game diverged at step {step}")));
        }
        traj.objective.push([before, after_w, weighted(&q, &losses)]);
        traj.losses.push(losses);
        traj.weights.push(q.clone());
    }
    traj.model = m;
    Ok(traj)
}

/// Point where every region loss is equal, with the convex multipliers that
/// certify it minimizes the largest region loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equalization {
    pub point: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub loss: f64,
}

/// Solves `L_k(m) = L_1(m)` for all `k` by Newton's method, then recovers
/// multipliers `q` with `Σ q_k ∇L_k(m) = 0`, `Σ q = 1`.
///
/// Needs exactly `dim = K − 1` (or `K = 1`). Errors when Newton fails or the
/// multipliers are not all positive (the minimax point then has inactive regions).
pub fn equalization_point(game: &RegionGame) -> Result<Equalization> {
    let k = game.regions.len();
    let dim = game.dim();
    if k == 1 {
        let point = game.regions[0].center.clone();
        return Ok(Equalization {
            loss: 0.0,
            point,
            multipliers: vec![1.0],
        });
    }
    if dim != k - 1 {
        return Err(Error::config("equalization oracle needs K - 1 dimensions"));
    }
    let mut m = DVector::from_vec(game.erm_point());
    let r0 = &game.regions[0];
    let mut converged = false;
    for _ in 0..200 {
        let x: Vec<f64> = m.iter().copied().collect();
        let l0 = r0.loss(&x);
        let f = DVector::from_fn(dim, |i, _| game.regions[i + 1].loss(&x) - l0);
        let jac = DMatrix::from_fn(dim, dim, |i, j| {
            let r = &game.regions[i + 1];
            2.0 * r.curvature * (x[j] - r.center[j]) - 2.0 * r0.curvature * (x[j] - r0.center[j])
        });
        let delta = jac
            .lu()
            .solve(&f)
            .ok_or_else(|| Error::Numerical("singular equalization Jacobian".into()))?;
        m -= &delta;
        if delta.norm() < 1e-14 * (1.0 + m.norm()) {
            converged = true;
            break;
        }
    }
    let point: Vec<f64> = m.iter().copied().collect();
    let losses = game.losses(&point);
    let spread = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - losses.iter().copied().fold(f64::INFINITY, f64::min);
    if !converged && spread > 1e-10 {
        return Err(Error::Numerical("equalization Newton did not converge".into()));
    }

    // rows: gradient components, last row Σq = 1
    let a = DMatrix::from_fn(k, k, |i, j| {
        if i < dim {
            let r = &game.regions[j];
            2.0 * r.curvature * (point[i] - r.center[i])
        } else {
            1.0
        }
    });
    let mut b = DVector::zeros(k);
    b[k - 1] = 1.0;
    let q = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular multiplier system".into()))?;
    let multipliers: Vec<f64> = q.iter().copied().collect();
    if multipliers.iter().any(|&w| w <= 0.0) {
        return Err(Error::Numerical(format!(
            "equal-loss point is not the minimax point (multipliers {multipliers:?})"
        )));
    }
    Ok(Equalization {
        loss: losses[0],
        point,
        multipliers,
    })
}

/// Draws random games until the minimax point has every region active with
/// multiplier at least `min_multiplier`.
pub fn well_posed_game(k: usize, seed: u64, min_multiplier: f64) -> Result<(RegionGame, Equalization)> {
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let game = RegionGame::random(k, stream.random())?;
        if let Ok(eq) = equalization_point(&game) {
            if eq.multipliers.iter().all(|&w| w >= min_multiplier) {
                return Ok((game, eq));
            }
        }
    }
    Err(Error::Numerical(format!("no well-posed {k}-region game found")))
}

/// Two-class mixture of isotropic 2-D Gaussian regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionModel {
    pub means: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
    /// Whether each region is a majority region.
    pub majority: Vec<bool>,
    pub sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for RegionModel {
    /// Each class owns a majority region near the decision boundary and a
    /// minority region off to the side.
    fn default() -> Self {
        Self {
            means: vec![[-1.5, 0.0], [0.0, 2.0], [1.5, 0.0], [0.0, -2.0]],
            classes: vec![0, 0, 1, 1],
            majority: vec![true, false, true, false],
            sigma: 1.0,
            n_train: 1000,
            n_test: 4000,
        }
    }
}

impl RegionModel {
    /// Region densities when minority regions have `r` times the majority density.
    pub fn densities(&self, r: f64) -> Result<Vec<f64>> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::config(format!("imbalance ratio {r} not in (0, 1]")));
        }
        let raw: Vec<f64> = self.majority.iter().map(|&m| if m { 1.0 } else { r }).collect();
        let total: f64 = raw.iter().sum();
        Ok(raw.iter().map(|x| x / total).collect())
    }

    fn sample(&self, counts: &[usize], rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<usize>) {
        let noise = Normal::new(0.0, self.sigma).expect("positive sigma");
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                xs.push([
                    self.means[k][0] + noise.sample(rng),
                    self.means[k][1] + noise.sample(rng),
                ]);
                ys.push(self.classes[k]);
            }
        }
        (xs, ys)
    }

    fn validate(&self) -> Result<()> {
        let k = self.means.len();
        if k == 0 || self.classes.len() != k || self.majority.len() != k {
            return Err(Error::config("region model fields must have one entry per region"));
        }
        if self.classes.iter().any(|&c| c > 1) {
            return Err(Error::config("region model is binary"));
        }
        if !(self.sigma > 0.0) || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("region model needs sigma > 0 and nonempty samples"));
        }
        Ok(())
    }
}

/// Linear classifier `1[w·x + b ≥ 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub w: [f64; 2],
    pub b: f64,
}

impl LinearClassifier {
    pub fn predict(&self, x: &[f64; 2]) -> usize {
        usize::from(self.w[0] * x[0] + self.w[1] * x[1] + self.b >= 0.0)
    }

    pub fn error(&self, xs: &[[f64; 2]], ys: &[usize]) -> f64 {
        let wrong = xs.iter().zip(ys).filter(|(x, &y)| self.predict(x) != y).count();
        wrong as f64 / xs.len() as f64
    }
}

/// L2-regularized logistic regression fitted by Newton's method.
pub fn fit_logistic(xs: &[[f64; 2]], ys: &[usize], l2: f64) -> Result<LinearClassifier> {
    let mut beta = DVector::<f64>::zeros(3);
    for _ in 0..100 {
        let mut grad = DVector::<f64>::zeros(3);
        let mut hess = DMatrix::<f64>::zeros(3, 3);
        for (x, &y) in xs.iter().zip(ys) {
            let phi = DVector::from_vec(vec![1.0, x[0], x[1]]);
            let p = 1.0 / (1.0 + (-phi.dot(&beta)).exp());
            grad += &phi * (p - y as f64);
            hess += &phi * phi.transpose() * (p * (1.0 - p));
        }
        let n = xs.len() as f64;
        grad /= n;
        hess /= n;
        grad += &beta * l2;
        hess += DMatrix::identity(3, 3) * l2;
        let step = hess
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Numerical("singular logistic Hessian".into()))?;
        beta -= &step;
        if step.norm() < 1e-12 {
            break;
        }
    }
    Ok(LinearClassifier {
        w: [beta[1], beta[2]],
        b: beta[0],
    })
}

/// Grid over the linear hypothesis space used to estimate the optimal joint error.
pub const LAMBDA_GRID_STEP: f64 = 1e-2;
pub const LAMBDA_OFFSET_RANGE: f64 = 5.0;

/// Smallest `ε_a(h) + ε_b(h)` over unit-normal linear classifiers with
/// angles and offsets on a grid of step [`LAMBDA_GRID_STEP`] (offsets within
/// ±[`LAMBDA_OFFSET_RANGE`]).
pub fn joint_error_min(a: (&[[f64; 2]], &[usize]), b: (&[[f64; 2]], &[usize])) -> f64 {
    let n_angles = (std::f64::consts::TAU / LAMBDA_GRID_STEP).ceil() as usize;
    let n_offsets = (2.0 * LAMBDA_OFFSET_RANGE / LAMBDA_GRID_STEP).round() as usize + 1;
    let mut best = f64::INFINITY;
    let mut proj_a: Vec<(f64, usize)> = Vec::with_capacity(a.0.len());
    let mut proj_b: Vec<(f64, usize)> = Vec::with_capacity(b.0.len());
    for t in 0..n_angles {
        let theta = t as f64 * LAMBDA_GRID_STEP;
        let (s, c) = theta.sin_cos();
        let project = |xs: &[[f64; 2]], ys: &[usize], out: &mut Vec<(f64, usize)>| {
            out.clear();
            out.extend(xs.iter().zip(ys).map(|(x, &y)| (c * x[0] + s * x[1], y)));
            out.sort_by(|p, q| p.0.total_cmp(&q.0));
        };
        project(a.0, a.1, &mut proj_a);
        project(b.0, b.1, &mut proj_b);
        let errors_a = sweep_errors(&proj_a, n_offsets);
        let errors_b = sweep_errors(&proj_b, n_offsets);
        for (ea, eb) in errors_a.iter().zip(&errors_b) {
            best = best.min(ea + eb);
        }
    }
    best
}

/// Error of `1[proj ≥ θ]` for every grid threshold `θ`, in grid order.
fn sweep_errors(sorted: &[(f64, usize)], n_offsets: usize) -> Vec<f64> {
    let n = sorted.len() as f64;
    let total_pos = sorted.iter().filter(|p| p.1 == 1).count();
    // below threshold: predicted 0, so positives there are errors
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let total_neg = sorted.len() - total_pos;
    let mut i = 0;
    (0..n_offsets)
        .map(|o| {
            let thr = -LAMBDA_OFFSET_RANGE + o as f64 * LAMBDA_GRID_STEP;
            while i < sorted.len() && sorted[i].0 < thr {
                if sorted[i].1 == 1 {
                    pos_below += 1;
                } else {
                    neg_below += 1;
                }
                i += 1;
            }
            (pos_below + (total_neg - neg_below)) as f64 / n
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub r: f64,
    pub eps_train: f64,
    pub eps_test: f64,
    pub lambda_star: f64,
    pub bound: f64,
}

impl BoundRow {
    pub fn holds(&self) -> bool {
        self.eps_test <= self.bound
    }
}

/// Trains on an `r`-imbalanced sample, tests on a balanced one, and
/// evaluates `ε_train + 2(1/r − 1) + λ̂*` for each ratio.
pub fn simulate_prop1(model: &RegionModel, r_values: &[f64], seed: u64) -> Result<Vec<BoundRow>> {
    model.validate()?;
    let k = model.means.len();
    r_values
        .iter()
        .enumerate()
        .map(|(idx, &r)| {
            let tau = model.densities(r)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            let train_counts: Vec<usize> = tau.iter().map(|t| (t * model.n_train as f64).round() as usize).collect();
            let test_counts = vec![model.n_test / k; k];
            let (xtr, ytr) = model.sample(&train_counts, &mut rng);
            let (xte, yte) = model.sample(&test_counts, &mut rng);
            let h = fit_logistic(&xtr, &ytr, 1e-4)?;
            let eps_train = h.error(&xtr, &ytr);
            let eps_test = h.error(&xte, &yte);
            let lambda_star = joint_error_min((&xtr, &ytr), (&xte, &yte));
            Ok(BoundRow {
                r,
                eps_train,
                eps_test,
                lambda_star,
                bound: eps_train + 2.0 * (1.0 / r - 1.0) + lambda_star,
            })
        })
        .collect()
}
