//! Block-partitioned LTI plant `x(t+1) = A x(t) + B u(t) + w(t)` with
//! sparsity tied to the interconnection graph, assumption validation,
//! simulation and empirical cost evaluation.

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{
    compute_delay_matrix, DelayMatrix, DirectedDelayGraph, GraphSpec, InfoGraph, NodeSet,
};

#[derive(Debug, Error)]
pub enum LtiError {
    #[error("partition requires n_i >= m_i >= 1, violated at subsystem {0}")]
    BadPartition(usize),
    #[error("matrix {name} has shape {rows}x{cols}, expected {want_rows}x{want_cols}")]
    ShapeMismatch {
        name: &'static str,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("subset index {0} out of range for partition with {1} blocks")]
    IndexOutOfRange(usize, usize),
    #[error("policy returned an input of dimension {got}, expected {want}")]
    PolicyShapeMismatch { got: usize, want: usize },
    #[error("sigma_w must be nonnegative, got {0}")]
    BadNoise(f64),
}

/// Per-subsystem state and input dimensions with derived offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    state_dims: Vec<usize>,
    input_dims: Vec<usize>,
    state_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    for &d in dims {
        off.push(acc);
        acc += d;
    }
    off.push(acc);
    off
}

impl Partition {
    pub fn new(state_dims: Vec<usize>, input_dims: Vec<usize>) -> Result<Self, LtiError> {
        if state_dims.len() != input_dims.len() || state_dims.is_empty() {
            return Err(LtiError::BadPartition(0));
        }
        for (i, (&n, &m)) in state_dims.iter().zip(&input_dims).enumerate() {
            if m < 1 || n < m {
                return Err(LtiError::BadPartition(i));
            }
        }
        let state_offsets = offsets(&state_dims);
        let input_offsets = offsets(&input_dims);
        Ok(Self {
            state_dims,
            input_dims,
            state_offsets,
            input_offsets,
        })
    }

    /// Uniform partition with `n_i = m_i = 1` for `p` subsystems.
    pub fn scalar(p: usize) -> Self {
        Self::new(vec![1; p], vec![1; p]).unwrap()
    }

    pub fn p(&self) -> usize {
        self.state_dims.len()
    }

    pub fn n(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    pub fn m(&self) -> usize {
        *self.input_offsets.last().unwrap()
    }

    pub fn state_dims(&self) -> &[usize] {
        &self.state_dims
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn state_range(&self, i: usize) -> std::ops::Range<usize> {
        self.state_offsets[i]..self.state_offsets[i + 1]
    }

    pub fn input_range(&self, i: usize) -> std::ops::Range<usize> {
        self.input_offsets[i]..self.input_offsets[i + 1]
    }

    /// Total state dimension of a subset of subsystems.
    pub fn state_dim_of(&self, s: &NodeSet) -> usize {
        s.members().iter().map(|&i| self.state_dims[i]).sum()
    }

    pub fn input_dim_of(&self, s: &NodeSet) -> usize {
        s.members().iter().map(|&i| self.input_dims[i]).sum()
    }

    /// Offset of subsystem `i`'s state block inside the stacked state of
    /// subset `s` (which must contain `i`).
    pub fn state_offset_within(&self, s: &NodeSet, i: usize) -> Option<usize> {
        let pos = s.position(i)?;
        Some(
            s.members()[..pos]
                .iter()
                .map(|&j| self.state_dims[j])
                .sum(),
        )
    }

    pub fn input_offset_within(&self, s: &NodeSet, i: usize) -> Option<usize> {
        let pos = s.position(i)?;
        Some(
            s.members()[..pos]
                .iter()
                .map(|&j| self.input_dims[j])
                .sum(),
        )
    }
}

/// Extracts the block submatrix `M_{row_set, col_set}`: the concatenation of
/// blocks `M_ij` for `i` in `row_set` and `j` in `col_set`, both ascending.
/// `row_dims`/`col_dims` give the per-subsystem block sizes along each axis.
pub fn submatrix(
    m: &DMatrix<f64>,
    row_set: &NodeSet,
    col_set: &NodeSet,
    row_dims: &[usize],
    col_dims: &[usize],
) -> Result<DMatrix<f64>, LtiError> {
    let row_off = offsets(row_dims);
    let col_off = offsets(col_dims);
    if m.nrows() != *row_off.last().unwrap() || m.ncols() != *col_off.last().unwrap() {
        return Err(LtiError::ShapeMismatch {
            name: "submatrix input",
            rows: m.nrows(),
            cols: m.ncols(),
            want_rows: *row_off.last().unwrap(),
            want_cols: *col_off.last().unwrap(),
        });
    }
    for &i in row_set.members() {
        if i >= row_dims.len() {
            return Err(LtiError::IndexOutOfRange(i, row_dims.len()));
        }
    }
    for &j in col_set.members() {
        if j >= col_dims.len() {
            return Err(LtiError::IndexOutOfRange(j, col_dims.len()));
        }
    }
    let out_rows: usize = row_set.members().iter().map(|&i| row_dims[i]).sum();
    let out_cols: usize = col_set.members().iter().map(|&j| col_dims[j]).sum();
    let mut out = DMatrix::zeros(out_rows, out_cols);
    let mut r0 = 0;
    for &i in row_set.members() {
        let mut c0 = 0;
        for &j in col_set.members() {
            out.view_mut((r0, c0), (row_dims[i], col_dims[j]))
                .copy_from(&m.view((row_off[i], col_off[j]), (row_dims[i], col_dims[j])));
            c0 += col_dims[j];
        }
        r0 += row_dims[i];
    }
    Ok(out)
}

/// Block selector `I_{row_set, col_set}`: the corresponding submatrix of the
/// identity, with every subsystem block sized by `dims`.
pub fn selector(row_set: &NodeSet, col_set: &NodeSet, dims: &[usize]) -> DMatrix<f64> {
    let n: usize = dims.iter().sum();
    submatrix(&DMatrix::identity(n, n), row_set, col_set, dims, dims)
        .expect("selector subsets must be in range")
}

/// The plant: block-partitioned matrices plus isotropic noise level.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub partition: Partition,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma_w: f64,
}

impl SystemModel {
    pub fn new(
        partition: Partition,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma_w: f64,
    ) -> Result<Self, LtiError> {
        let (n, m) = (partition.n(), partition.m());
        let check = |name: &'static str, mat: &DMatrix<f64>, rows: usize, cols: usize| {
            if mat.nrows() != rows || mat.ncols() != cols {
                Err(LtiError::ShapeMismatch {
                    name,
                    rows: mat.nrows(),
                    cols: mat.ncols(),
                    want_rows: rows,
                    want_cols: cols,
                })
            } else {
                Ok(())
            }
        };
        check("A", &a, n, n)?;
        check("B", &b, n, m)?;
        check("Q", &q, n, n)?;
        check("R", &r, m, m)?;
        if sigma_w.is_nan() || sigma_w < 0.0 {
            return Err(LtiError::BadNoise(sigma_w));
        }
        Ok(Self {
            partition,
            a,
            b,
            q,
            r,
            sigma_w,
        })
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }
}

/// One closed- or open-loop run: `x` has `T+1` entries, `u` and `w` have `T`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Largest recursion residual `||x(t+1) - A x(t) - B u(t) - w(t)||`.
    pub fn recursion_residual(&self, model: &SystemModel) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.horizon() {
            let pred = &model.a * &self.x[t] + &model.b * &self.u[t] + &self.w[t];
            worst = worst.max((&self.x[t + 1] - pred).norm());
        }
        worst
    }

    /// CSV with columns `t, x1.., u1.., w1..`; the final row carries the
    /// terminal state with empty input and noise cells.
    pub fn to_csv(&self, partition: &Partition) -> String {
        let (n, m) = (partition.n(), partition.m());
        let mut out = String::new();
        out.push('t');
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            out.push_str(&format!(",u{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",w{i}"));
        }
        out.push('\n');
        for t in 0..=self.horizon() {
            out.push_str(&t.to_string());
            for v in self.x[t].iter() {
                out.push_str(&format!(",{v}"));
            }
            if t < self.horizon() {
                for v in self.u[t].iter() {
                    out.push_str(&format!(",{v}"));
                }
                for v in self.w[t].iter() {
                    out.push_str(&format!(",{v}"));
                }
            } else {
                for _ in 0..(n + m) {
                    out.push(',');
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Spectral norm via the largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values()[0]
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    sv[sv.len() - 1]
}

/// Decay certificate `||M^k|| <= kappa * gamma^k` with `gamma = (1+rho)/2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayCertificate {
    pub ok: bool,
    pub rho: f64,
    pub kappa: f64,
    pub gamma: f64,
}

/// Horizon beyond which `gamma^k` drops under 1e-12; powers past it cannot
/// raise the certificate constant.
fn certificate_horizon(gamma: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    ((1e-12f64.ln() / gamma.ln()).ceil() as usize).clamp(1, 200_000)
}

/// Computes `gamma = (1+rho(M))/2` and `kappa = max_k ||M^k|| / gamma^k`
/// over the certificate horizon.  `ok` is false for `rho(M) >= 1`, in which
/// case no certificate exists and `kappa` is left at 1.
pub fn decay_certificate(m: &DMatrix<f64>) -> DecayCertificate {
    let rho = spectral_radius(m);
    let gamma = (1.0 + rho) / 2.0;
    if rho >= 1.0 {
        return DecayCertificate {
            ok: false,
            rho,
            kappa: 1.0,
            gamma,
        };
    }
    let horizon = certificate_horizon(gamma);
    let mut kappa: f64 = 1.0; // k = 0 term
    let mut power = DMatrix::identity(m.nrows(), m.ncols());
    let mut scale = 1.0;
    for _ in 1..=horizon {
        power = &power * m;
        scale *= gamma;
        let norm = spectral_norm(&power);
        if norm == 0.0 {
            break;
        }
        kappa = kappa.max(norm / scale);
    }
    DecayCertificate {
        ok: true,
        rho,
        kappa,
        gamma,
    }
}

/// Verifies `||M^k|| <= kappa * gamma^k` for all `k` up to the horizon.
pub fn verify_decay(m: &DMatrix<f64>, kappa: f64, gamma: f64) -> bool {
    let horizon = certificate_horizon(gamma);
    let mut power = DMatrix::identity(m.nrows(), m.ncols());
    let mut scale = 1.0;
    for _ in 0..=horizon {
        if spectral_norm(&power) > kappa * scale * (1.0 + 1e-9) {
            return false;
        }
        power = &power * m;
        scale *= gamma;
        if scale == 0.0 {
            break;
        }
    }
    true
}

const RANK_TOL: f64 = 1e-9;

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    m.map(|v| Complex::new(v, 0.0))
}

/// Eigenvalue (PBH) test: `(A, B)` is stabilizable iff
/// `rank [A - lambda I, B] = n` for every eigenvalue with `|lambda| >= 1`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let ac = to_complex(a);
    let bc = to_complex(b);
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.norm() < 1.0 - 1e-9 {
            continue;
        }
        let mut test = DMatrix::zeros(n, n + b.ncols());
        let shifted = &ac - DMatrix::identity(n, n).map(|v: f64| Complex::new(v, 0.0)) * *lambda;
        test.view_mut((0, 0), (n, n)).copy_from(&shifted);
        test.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&test) < n {
            return false;
        }
    }
    true
}

/// PBH detectability test for `(A, C)`.
pub fn is_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_stabilizable(&a.transpose(), &c.transpose())
}

/// Symmetric factor `C` with `Q = C^T C`; eigenvalues below 1e-12 clamp to 0.
pub fn symmetric_factor(q: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| if v > 1e-12 { v.sqrt() } else { 0.0 });
    DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Which of the standing assumptions a model satisfies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Block sparsity consistent with one-step information propagation:
    /// every nonzero block (i, j) has `D_ij <= 1`.
    pub a1_ok: bool,
    /// Stabilizable/detectable root subsystems.
    pub a2_ok: bool,
    /// Open-loop decay certificate for `A`.
    pub a3: DecayCertificate,
    /// `sigma_min(R) >= 1` and `sigma_min(Q) >= 1`.
    pub a4_ok: bool,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.a1_ok && self.a2_ok && self.a3.ok && self.a4_ok
    }
}

/// Checks the standing assumptions for a model on a given topology.
pub fn validate_assumptions(
    model: &SystemModel,
    d: &DelayMatrix,
    ig: &InfoGraph,
) -> AssumptionReport {
    let part = &model.partition;
    let p = part.p();

    let mut a1_ok = true;
    'outer: for i in 0..p {
        for j in 0..p {
            let a_blk = model.a.view(
                (part.state_range(i).start, part.state_range(j).start),
                (part.state_dims()[i], part.state_dims()[j]),
            );
            let b_blk = model.b.view(
                (part.state_range(i).start, part.input_range(j).start),
                (part.state_dims()[i], part.input_dims()[j]),
            );
            let nonzero = a_blk.iter().any(|&v| v != 0.0) || b_blk.iter().any(|&v| v != 0.0);
            if nonzero && !matches!(d.get(i, j), Some(delay) if delay <= 1) {
                a1_ok = false;
                break 'outer;
            }
        }
    }

    let mut a2_ok = true;
    for &root in ig.roots() {
        let s = ig.set(root);
        let a_ss = submatrix(&model.a, s, s, part.state_dims(), part.state_dims()).unwrap();
        let b_ss = submatrix(&model.b, s, s, part.state_dims(), part.input_dims()).unwrap();
        let q_ss = submatrix(&model.q, s, s, part.state_dims(), part.state_dims()).unwrap();
        let c_ss = symmetric_factor(&q_ss);
        if !is_stabilizable(&a_ss, &b_ss) || !is_detectable(&a_ss, &c_ss) {
            a2_ok = false;
            break;
        }
    }

    let a3 = decay_certificate(&model.a);
    let a4_ok = smallest_singular_value(&model.r) >= 1.0 - 1e-12
        && smallest_singular_value(&model.q) >= 1.0 - 1e-12;

    AssumptionReport {
        a1_ok,
        a2_ok,
        a3,
        a4_ok,
    }
}

/// Derives a ChaCha stream from a base seed; distinct purposes draw from
/// distinct streams so runs stay reproducible and independent.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG stream ids used across the crate.
pub mod streams {
    /// Plant noise during identification data collection.
    pub const COLLECT_NOISE: u64 = 0;
    /// Exploration inputs during identification.
    pub const COLLECT_INPUT: u64 = 1;
    /// Plant noise during closed-loop evaluation.
    pub const EVAL_NOISE: u64 = 2;
    /// System generation.
    pub const GENERATE: u64 = 3;
}

/// Simulates the plant for `T` steps under a state-feedback callback.
/// `x(0) = 0`; noise is i.i.d. Gaussian with std `sigma_w` per coordinate,
/// drawn from the given stream of the seed, so runs replay bit-identically.
pub fn simulate<F>(
    model: &SystemModel,
    mut policy: F,
    horizon: usize,
    seed: u64,
    noise_stream: u64,
) -> Result<Trajectory, LtiError>
where
    F: FnMut(usize, &DVector<f64>) -> DVector<f64>,
{
    let (n, m) = (model.n(), model.m());
    let mut rng = rng_stream(seed, noise_stream);
    let normal = StandardNormal;
    let mut x = Vec::with_capacity(horizon + 1);
    let mut u = Vec::with_capacity(horizon);
    let mut w = Vec::with_capacity(horizon);
    x.push(DVector::zeros(n));
    for t in 0..horizon {
        let ut = policy(t, &x[t]);
        if ut.len() != m {
            return Err(LtiError::PolicyShapeMismatch { got: ut.len(), want: m });
        }
        let wt = DVector::from_fn(n, |_, _| {
            let g: f64 = normal.sample(&mut rng);
            model.sigma_w * g
        });
        let next = &model.a * &x[t] + &model.b * &ut + &wt;
        x.push(next);
        u.push(ut);
        w.push(wt);
    }
    Ok(Trajectory { x, u, w })
}

/// Time-averaged quadratic cost `(1/T) sum_t x(t)' Q x(t) + u(t)' R u(t)`
/// over `t = 0..T-1`.
pub fn empirical_cost(traj: &Trajectory, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let t_len = traj.horizon();
    if t_len == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 0..t_len {
        acc += (q * &traj.x[t]).dot(&traj.x[t]) + (r * &traj.u[t]).dot(&traj.u[t]);
    }
    acc / t_len as f64
}

/// Samples plant dynamics honoring the graph's sparsity pattern: nonzero
/// blocks (those with `D_ij <= 1`) get i.i.d. standard normal entries, and
/// `A` is rescaled to spectral radius `rho_target` whenever it exceeds it.
pub fn random_dynamics(
    graph: &DirectedDelayGraph,
    partition: &Partition,
    rho_target: f64,
    seed: u64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = compute_delay_matrix(graph);
    let (n, m) = (partition.n(), partition.m());
    let mut rng = rng_stream(seed, streams::GENERATE);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    for i in 0..partition.p() {
        for j in 0..partition.p() {
            if !matches!(d.get(i, j), Some(delay) if delay <= 1) {
                continue;
            }
            for ri in partition.state_range(i) {
                for ci in partition.state_range(j) {
                    a[(ri, ci)] = normal.sample(&mut rng);
                }
            }
            for ri in partition.state_range(i) {
                for ci in partition.input_range(j) {
                    b[(ri, ci)] = normal.sample(&mut rng);
                }
            }
        }
    }
    let rho = spectral_radius(&a);
    if rho > rho_target {
        a *= rho_target / rho;
    }
    (a, b)
}

/// Random plant on the graph with costs `Q = q_scale I`, `R = r_scale I`.
pub fn generate_random_system(
    graph: &DirectedDelayGraph,
    partition: Partition,
    rho_target: f64,
    q_scale: f64,
    r_scale: f64,
    sigma_w: f64,
    seed: u64,
) -> Result<SystemModel, LtiError> {
    let (a, b) = random_dynamics(graph, &partition, rho_target, seed);
    let (n, m) = (partition.n(), partition.m());
    let q = DMatrix::identity(n, n) * q_scale;
    let r = DMatrix::identity(m, m) * r_scale;
    SystemModel::new(partition, a, b, q, r, sigma_w)
}

/// JSON form of a system: the interconnection graph, partition arrays,
/// dense row-major matrices and the noise level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemJson {
    pub graph: GraphSpec,
    pub state_dims: Vec<usize>,
    pub input_dims: Vec<usize>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub sigma_w: f64,
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

impl SystemJson {
    pub fn pack(graph: &DirectedDelayGraph, model: &SystemModel) -> Self {
        Self {
            graph: graph.to_spec(),
            state_dims: model.partition.state_dims().to_vec(),
            input_dims: model.partition.input_dims().to_vec(),
            a: matrix_to_rows(&model.a),
            b: matrix_to_rows(&model.b),
            q: matrix_to_rows(&model.q),
            r: matrix_to_rows(&model.r),
            sigma_w: model.sigma_w,
        }
    }

    pub fn unpack(&self) -> Result<(DirectedDelayGraph, SystemModel), String> {
        let graph = DirectedDelayGraph::from_spec(&self.graph).map_err(|e| e.to_string())?;
        let partition =
            Partition::new(self.state_dims.clone(), self.input_dims.clone()).map_err(|e| e.to_string())?;
        let model = SystemModel::new(
            partition,
            matrix_from_rows(&self.a),
            matrix_from_rows(&self.b),
            matrix_from_rows(&self.q),
            matrix_from_rows(&self.r),
            self.sigma_w,
        )
        .map_err(|e| e.to_string())?;
        Ok((graph, model))
    }
}
