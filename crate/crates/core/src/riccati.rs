//! Gain and cost synthesis over the information graph: a fixed-point Riccati
//! solve at each self-loop root, then a single downward pass through each
//! tree, for the true model, an estimated model, or the mixed recursion that
//! prices estimated gains on the true plant.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::lti::{spectral_radius, submatrix, Partition};
use crate::topology::{InfoGraph, NodeIdx};

#[derive(Debug, Error)]
pub enum RiccatiError {
    #[error("Riccati iteration did not converge within {max_iter} iterations at node {node}")]
    NoConvergence { node: String, max_iter: usize },
    #[error("mixed closed loop unstable at root {node}: spectral radius {rho}")]
    UnstableMixedLoop { node: String, rho: f64 },
    #[error(transparent)]
    Lti(#[from] crate::lti::LtiError),
}

/// Which model produced a gain set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    TrueModel,
    Estimate,
    MixedTilde,
}

/// Per-node gain and cost-to-go pairs `(K_r, P_r)` indexed like the
/// information graph's node list.
#[derive(Debug, Clone)]
pub struct GainSet {
    pub provenance: Provenance,
    pub k: Vec<DMatrix<f64>>,
    pub p: Vec<DMatrix<f64>>,
}

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// One step of the gain/cost recursion given the parent's cost-to-go:
/// `K = -(R + B' P B)^-1 B' P A`, `P' = Q + K' R K + (A + B K)' P (A + B K)`.
fn recursion_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p_parent: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let btp = b.transpose() * p_parent;
    let mut gram = r + &btp * b;
    symmetrize(&mut gram);
    let rhs = &btp * a;
    let k = match gram.clone().cholesky() {
        Some(chol) => -chol.solve(&rhs),
        // R > 0 makes the Gram matrix positive definite; fall back to LU if
        // rounding spoils the factorization.
        None => {
            -(gram
                .lu()
                .solve(&rhs)
                .expect("R + B'PB must be invertible"))
        }
    };
    let closed = a + b * &k;
    let mut p = q + k.transpose() * r * &k + closed.transpose() * p_parent * closed;
    symmetrize(&mut p);
    (k, p)
}

/// Solves the root Riccati equation by value iteration from `P = Q`,
/// symmetrizing each iterate, until the relative Frobenius update drops
/// below `tol`.  Returns the fixed point and its gain.
pub fn solve_root_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), RiccatiError> {
    let mut p = q.clone();
    symmetrize(&mut p);
    for _ in 0..max_iter {
        let (k, p_next) = recursion_step(a, b, q, r, &p);
        let delta = (&p_next - &p).norm();
        let done = delta <= tol * (1.0 + p.norm());
        p = p_next;
        if done {
            return Ok((p, k));
        }
        if !p.norm().is_finite() || p.norm() > 1e100 {
            break;
        }
    }
    Err(RiccatiError::NoConvergence {
        node: "root".into(),
        max_iter,
    })
}

/// Runs the full gain recursion over the information graph: solve the
/// Riccati fixed point at each self-loop root, then fill every non-root
/// node in one pass down its tree using the unique parent's `P`.
///
/// `a` and `b` may be the true or the estimated system matrices; `q` and
/// `r` are always the true cost matrices.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_gains(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ig: &InfoGraph,
    partition: &Partition,
    tol: f64,
    provenance: Provenance,
) -> Result<GainSet, RiccatiError> {
    let nd = partition.state_dims();
    let md = partition.input_dims();
    let mut ks: Vec<Option<DMatrix<f64>>> = vec![None; ig.len()];
    let mut ps: Vec<Option<DMatrix<f64>>> = vec![None; ig.len()];

    for &root in ig.roots() {
        let s = ig.set(root);
        let a_ss = submatrix(a, s, s, nd, nd)?;
        let b_ss = submatrix(b, s, s, nd, md)?;
        let q_ss = submatrix(q, s, s, nd, nd)?;
        let r_ss = submatrix(r, s, s, md, md)?;
        let (p, k) =
            solve_root_dare(&a_ss, &b_ss, &q_ss, &r_ss, tol, DEFAULT_MAX_ITER).map_err(|e| {
                match e {
                    RiccatiError::NoConvergence { max_iter, .. } => RiccatiError::NoConvergence {
                        node: ig.set(root).to_string(),
                        max_iter,
                    },
                    other => other,
                }
            })?;
        ks[root] = Some(k);
        ps[root] = Some(p);
        // walk the tree from the root; children lists are in canonical order
        let mut stack: Vec<NodeIdx> = ig.children(root).to_vec();
        while let Some(node) = stack.pop() {
            let parent = ig.parent(node);
            let p_parent = ps[parent].as_ref().expect("parent processed first");
            let rs = ig.set(node);
            let ss = ig.set(parent);
            let a_sr = submatrix(a, ss, rs, nd, nd)?;
            let b_sr = submatrix(b, ss, rs, nd, md)?;
            let q_rr = submatrix(q, rs, rs, nd, nd)?;
            let r_rr = submatrix(r, rs, rs, md, md)?;
            let (k, p) = recursion_step(&a_sr, &b_sr, &q_rr, &r_rr, p_parent);
            ks[node] = Some(k);
            ps[node] = Some(p);
            stack.extend_from_slice(ig.children(node));
        }
    }

    Ok(GainSet {
        provenance,
        k: ks.into_iter().map(|k| k.expect("all nodes reached")).collect(),
        p: ps.into_iter().map(|p| p.expect("all nodes reached")).collect(),
    })
}

/// Closed-form optimal cost: `sigma_w^2` times the sum over agents of the
/// trace of their diagonal block of `P` at the leaf their noise drives.
pub fn optimal_cost(gains: &GainSet, ig: &InfoGraph, partition: &Partition, sigma_w: f64) -> f64 {
    cost_from_leaf_p(&gains.p, ig, partition, sigma_w)
}

fn cost_from_leaf_p(
    ps: &[DMatrix<f64>],
    ig: &InfoGraph,
    partition: &Partition,
    sigma_w: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..partition.p() {
        let leaf = ig.origin(i);
        let set = ig.set(leaf);
        let off = partition
            .state_offset_within(set, i)
            .expect("agent belongs to its own leaf");
        let ni = partition.state_dims()[i];
        let block = ps[leaf].view((off, off), (ni, ni));
        total += block.trace();
    }
    sigma_w * sigma_w * total
}

/// Solves the mixed recursion: estimated gains priced on the true plant.
/// At each root the fixed point of
/// `P~ = Q + K^' R K^ + (A + B K^)' P~ (A + B K^)`
/// is a Lyapunov equation solved by iteration; non-roots follow in one
/// downward pass.  Returns the `P~` map and the cost it implies.
#[allow(clippy::too_many_arguments)]
pub fn tilde_p_and_cost(
    gains_hat: &GainSet,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    ig: &InfoGraph,
    partition: &Partition,
    sigma_w: f64,
    tol: f64,
) -> Result<(Vec<DMatrix<f64>>, f64), RiccatiError> {
    let nd = partition.state_dims();
    let md = partition.input_dims();
    let mut ps: Vec<Option<DMatrix<f64>>> = vec![None; ig.len()];

    for &root in ig.roots() {
        let s = ig.set(root);
        let a_ss = submatrix(a, s, s, nd, nd)?;
        let b_ss = submatrix(b, s, s, nd, md)?;
        let q_ss = submatrix(q, s, s, nd, nd)?;
        let r_ss = submatrix(r, s, s, md, md)?;
        let k_hat = &gains_hat.k[root];
        let closed = &a_ss + &b_ss * k_hat;
        let rho = spectral_radius(&closed);
        if rho >= 1.0 {
            return Err(RiccatiError::UnstableMixedLoop {
                node: ig.set(root).to_string(),
                rho,
            });
        }
        let mut cost_term = q_ss + k_hat.transpose() * &r_ss * k_hat;
        symmetrize(&mut cost_term);
        let mut p = cost_term.clone();
        let mut converged = false;
        for _ in 0..DEFAULT_MAX_ITER {
            let mut next = &cost_term + closed.transpose() * &p * &closed;
            symmetrize(&mut next);
            let delta = (&next - &p).norm();
            let done = delta <= tol * (1.0 + p.norm());
            p = next;
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(RiccatiError::NoConvergence {
                node: ig.set(root).to_string(),
                max_iter: DEFAULT_MAX_ITER,
            });
        }
        ps[root] = Some(p);
        let mut stack: Vec<NodeIdx> = ig.children(root).to_vec();
        while let Some(node) = stack.pop() {
            let parent = ig.parent(node);
            let p_parent = ps[parent].as_ref().unwrap();
            let rs = ig.set(node);
            let ss = ig.set(parent);
            let a_sr = submatrix(a, ss, rs, nd, nd)?;
            let b_sr = submatrix(b, ss, rs, nd, md)?;
            let q_rr = submatrix(q, rs, rs, nd, nd)?;
            let r_rr = submatrix(r, rs, rs, md, md)?;
            let k_hat = &gains_hat.k[node];
            let closed = &a_sr + &b_sr * k_hat;
            let mut p = q_rr + k_hat.transpose() * r_rr * k_hat
                + closed.transpose() * p_parent * closed;
            symmetrize(&mut p);
            ps[node] = Some(p);
            stack.extend_from_slice(ig.children(node));
        }
    }

    let ps: Vec<DMatrix<f64>> = ps.into_iter().map(|p| p.unwrap()).collect();
    let cost = cost_from_leaf_p(&ps, ig, partition, sigma_w);
    Ok((ps, cost))
}

/// JSON export of a gain set: per node its 1-based subset and the dense
/// `K`/`P` matrices.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GainSetJson {
    pub provenance: String,
    pub nodes: Vec<GainNodeJson>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GainNodeJson {
    pub subset: Vec<usize>,
    pub k: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
}

impl GainSet {
    pub fn to_json(&self, ig: &InfoGraph) -> GainSetJson {
        GainSetJson {
            provenance: match self.provenance {
                Provenance::TrueModel => "true-model",
                Provenance::Estimate => "estimate",
                Provenance::MixedTilde => "mixed-tilde",
            }
            .to_string(),
            nodes: (0..ig.len())
                .map(|v| GainNodeJson {
                    subset: ig.set(v).to_one_based(),
                    k: crate::lti::matrix_to_rows(&self.k[v]),
                    p: crate::lti::matrix_to_rows(&self.p[v]),
                })
                .collect(),
        }
    }
}

/// Residual of the defining recursion at a node given its parent's `P`;
/// roots pass their own `P` as the parent.
#[allow(clippy::too_many_arguments)]
pub fn dare_residual(
    a_sr: &DMatrix<f64>,
    b_sr: &DMatrix<f64>,
    q_rr: &DMatrix<f64>,
    r_rr: &DMatrix<f64>,
    p_parent: &DMatrix<f64>,
    k: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let closed = a_sr + b_sr * k;
    let rebuilt = q_rr + k.transpose() * r_rr * k + closed.transpose() * p_parent * closed;
    (rebuilt - p).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{generate_random_system, Partition};
    use crate::topology::{build_information_graph, compute_delay_matrix, DirectedDelayGraph, Edge};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    /// Positive root of the scalar Riccati equation
    /// `p^2 + p (r - a^2 r - q) - q r = 0` (for b = 1) generalized to any b.
    fn scalar_dare(a: f64, b: f64, q: f64, r: f64) -> (f64, f64) {
        // p = q + a^2 p r / (r + b^2 p)  =>  b^2 p^2 + (r - q b^2 - a^2 r) p - q r = 0
        let aa = b * b;
        let bb = r - q * b * b - a * a * r;
        let cc = -q * r;
        let p = (-bb + (bb * bb - 4.0 * aa * cc).sqrt()) / (2.0 * aa);
        let k = -(a * b * p) / (r + b * b * p);
        (p, k)
    }

    #[test]
    fn scalar_root_dare() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let (p, k) = solve_root_dare(&a, &b, &q, &r, 1e-14, 100_000).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.1327822, epsilon = 1e-6);
        assert_relative_eq!(k[(0, 0)], -0.2655644, epsilon = 1e-6);
        let (po, ko) = scalar_dare(0.5, 1.0, 1.0, 1.0);
        assert_relative_eq!(p[(0, 0)], po, epsilon = 1e-10);
        assert_relative_eq!(k[(0, 0)], ko, epsilon = 1e-10);
        assert_relative_eq!(
            dare_residual(&a, &b, &q, &r, &p, &k, &p),
            0.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn zero_b_reduces_to_lyapunov() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::zeros(2, 2);
        let q0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 4.0]));
        let r = DMatrix::identity(2, 2);
        let (p, k) = solve_root_dare(&a, &b, &q0, &r, 1e-14, 1000).unwrap();
        assert_relative_eq!((p - q0).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(k.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn decoupled_dare_matches_scalar_oracle() {
        let a = DMatrix::identity(2, 2) * 0.9;
        let b = DMatrix::identity(2, 2);
        let q = DMatrix::identity(2, 2) * 2.0;
        let r = DMatrix::identity(2, 2) * 5.0;
        let (p, k) = solve_root_dare(&a, &b, &q, &r, 1e-14, 1_000_000).unwrap();
        let (ps, ks) = scalar_dare(0.9, 1.0, 2.0, 5.0);
        for i in 0..2 {
            assert_relative_eq!(p[(i, i)], ps, epsilon = 1e-8);
            assert_relative_eq!(k[(i, i)], ks, epsilon = 1e-8);
        }
        assert_relative_eq!(p[(0, 1)], 0.0, epsilon = 1e-10);
        assert_relative_eq!(k[(0, 1)], 0.0, epsilon = 1e-10);
    }

    fn example_setup() -> (
        DirectedDelayGraph,
        crate::topology::DelayMatrix,
        crate::topology::InfoGraph,
    ) {
        let g = DirectedDelayGraph::new(
            3,
            vec![
                Edge { from: 1, to: 0, delay: 0 },
                Edge { from: 1, to: 2, delay: 1 },
                Edge { from: 2, to: 1, delay: 1 },
            ],
        )
        .unwrap();
        let d = compute_delay_matrix(&g);
        let ig = build_information_graph(&d);
        (g, d, ig)
    }

    #[test]
    fn synthesize_over_example_graph() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 5).unwrap();
        let gains = synthesize_gains(
            &model.a,
            &model.b,
            &model.q,
            &model.r,
            &ig,
            &part,
            DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        assert_eq!(gains.k.len(), 4);
        // every root closed loop stable, every P symmetric PSD with P >= Q_rr >= I
        for v in 0..ig.len() {
            let p = &gains.p[v];
            assert!((p - p.transpose()).norm() <= 1e-10 * p.norm().max(1.0));
            let eig = p.clone().symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&e| e >= 1.0 - 1e-9), "P not >= I at node {v}");
        }
        for &root in ig.roots() {
            let s = ig.set(root);
            let a_ss = submatrix(&model.a, s, s, part.state_dims(), part.state_dims()).unwrap();
            let b_ss = submatrix(&model.b, s, s, part.state_dims(), part.input_dims()).unwrap();
            let closed = &a_ss + &b_ss * &gains.k[root];
            assert!(spectral_radius(&closed) < 1.0);
        }
        // shapes: K_r is m_r x n_r
        for v in 0..ig.len() {
            let set = ig.set(v);
            assert_eq!(gains.k[v].nrows(), part.input_dim_of(set));
            assert_eq!(gains.k[v].ncols(), part.state_dim_of(set));
        }
    }

    #[test]
    fn estimate_equals_truth_when_inputs_equal() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 6).unwrap();
        let truth = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let est = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::Estimate,
        )
        .unwrap();
        for v in 0..ig.len() {
            assert_eq!(truth.k[v], est.k[v]);
            assert_eq!(truth.p[v], est.p[v]);
        }
    }

    #[test]
    fn synthesis_continuous_in_model() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 8).unwrap();
        let truth = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let eps = 1e-8;
        let a_pert = &model.a + DMatrix::from_element(3, 3, eps);
        let b_pert = &model.b + DMatrix::from_element(3, 3, eps);
        let est = synthesize_gains(
            &a_pert, &b_pert, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::Estimate,
        )
        .unwrap();
        for v in 0..ig.len() {
            assert!((&truth.k[v] - &est.k[v]).norm() <= 1e-5);
        }
    }

    #[test]
    fn optimal_cost_scalar_and_noise_free() {
        let g = DirectedDelayGraph::new(1, vec![]).unwrap();
        let d = compute_delay_matrix(&g);
        let ig = build_information_graph(&d);
        let part = Partition::scalar(1);
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let gains =
            synthesize_gains(&a, &b, &q, &r, &ig, &part, DEFAULT_TOL, Provenance::TrueModel)
                .unwrap();
        let j = optimal_cost(&gains, &ig, &part, 1.0);
        assert_relative_eq!(j, 1.1327822, epsilon = 1e-6);
        assert_relative_eq!(optimal_cost(&gains, &ig, &part, 0.0), 0.0);
    }

    #[test]
    fn example_cost_expands_over_leaves() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 9).unwrap();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let j = optimal_cost(&gains, &ig, &part, model.sigma_w);
        // manual expansion: w_1 -> {1}, w_2 -> {1,2}, w_3 -> {3}
        let idx = |members: &[usize]| {
            ig.nodes()
                .iter()
                .position(|s| s.members() == members)
                .unwrap()
        };
        let manual = gains.p[idx(&[0])][(0, 0)]
            + gains.p[idx(&[0, 1])][(1, 1)]
            + gains.p[idx(&[2])][(0, 0)];
        assert_relative_eq!(j, manual, epsilon = 1e-12);
    }

    #[test]
    fn tilde_recursion_recovers_truth() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 10).unwrap();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let (p_tilde, j_tilde) = tilde_p_and_cost(
            &gains, &model.a, &model.b, &model.q, &model.r, &ig, &part, model.sigma_w,
            DEFAULT_TOL,
        )
        .unwrap();
        let j_star = optimal_cost(&gains, &ig, &part, model.sigma_w);
        assert_relative_eq!(j_tilde, j_star, epsilon = 1e-8 * j_star.max(1.0));
        for v in 0..ig.len() {
            assert!((&p_tilde[v] - &gains.p[v]).norm() <= 1e-7 * gains.p[v].norm());
        }
        // sigma_w = 0 prices everything at zero
        let (_, j0) = tilde_p_and_cost(
            &gains, &model.a, &model.b, &model.q, &model.r, &ig, &part, 0.0, DEFAULT_TOL,
        )
        .unwrap();
        assert_relative_eq!(j0, 0.0);
    }

    #[test]
    fn tilde_scalar_perturbed_gain_dominates_optimum() {
        let g = DirectedDelayGraph::new(1, vec![]).unwrap();
        let d = compute_delay_matrix(&g);
        let ig = build_information_graph(&d);
        let part = Partition::scalar(1);
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let gains =
            synthesize_gains(&a, &b, &q, &r, &ig, &part, DEFAULT_TOL, Provenance::TrueModel)
                .unwrap();
        let j_star = optimal_cost(&gains, &ig, &part, 1.0);

        let mut perturbed = gains.clone();
        perturbed.k[0][(0, 0)] += 0.01;
        perturbed.provenance = Provenance::Estimate;
        let (_, j_tilde) =
            tilde_p_and_cost(&perturbed, &a, &b, &q, &r, &ig, &part, 1.0, DEFAULT_TOL).unwrap();
        assert!(j_tilde >= j_star - 1e-9);

        // scalar fixed-point oracle: p = (q + k^2 r) / (1 - (a + b k)^2)
        let k = perturbed.k[0][(0, 0)];
        let closed = 0.5 + k;
        let oracle = (1.0 + k * k) / (1.0 - closed * closed);
        assert_relative_eq!(j_tilde, oracle, epsilon = 1e-8);
    }

    #[test]
    fn tilde_rejects_unstable_mixture() {
        let g = DirectedDelayGraph::new(1, vec![]).unwrap();
        let d = compute_delay_matrix(&g);
        let ig = build_information_graph(&d);
        let part = Partition::scalar(1);
        let a = DMatrix::from_element(1, 1, 0.5);
        let b = DMatrix::from_element(1, 1, 1.0);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let gains =
            synthesize_gains(&a, &b, &q, &r, &ig, &part, DEFAULT_TOL, Provenance::TrueModel)
                .unwrap();
        let mut bad = gains;
        bad.k[0][(0, 0)] = 2.0; // a + b k = 2.5
        let err = tilde_p_and_cost(&bad, &a, &b, &q, &r, &ig, &part, 1.0, DEFAULT_TOL);
        assert!(matches!(err, Err(RiccatiError::UnstableMixedLoop { .. })));
    }

    #[test]
    fn gain_set_json_export() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 14).unwrap();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let json = gains.to_json(&ig);
        assert_eq!(json.provenance, "true-model");
        assert_eq!(json.nodes.len(), 4);
        assert_eq!(json.nodes[0].subset, vec![1]);
        let text = serde_json::to_string(&json).unwrap();
        let parsed: GainSetJson = serde_json::from_str(&text).unwrap();
        for (a, b) in json.nodes.iter().zip(&parsed.nodes) {
            assert_eq!(a.k, b.k);
            assert_eq!(a.p, b.p);
        }
    }

    #[test]
    fn random_gain_perturbations_never_beat_optimum() {
        let (g, _d, ig) = example_setup();
        let part = Partition::scalar(3);
        let model = generate_random_system(&g, part.clone(), 0.8, 2.0, 5.0, 1.0, 12).unwrap();
        let gains = synthesize_gains(
            &model.a, &model.b, &model.q, &model.r, &ig, &part, DEFAULT_TOL,
            Provenance::TrueModel,
        )
        .unwrap();
        let j_star = optimal_cost(&gains, &ig, &part, model.sigma_w);
        let mut rng = crate::lti::rng_stream(99, 0);
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..100 {
            let mut perturbed = gains.clone();
            for k in &mut perturbed.k {
                let mut delta = DMatrix::from_fn(k.nrows(), k.ncols(), |_, _| {
                    normal.sample(&mut rng)
                });
                let norm = delta.norm();
                if norm > 0.0 {
                    delta *= 0.05 / norm;
                }
                *k += delta;
            }
            match tilde_p_and_cost(
                &perturbed, &model.a, &model.b, &model.q, &model.r, &ig, &part, model.sigma_w,
                DEFAULT_TOL,
            ) {
                Ok((_, j_tilde)) => assert!(j_tilde >= j_star - 1e-9),
                Err(RiccatiError::UnstableMixedLoop { .. }) => {}
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }
}
