//! Binary-tree realization of a compiled map.
//!
//! Each internal node splits its branch set `S` into `S₀, S₁` and measures a
//! two-outcome instrument `M_b = G_{S_b}^{1/2} · G_S^{-1/2}` where
//! `G_T = Σ_{i∈T} K̃_i†K̃_i` (inverse taken on the support of `G_S`). Along a
//! root-to-leaf path the product telescopes to `(K̃_i†K̃_i)^{1/2}`, and the leaf
//! correction `V_i` from the polar decomposition `K̃_i = V_i (K̃_i†K̃_i)^{1/2}`
//! restores `K̃_i`. Each node is run as a joint unitary on system ⊗ ancilla
//! followed by an ancilla measurement and reset.

use rand::Rng;

use super::CompiledCptp;
use crate::error::{Error, Result};
use crate::numerics::{complete_isometry, gram_roots, polar, CMatrix};

/// Tolerances checked by [`verify_tree_plan`].
pub const NODE_TOL: f64 = 1e-9;
pub const UNITARY_TOL: f64 = 1e-10;
pub const PATH_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct PlanNode {
    /// Branch indices reachable below this node.
    pub branches: Vec<usize>,
    /// `[M₀, M₁]`, acting on the support of `G_S`.
    pub instrument: [CMatrix; 2],
    /// `(2d)x(2d)` unitary; ancilla is the most significant factor, so the
    /// first `d` columns hold `[M₀ + (I − P); M₁]`.
    pub dilation: CMatrix,
    pub children: [Box<PlanTree>; 2],
}

#[derive(Debug, Clone)]
pub enum PlanTree {
    Leaf { branch: usize, correction: CMatrix },
    Node(PlanNode),
}

#[derive(Debug, Clone)]
pub struct TreePlan {
    pub dim: usize,
    pub depth: usize,
    pub root: PlanTree,
}

pub(crate) fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Branches sorted by descending `|w|`, ties broken by index.
fn branch_order(c: &CompiledCptp) -> Vec<usize> {
    let mut order: Vec<usize> = (0..c.branch_count()).collect();
    order.sort_by(|&a, &b| c.weights[b].abs().total_cmp(&c.weights[a].abs()).then(a.cmp(&b)));
    order
}

fn subset_roots(c: &CompiledCptp, set: &[usize]) -> Result<crate::numerics::GramRoots> {
    let blocks: Vec<&CMatrix> = set.iter().map(|&i| &c.kraus[i]).collect();
    gram_roots(&blocks)
}

fn build(c: &CompiledCptp, set: &[usize]) -> Result<PlanTree> {
    if let [branch] = *set {
        let (v, _) = polar(&c.kraus[branch])?;
        return Ok(PlanTree::Leaf { branch, correction: v });
    }
    let d = c.dim;
    let split = set.len().div_ceil(2);
    let (left, right) = set.split_at(split);
    let parent = subset_roots(c, set)?;
    let m0 = &subset_roots(c, left)?.sqrt * &parent.pinv_sqrt;
    let m1 = &subset_roots(c, right)?.sqrt * &parent.pinv_sqrt;
    let off_support = CMatrix::identity(d) - &parent.support;
    let stacked = CMatrix::vstack(&[&(&m0 + &off_support), &m1]);
    let dilation = complete_isometry(&stacked)?;
    Ok(PlanTree::Node(PlanNode {
        branches: set.to_vec(),
        instrument: [m0, m1],
        dilation,
        children: [Box::new(build(c, left)?), Box::new(build(c, right)?)],
    }))
}

pub fn build_tree_plan(c: &CompiledCptp) -> Result<TreePlan> {
    let order = branch_order(c);
    let root = build(c, &order)?;
    Ok(TreePlan {
        dim: c.dim,
        depth: ceil_log2(c.branch_count()),
        root,
    })
}

impl PlanTree {
    fn height(&self) -> usize {
        match self {
            PlanTree::Leaf { .. } => 0,
            PlanTree::Node(n) => 1 + n.children.iter().map(|c| c.height()).max().unwrap_or(0),
        }
    }

    fn visit<'a>(&'a self, path: &mut Vec<&'a CMatrix>, f: &mut impl FnMut(&'a PlanTree, &[&'a CMatrix])) {
        f(self, path);
        if let PlanTree::Node(n) = self {
            for b in 0..2 {
                path.push(&n.instrument[b]);
                n.children[b].visit(path, f);
                path.pop();
            }
        }
    }
}

impl TreePlan {
    /// Number of internal nodes.
    pub fn node_count(&self) -> usize {
        let mut count = 0;
        self.root.visit(&mut Vec::new(), &mut |t, _| {
            if matches!(t, PlanTree::Node(_)) {
                count += 1;
            }
        });
        count
    }

    /// `V_i · M_{b_n} ⋯ M_{b_1}` for every leaf, keyed by branch index.
    pub fn path_operators(&self) -> Vec<(usize, CMatrix)> {
        let mut out = Vec::new();
        let d = self.dim;
        self.root.visit(&mut Vec::new(), &mut |t, path| {
            if let PlanTree::Leaf { branch, correction } = t {
                let prod = path.iter().fold(CMatrix::identity(d), |acc, m| *m * &acc);
                out.push((*branch, correction * &prod));
            }
        });
        out.sort_by_key(|(b, _)| *b);
        out
    }

    /// Walks the tree once: at every node the outcome `b` is drawn with
    /// probability `Tr[M_b σ M_b†]/Tr σ`. Returns the branch index and the
    /// unnormalized output `K̃_i ρ K̃_i†`.
    pub fn sample(&self, rho: &CMatrix, rng: &mut impl Rng) -> Result<(usize, CMatrix)> {
        let mut sigma = rho.clone();
        let mut node = &self.root;
        loop {
            match node {
                PlanTree::Leaf { branch, correction } => {
                    return Ok((*branch, correction.sandwich(&sigma)));
                }
                PlanTree::Node(n) => {
                    let total = sigma.trace().re;
                    let out0 = n.instrument[0].sandwich(&sigma);
                    let p0 = out0.trace().re / total;
                    let u: f64 = rng.random();
                    if u < p0 {
                        sigma = out0;
                        node = &n.children[0];
                    } else {
                        sigma = n.instrument[1].sandwich(&sigma);
                        node = &n.children[1];
                    }
                    if sigma.trace().re <= 0.0 {
                        return Err(Error::DegenerateBranch {
                            index: 0,
                            probability: 0.0,
                        });
                    }
                }
            }
        }
    }
}

/// Residuals of every plan invariant; `passed()` applies the tolerances.
#[derive(Debug, Clone, Default)]
pub struct TreeReport {
    pub node_completeness: Vec<f64>,
    pub dilation_unitarity: Vec<f64>,
    pub dilation_embedding: Vec<f64>,
    pub path_reconstruction: Vec<(usize, f64)>,
    pub depth: usize,
    pub expected_depth: usize,
    pub height: usize,
    pub leaves_cover_branches: bool,
}

fn worst(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

impl TreeReport {
    pub fn max_node_completeness(&self) -> f64 {
        worst(self.node_completeness.iter().copied())
    }

    pub fn max_dilation_unitarity(&self) -> f64 {
        worst(self.dilation_unitarity.iter().copied())
    }

    pub fn max_dilation_embedding(&self) -> f64 {
        worst(self.dilation_embedding.iter().copied())
    }

    pub fn max_path_reconstruction(&self) -> f64 {
        worst(self.path_reconstruction.iter().map(|(_, r)| *r))
    }

    pub fn passed(&self) -> bool {
        self.max_node_completeness() <= NODE_TOL
            && self.max_dilation_unitarity() <= UNITARY_TOL
            && self.max_dilation_embedding() <= NODE_TOL
            && self.max_path_reconstruction() <= PATH_TOL
            && self.depth == self.expected_depth
            && self.height == self.expected_depth
            && self.leaves_cover_branches
    }
}

/// Checks a plan against the compiled map it claims to realize. Supports
/// and target operators are recomputed from `c`, not read from the plan.
pub fn verify_tree_plan(plan: &TreePlan, c: &CompiledCptp) -> TreeReport {
    let d = c.dim;
    let mut report = TreeReport {
        depth: plan.depth,
        expected_depth: ceil_log2(c.branch_count()),
        height: plan.root.height(),
        ..Default::default()
    };
    if plan.dim != d {
        report.leaves_cover_branches = false;
        report.node_completeness.push(f64::INFINITY);
        return report;
    }
    plan.root.visit(&mut Vec::new(), &mut |t, _| {
        if let PlanTree::Node(n) = t {
            let support = match subset_roots(c, &n.branches) {
                Ok(r) => r.support,
                Err(_) => {
                    report.node_completeness.push(f64::INFINITY);
                    return;
                }
            };
            let [m0, m1] = &n.instrument;
            let sum = m0.adjoint() * m0 + m1.adjoint() * m1;
            report.node_completeness.push((&sum - &support).sup_norm());
            let u = &n.dilation;
            report.dilation_unitarity.push((u.adjoint() * u).identity_residual());
            let embedded = &u.block(0, 0, 2 * d, d) * &support;
            let target = CMatrix::vstack(&[m0, m1]);
            report.dilation_embedding.push((&embedded - &target).sup_norm());
        }
    });
    let paths = plan.path_operators();
    let mut seen: Vec<usize> = paths.iter().map(|(b, _)| *b).collect();
    seen.dedup();
    report.leaves_cover_branches = seen.len() == paths.len() && seen == (0..c.branch_count()).collect::<Vec<_>>();
    for (b, op) in &paths {
        let residual = c.kraus.get(*b).map_or(f64::INFINITY, |k| (op - k).sup_norm());
        report.path_reconstruction.push((*b, residual));
    }
    report
}
