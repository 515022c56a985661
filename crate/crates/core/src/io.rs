//! JSON exchange format for maps, compiled maps, tree plans, states and
//! observables. Complex numbers are `[re, im]` pairs; matrices are row-major
//! lists of rows.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::channels::{ChoiMatrix, DensityMatrix, LinearMap, Observable, Sign, SignedKrausMap, Superoperator};
use crate::compiler::{CompiledCptp, PlanNode, PlanTree, TreePlan};
use crate::error::{Error, Result};
use crate::numerics::{c, CMatrix};

pub type JsonMatrix = Vec<Vec<[f64; 2]>>;

pub fn matrix_to_json(m: &CMatrix) -> JsonMatrix {
    (0..m.rows())
        .map(|r| {
            (0..m.cols())
                .map(|col| {
                    let z = m.get(r, col);
                    [z.re, z.im]
                })
                .collect()
        })
        .collect()
}

pub fn matrix_from_json(j: &JsonMatrix) -> Result<CMatrix> {
    let rows = j.len();
    let cols = j.first().map_or(0, Vec::len);
    if j.iter().any(|row| row.len() != cols) {
        return Err(Error::Invalid("ragged matrix rows".into()));
    }
    let entries: Vec<_> = j.iter().flatten().map(|[re, im]| c(*re, *im)).collect();
    CMatrix::from_row_major(rows, cols, &entries)
}

fn square_from_json(j: &JsonMatrix, dim: usize, what: &str) -> Result<CMatrix> {
    let m = matrix_from_json(j)?;
    if m.rows() != dim || m.cols() != dim {
        return Err(Error::Invalid(format!(
            "{what}: expected {dim}x{dim}, found {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Kraus,
    Choi,
    Superop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrausEntry {
    pub sign: i8,
    pub matrix: JsonMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeJson {
    Leaf {
        branch: usize,
        correction: JsonMatrix,
    },
    Node {
        branches: Vec<usize>,
        m0: JsonMatrix,
        m1: JsonMatrix,
        dilation: JsonMatrix,
        children: Box<[TreeJson; 2]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreePlanJson {
    pub depth: usize,
    pub root: TreeJson,
}

/// A map file. Plain maps carry one of `kraus`/`choi`/`superop`; compiled
/// maps are Kraus files (all signs `+1`) with `weights`, `gamma`,
/// `completed`, `source_rank` and optionally `tree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub dim: usize,
    pub representation: Representation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kraus: Option<Vec<KrausEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choi: Option<JsonMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superop: Option<JsonMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<TreePlanJson>,
}

impl MapFile {
    fn bare(dim: usize, representation: Representation) -> Self {
        Self {
            dim,
            representation,
            kraus: None,
            choi: None,
            superop: None,
            weights: None,
            gamma: None,
            completed: None,
            source_rank: None,
            tree: None,
        }
    }

    pub fn from_kraus(map: &SignedKrausMap) -> Self {
        let mut f = Self::bare(map.dim(), Representation::Kraus);
        f.kraus = Some(
            map.terms()
                .map(|(k, s)| KrausEntry {
                    sign: if s == Sign::Plus { 1 } else { -1 },
                    matrix: matrix_to_json(k),
                })
                .collect(),
        );
        f
    }

    pub fn from_choi(choi: &ChoiMatrix) -> Self {
        let mut f = Self::bare(choi.matrix().rows().isqrt(), Representation::Choi);
        f.choi = Some(matrix_to_json(choi.matrix()));
        f
    }

    pub fn from_superop(s: &Superoperator) -> Self {
        let mut f = Self::bare(s.matrix().rows().isqrt(), Representation::Superop);
        f.superop = Some(matrix_to_json(s.matrix()));
        f
    }

    pub fn from_compiled(c: &CompiledCptp, plan: Option<&TreePlan>) -> Self {
        let mut f = Self::bare(c.dim(), Representation::Kraus);
        f.kraus = Some(
            c.kraus()
                .iter()
                .map(|k| KrausEntry {
                    sign: 1,
                    matrix: matrix_to_json(k),
                })
                .collect(),
        );
        f.weights = Some(c.weights().to_vec());
        f.gamma = Some(c.gamma());
        f.completed = Some(c.completed());
        f.source_rank = Some(c.source_rank());
        f.tree = plan.map(|p| TreePlanJson {
            depth: p.depth,
            root: tree_to_json(&p.root),
        });
        f
    }

    fn kraus_parts(&self) -> Result<(Vec<CMatrix>, Vec<Sign>)> {
        let entries = self
            .kraus
            .as_ref()
            .ok_or_else(|| Error::Invalid("representation \"kraus\" requires a \"kraus\" field".into()))?;
        let mut ops = Vec::with_capacity(entries.len());
        let mut signs = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            ops.push(square_from_json(&e.matrix, self.dim, &format!("kraus[{i}]"))?);
            signs.push(match e.sign {
                1 => Sign::Plus,
                -1 => Sign::Minus,
                s => return Err(Error::Invalid(format!("kraus[{i}]: sign {s} is not ±1"))),
            });
        }
        Ok((ops, signs))
    }

    /// Loads the map in signed Kraus form, validating the invariants of the
    /// stored representation.
    pub fn to_signed_kraus(&self) -> Result<SignedKrausMap> {
        let d2 = self.dim * self.dim;
        match self.representation {
            Representation::Kraus => {
                let (ops, signs) = self.kraus_parts()?;
                SignedKrausMap::new(ops, signs)
            }
            Representation::Choi => {
                let j = self
                    .choi
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("representation \"choi\" requires a \"choi\" field".into()))?;
                ChoiMatrix::new(square_from_json(j, d2, "choi")?)?.to_signed_kraus()
            }
            Representation::Superop => {
                let j = self
                    .superop
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("representation \"superop\" requires a \"superop\" field".into()))?;
                Superoperator::new(square_from_json(j, d2, "superop")?)?.to_signed_kraus()
            }
        }
    }

    pub fn is_compiled(&self) -> bool {
        self.weights.is_some()
    }

    pub fn to_compiled(&self) -> Result<CompiledCptp> {
        if self.representation != Representation::Kraus {
            return Err(Error::Invalid("compiled maps use the kraus representation".into()));
        }
        let missing = |f: &str| Error::Invalid(format!("compiled map is missing \"{f}\""));
        let weights = self.weights.clone().ok_or_else(|| missing("weights"))?;
        let gamma = self.gamma.ok_or_else(|| missing("gamma"))?;
        let (ops, signs) = self.kraus_parts()?;
        if signs.contains(&Sign::Minus) {
            return Err(Error::Invalid("compiled Kraus operators must carry sign +1".into()));
        }
        let completed = self.completed.unwrap_or(weights.last() == Some(&0.0));
        let source_rank = self.source_rank.unwrap_or(ops.len() - usize::from(completed));
        CompiledCptp::from_parts(ops, weights, gamma, completed, source_rank)
    }

    pub fn tree_plan(&self) -> Result<Option<TreePlan>> {
        self.tree
            .as_ref()
            .map(|t| {
                Ok(TreePlan {
                    dim: self.dim,
                    depth: t.depth,
                    root: tree_from_json(&t.root, self.dim)?,
                })
            })
            .transpose()
    }
}

fn tree_to_json(t: &PlanTree) -> TreeJson {
    match t {
        PlanTree::Leaf { branch, correction } => TreeJson::Leaf {
            branch: *branch,
            correction: matrix_to_json(correction),
        },
        PlanTree::Node(n) => TreeJson::Node {
            branches: n.branches.clone(),
            m0: matrix_to_json(&n.instrument[0]),
            m1: matrix_to_json(&n.instrument[1]),
            dilation: matrix_to_json(&n.dilation),
            children: Box::new([tree_to_json(&n.children[0]), tree_to_json(&n.children[1])]),
        },
    }
}

fn tree_from_json(t: &TreeJson, dim: usize) -> Result<PlanTree> {
    Ok(match t {
        TreeJson::Leaf { branch, correction } => PlanTree::Leaf {
            branch: *branch,
            correction: square_from_json(correction, dim, "tree leaf correction")?,
        },
        TreeJson::Node {
            branches,
            m0,
            m1,
            dilation,
            children,
        } => PlanTree::Node(PlanNode {
            branches: branches.clone(),
            instrument: [
                square_from_json(m0, dim, "tree instrument")?,
                square_from_json(m1, dim, "tree instrument")?,
            ],
            dilation: square_from_json(dilation, 2 * dim, "tree dilation")?,
            children: [
                Box::new(tree_from_json(&children[0], dim)?),
                Box::new(tree_from_json(&children[1], dim)?),
            ],
        }),
    })
}

/// A state or observable file: `{ "dim": d, "matrix": [[[re, im], ...], ...] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorFile {
    pub dim: usize,
    pub matrix: JsonMatrix,
}

impl OperatorFile {
    pub fn new(m: &CMatrix) -> Self {
        Self {
            dim: m.rows(),
            matrix: matrix_to_json(m),
        }
    }

    pub fn to_state(&self) -> Result<DensityMatrix> {
        DensityMatrix::new(square_from_json(&self.matrix, self.dim, "state")?)
    }

    pub fn to_observable(&self) -> Result<Observable> {
        Observable::new(square_from_json(&self.matrix, self.dim, "observable")?)
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
