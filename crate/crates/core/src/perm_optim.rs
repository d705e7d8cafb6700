//! Permutation optimisation: gradient descent on a Sinkhorn-parametrised
//! soft permutation against learned pairwise ordering costs, unrolled for a
//! fixed number of steps so the whole procedure stays differentiable.
//!
//! Orientation: a soft permutation `P` has one row per element and one
//! column per output position (`P[i][k]` is the weight of element `i` at
//! position `k`), and the permuted output is `Y = Pᵀ X`.
//!
//! For cost channels `C⁽ᵐ⁾` and position structures `O⁽ᵐ⁾` the total cost is
//! `c(P) = Σₘ ⟨C⁽ᵐ⁾, P O⁽ᵐ⁾ Pᵀ⟩` and, because both factors are
//! antisymmetric, its gradient is `∂c/∂P = Σₘ 2 C⁽ᵐ⁾ P O⁽ᵐ⁾ᵀ`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ordering::{pairwise_costs, ComparisonNetVars, CostChannels};
use crate::sinkhorn::{sinkhorn, SoftPermutation, DEFAULT_ITERATIONS};

/// Largest set size [`qp_cost`] will build the `N² × N²` matrix for.
pub const QP_MAX_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureKind {
    Sequence,
    /// Positions enumerated row-major over a `rows × cols` grid.
    Grid { rows: usize, cols: usize },
}

/// Antisymmetric sign matrices over output positions, one per cost channel.
///
/// `O[k][k'] = +1` when position `k` comes before `k'` in a compared chain,
/// `-1` when after, `0` when the pair is not compared.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionStructure {
    kind: StructureKind,
    channels: Vec<Tensor>,
}

fn sign(a: usize, b: usize) -> f64 {
    match a.cmp(&b) {
        std::cmp::Ordering::Less => 1.0,
        std::cmp::Ordering::Equal => 0.0,
        std::cmp::Ordering::Greater => -1.0,
    }
}

impl PositionStructure {
    pub fn sequence(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("empty sequence structure".into()));
        }
        let mut o = Tensor::zeros(n, n);
        for k in 0..n {
            for k2 in 0..n {
                o.set(k, k2, sign(k, k2));
            }
        }
        Ok(PositionStructure {
            kind: StructureKind::Sequence,
            channels: vec![o],
        })
    }

    /// Channel 0 orders positions within each grid row (left to right);
    /// channel 1 orders positions within each grid column (top to bottom).
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!("empty grid {rows}x{cols}")));
        }
        let n = rows * cols;
        let mut along_rows = Tensor::zeros(n, n);
        let mut along_cols = Tensor::zeros(n, n);
        for k in 0..n {
            let (r, c) = (k / cols, k % cols);
            for k2 in 0..n {
                let (r2, c2) = (k2 / cols, k2 % cols);
                if r == r2 {
                    along_rows.set(k, k2, sign(c, c2));
                }
                if c == c2 {
                    along_cols.set(k, k2, sign(r, r2));
                }
            }
        }
        Ok(PositionStructure {
            kind: StructureKind::Grid { rows, cols },
            channels: vec![along_rows, along_cols],
        })
    }

    /// Builds `kind` for a set of `n` elements.
    pub fn new(kind: StructureKind, n: usize) -> Result<Self> {
        match kind {
            StructureKind::Sequence => Self::sequence(n),
            StructureKind::Grid { rows, cols } => {
                if rows * cols != n {
                    return Err(Error::InvalidArgument(format!(
                        "grid {rows}x{cols} does not hold {n} elements"
                    )));
                }
                Self::grid(rows, cols)
            }
        }
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.channels[0].rows()
    }

    pub fn channels(&self) -> &[Tensor] {
        &self.channels
    }

    /// A single-channel structure holding channel `m` of this one.
    pub fn channel(&self, m: usize) -> PositionStructure {
        PositionStructure {
            kind: self.kind,
            channels: vec![self.channels[m].clone()],
        }
    }
}

fn check_compatible(p: [usize; 2], costs: &CostChannels<'_>, s: &PositionStructure) -> Result<()> {
    if costs.len() != s.channels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cost channels for a structure with {} channels",
            costs.len(),
            s.channels.len()
        )));
    }
    let n = s.size();
    if p != [n, n] || costs.size() != n {
        return Err(Error::ShapeMismatch {
            op: "total_cost",
            left: p,
            right: [costs.size(), n],
        });
    }
    Ok(())
}

/// `Σₘ ⟨C⁽ᵐ⁾, P O⁽ᵐ⁾ Pᵀ⟩`, recorded on `p`'s tape.
pub fn total_cost<'t>(p: Var<'t>, costs: &CostChannels<'t>, s: &PositionStructure) -> Result<Var<'t>> {
    check_compatible(p.shape(), costs, s)?;
    let tape = p.tape();
    let pt = p.transpose();
    let mut total: Option<Var<'t>> = None;
    for (c, o) in costs.channels.iter().zip(&s.channels) {
        let weights = p.matmul(tape.constant(o.clone()))?.matmul(pt)?;
        let term = c.mul(weights)?.sum_all();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one channel"))
}

/// Closed-form `∂c/∂P = Σₘ 2 C⁽ᵐ⁾ (P O⁽ᵐ⁾ᵀ)`, recorded on `p`'s tape so the
/// gradient itself can be differentiated with respect to the costs.
pub fn cost_gradient<'t>(p: Var<'t>, costs: &CostChannels<'t>, s: &PositionStructure) -> Result<Var<'t>> {
    check_compatible(p.shape(), costs, s)?;
    let tape = p.tape();
    let mut total: Option<Var<'t>> = None;
    for (c, o) in costs.channels.iter().zip(&s.channels) {
        let signed = p.matmul(tape.constant(o.transpose()))?;
        let term = c.matmul(signed)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one channel").scale(2.0))
}

/// The total cost as the quadratic form `pᵀ Q p` with
/// `Q[(i,k),(j,k')] = Σₘ C⁽ᵐ⁾ᵢⱼ O⁽ᵐ⁾ₖₖ'` built explicitly and `p` the
/// row-major flattening of `P`.
pub fn qp_cost(p: &Tensor, costs: &[Tensor], s: &PositionStructure) -> Result<f64> {
    let n = s.size();
    if n > QP_MAX_N {
        return Err(Error::InvalidArgument(format!(
            "quadratic form limited to N <= {QP_MAX_N}, got {n}"
        )));
    }
    if costs.len() != s.channels.len()
        || p.shape() != [n, n]
        || costs.iter().any(|c| c.shape() != [n, n])
    {
        return Err(Error::ShapeMismatch {
            op: "qp_cost",
            left: p.shape(),
            right: [n, n],
        });
    }
    let dim = n * n;
    let mut q = Tensor::zeros(dim, dim);
    for (c, o) in costs.iter().zip(&s.channels) {
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    for k2 in 0..n {
                        let idx = (i * n + k) * dim + j * n + k2;
                        q.data_mut()[idx] += c.get(i, j) * o.get(k, k2);
                    }
                }
            }
        }
    }
    let flat = Tensor::column(p.data());
    let qp = q.matmul(&flat)?;
    Ok(flat.data().iter().zip(qp.data()).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `P̃⁰ = 0`, i.e. every element equally likely at every position.
    Uniform,
    /// `P̃⁰[i][k] = w_k · x_i` with one learned weight vector per position.
    LinearAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    /// Step `P̃` along `∂c/∂P`, skipping the Sinkhorn Jacobian.
    Alternative,
    /// Step `P̃` along the true `∂c(S(P̃))/∂P̃`. Inference only.
    FullGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoConfig {
    pub steps: usize,
    pub sinkhorn_iters: usize,
    pub init: InitMode,
    pub update: UpdateMode,
    /// Keep every intermediate soft permutation in [`PoOutput::trajectory`].
    pub keep_trajectory: bool,
}

impl Default for PoConfig {
    fn default() -> Self {
        PoConfig {
            steps: 6,
            sinkhorn_iters: DEFAULT_ITERATIONS,
            init: InitMode::Uniform,
            update: UpdateMode::Alternative,
            keep_trajectory: false,
        }
    }
}

impl PoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sinkhorn_iters == 0 {
            return Err(Error::InvalidArgument(
                "sinkhorn iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Unnormalised starting point of the inner optimisation.
///
/// `features` has one row per element; `la_weights`, required in
/// linear-assignment mode, has one row per position.
pub fn init_pre_permutation<'t>(
    features: Var<'t>,
    init: InitMode,
    la_weights: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let [n, dim] = features.shape();
    match init {
        InitMode::Uniform => Ok(features.tape().constant(Tensor::zeros(n, n))),
        InitMode::LinearAssignment => {
            let w = la_weights.ok_or_else(|| {
                Error::InvalidArgument("linear-assignment init needs position weights".into())
            })?;
            if w.shape() != [n, dim] {
                return Err(Error::Incompatible(format!(
                    "position weights {:?} do not fit a set of {n} elements with dimension {dim}",
                    w.shape()
                )));
            }
            features.matmul(w.transpose())
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoOutput<'t> {
    pub costs: CostChannels<'t>,
    pub p_final: SoftPermutation<'t>,
    /// `P⁽⁰⁾ … P⁽ᵀ⁾` when requested, otherwise empty.
    pub trajectory: Vec<Tensor>,
    /// Permuted values `Pᵀ X`.
    pub y: Var<'t>,
}

/// Full forward pass on a set of elements `x` (one per row): ordering costs
/// from `net`, `T` inner gradient steps, then `Y = Pᵀ x`.
pub fn optimise<'t>(
    x: Var<'t>,
    net: &ComparisonNetVars<'t>,
    structure: &PositionStructure,
    config: &PoConfig,
    eta: Var<'t>,
    la_weights: Option<Var<'t>>,
) -> Result<PoOutput<'t>> {
    let costs = pairwise_costs(x, net)?;
    optimise_with_costs(x, x, costs, structure, config, eta, la_weights)
}

/// [`optimise`] with precomputed costs. `features` feeds the
/// linear-assignment initialisation; `values` are the rows being permuted.
pub fn optimise_with_costs<'t>(
    values: Var<'t>,
    features: Var<'t>,
    costs: CostChannels<'t>,
    structure: &PositionStructure,
    config: &PoConfig,
    eta: Var<'t>,
    la_weights: Option<Var<'t>>,
) -> Result<PoOutput<'t>> {
    config.validate()?;
    let n = structure.size();
    if values.shape()[0] != n || features.shape()[0] != n {
        return Err(Error::InvalidArgument(format!(
            "set of {} elements for a structure of {n} positions",
            values.shape()[0]
        )));
    }
    if eta.shape() != [1, 1] {
        return Err(Error::ShapeMismatch {
            op: "step size",
            left: eta.shape(),
            right: [1, 1],
        });
    }
    let tape = values.tape();
    if config.update == UpdateMode::FullGradient && tape.is_recording() {
        return Err(Error::InvalidArgument(
            "full-gradient inner updates are only available on an inference tape".into(),
        ));
    }

    let mut pre = init_pre_permutation(features, config.init, la_weights)?;
    let mut trajectory = Vec::new();
    for _ in 0..config.steps {
        let sp = sinkhorn(pre, config.sinkhorn_iters)?;
        if config.keep_trajectory {
            trajectory.push(sp.post.value().as_ref().clone());
        }
        pre = match config.update {
            UpdateMode::Alternative => {
                let g = cost_gradient(sp.post, &costs, structure)?;
                pre.sub(g.mul_scalar(eta)?)?
            }
            UpdateMode::FullGradient => {
                let g = sinkhorn_cost_gradient(&pre.value(), &costs.values(), structure, config)?;
                let step = g.scale(eta.value().item());
                let mut next = pre.value().as_ref().clone();
                next.sub_assign(&step);
                tape.constant(next)
            }
        };
    }
    let p_final = sinkhorn(pre, config.sinkhorn_iters)?;
    if config.keep_trajectory {
        trajectory.push(p_final.post.value().as_ref().clone());
    }
    let y = p_final.post.transpose().matmul(values)?;
    Ok(PoOutput {
        costs,
        p_final,
        trajectory,
        y,
    })
}

/// `∂c(S(P̃))/∂P̃` by a nested reverse pass through the Sinkhorn operator.
fn sinkhorn_cost_gradient(
    pre: &Tensor,
    costs: &[Tensor],
    structure: &PositionStructure,
    config: &PoConfig,
) -> Result<Tensor> {
    let inner = Tape::new();
    let pre_var = inner.param(pre.clone());
    let costs = CostChannels {
        channels: costs.iter().map(|c| inner.constant(c.clone())).collect(),
    };
    let p = sinkhorn(pre_var, config.sinkhorn_iters)?;
    let c = total_cost(p.post, &costs, structure)?;
    let grads = inner.backward(c, &[pre_var])?;
    Ok(grads.get(pre_var).expect("requested").clone())
}
