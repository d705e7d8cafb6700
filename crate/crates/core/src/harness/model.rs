//! A trainable PO model: comparison net, step size, optional
//! linear-assignment weights and optional tile embedding.

use rand::Rng;

use super::init::{bias_uniform, xavier_uniform};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ordering::{pairwise_costs, ComparisonNet, ComparisonNetVars};
use crate::perm_optim::{
    optimise_with_costs, InitMode, PoConfig, PoOutput, PositionStructure, StructureKind,
};

/// Shared one-hidden-layer ReLU perceptron applied to every tile before the
/// comparison net.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EmbedNet {
    pub fn xavier<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        EmbedNet {
            w1: xavier_uniform(hidden, input, rng),
            b1: bias_uniform(hidden, input, rng),
            w2: xavier_uniform(output, hidden, rng),
            b2: bias_uniform(output, hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }
}

#[derive(Debug, Clone, Copy)]
struct EmbedVars<'t> {
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

impl<'t> EmbedVars<'t> {
    fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        let h = x
            .matmul(self.w1.transpose())?
            .add(self.b1.broadcast_row(n)?)?
            .relu();
        h.matmul(self.w2.transpose())?.add(self.b2.broadcast_row(n)?)
    }
}

/// Parameters of one model as recorded on a tape, in [`Model::param_names`]
/// order.
#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    pub net: ComparisonNetVars<'t>,
    pub eta: Var<'t>,
    pub la: Option<Var<'t>>,
    embed: Option<EmbedVars<'t>>,
}

impl<'t> ModelVars<'t> {
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = self.net.leaves().to_vec();
        out.push(self.eta);
        out.extend(self.la);
        if let Some(e) = &self.embed {
            out.extend([e.w1, e.b1, e.w2, e.b2]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub structure: PositionStructure,
    pub net: ComparisonNet,
    /// Inner step size, `1 × 1`.
    pub eta: Tensor,
    /// Linear-assignment weights, one row per position.
    pub la: Option<Tensor>,
    pub embed: Option<EmbedNet>,
    pub po: PoConfig,
}

impl Model {
    /// Fresh Xavier-initialised model for sets of `structure.size()` raw
    /// elements of dimension `input_dim`. With `embed = Some((hidden, dim))`
    /// the elements pass through an embedding first.
    pub fn init<R: Rng>(
        structure: PositionStructure,
        input_dim: usize,
        hidden: usize,
        embed: Option<(usize, usize)>,
        eta_init: f64,
        po: PoConfig,
        rng: &mut R,
    ) -> Result<Self> {
        po.validate()?;
        if input_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(
                "element dimension and hidden width must be positive".into(),
            ));
        }
        let channels = structure.channels().len();
        let embed = match embed {
            Some((h, d)) if h == 0 || d == 0 => {
                return Err(Error::InvalidArgument("embedding widths must be positive".into()))
            }
            Some((h, d)) => Some(EmbedNet::xavier(input_dim, h, d, rng)),
            None => None,
        };
        let feature_dim = embed.as_ref().map_or(input_dim, EmbedNet::output_dim);
        let net = ComparisonNet::xavier(feature_dim, hidden, channels, rng);
        let la = (po.init == InitMode::LinearAssignment)
            .then(|| xavier_uniform(structure.size(), feature_dim, rng));
        Ok(Model {
            structure,
            net,
            eta: Tensor::scalar(eta_init),
            la,
            embed,
            po,
        })
    }

    /// Model with hand-set comparisons. For sequences it ranks elements by
    /// their first feature, so rounded outputs are exact ascending sorts.
    /// For grids the row channel ranks by feature 1 and the column channel
    /// by feature 0, which places synthetic mosaic tiles exactly.
    pub fn oracle(structure: PositionStructure, input_dim: usize, eta: f64, po: PoConfig) -> Result<Self> {
        let net = match structure.kind() {
            StructureKind::Sequence => ComparisonNet::first_feature(input_dim, 1),
            StructureKind::Grid { .. } if input_dim >= 2 => {
                ComparisonNet::feature_selector(input_dim, &[1, 0])
            }
            StructureKind::Grid { .. } => {
                return Err(Error::InvalidArgument(
                    "grid oracle needs elements with at least 2 features".into(),
                ))
            }
        };
        let po = PoConfig {
            init: InitMode::Uniform,
            ..po
        };
        Ok(Model {
            structure,
            net,
            eta: Tensor::scalar(eta),
            la: None,
            embed: None,
            po,
        })
    }

    pub fn set_size(&self) -> usize {
        self.structure.size()
    }

    /// Raw element dimension the model consumes.
    pub fn input_dim(&self) -> usize {
        self.embed
            .as_ref()
            .map_or(self.net.element_dim(), EmbedNet::input_dim)
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut names = vec!["net.w1", "net.b1", "net.w2", "net.b2", "eta"];
        if self.la.is_some() {
            names.push("la.w");
        }
        if self.embed.is_some() {
            names.extend(["embed.w1", "embed.b1", "embed.w2", "embed.b2"]);
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.net.w1, &self.net.b1, &self.net.w2, &self.net.b2, &self.eta];
        out.extend(self.la.as_ref());
        if let Some(e) = &self.embed {
            out.extend([&e.w1, &e.b1, &e.w2, &e.b2]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.net.w1,
            &mut self.net.b1,
            &mut self.net.w2,
            &mut self.net.b2,
            &mut self.eta,
        ];
        out.extend(self.la.as_mut());
        if let Some(e) = &mut self.embed {
            out.extend([&mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2]);
        }
        out
    }

    /// Rebuilds a model from named arrays as produced by
    /// [`Model::param_names`] and [`Model::params`].
    pub fn from_named(
        structure: PositionStructure,
        po: PoConfig,
        arrays: &[(String, Tensor)],
    ) -> Result<Self> {
        let get = |name: &str| arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
        let need = |name: &str| {
            get(name).ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))
        };
        for (name, _) in arrays {
            const KNOWN: [&str; 10] = [
                "net.w1", "net.b1", "net.w2", "net.b2", "eta", "la.w", "embed.w1", "embed.b1",
                "embed.w2", "embed.b2",
            ];
            if !KNOWN.contains(&name.as_str()) {
                return Err(Error::Incompatible(format!("unknown parameter `{name}`")));
            }
        }
        let net = ComparisonNet::from_parts(need("net.w1")?, need("net.b1")?, need("net.w2")?, need("net.b2")?)
            .map_err(|e| Error::Incompatible(e.to_string()))?;
        let eta = need("eta")?;
        if eta.shape() != [1, 1] {
            return Err(Error::Incompatible(format!("eta has shape {:?}", eta.shape())));
        }
        let embed = match get("embed.w1") {
            Some(w1) => Some(EmbedNet {
                w1,
                b1: need("embed.b1")?,
                w2: need("embed.w2")?,
                b2: need("embed.b2")?,
            }),
            None => None,
        };
        let model = Model {
            structure,
            net,
            eta,
            la: get("la.w"),
            embed,
            po,
        };
        model.check()?;
        Ok(model)
    }

    /// Consistency of the parameter shapes with each other and the structure.
    pub fn check(&self) -> Result<()> {
        let n = self.set_size();
        let channels = self.structure.channels().len();
        if self.net.channels() != channels {
            return Err(Error::Incompatible(format!(
                "comparison net has {} channels, the position structure needs {channels}",
                self.net.channels()
            )));
        }
        if let Some(e) = &self.embed {
            let h = e.w1.rows();
            let d = e.w2.rows();
            if e.b1.shape() != [1, h] || e.w2.cols() != h || e.b2.shape() != [1, d] {
                return Err(Error::Incompatible("inconsistent embedding shapes".into()));
            }
            if d != self.net.element_dim() {
                return Err(Error::Incompatible(format!(
                    "embedding outputs {d} features, comparison net takes {}",
                    self.net.element_dim()
                )));
            }
        }
        let feature_dim = self.net.element_dim();
        match (&self.la, self.po.init) {
            (Some(w), InitMode::LinearAssignment) if w.shape() != [n, feature_dim] => {
                Err(Error::Incompatible(format!(
                    "linear-assignment weights {:?} were trained for sets of {} elements, task has {n} elements of dimension {feature_dim}",
                    w.shape(),
                    w.rows()
                )))
            }
            (None, InitMode::LinearAssignment) => Err(Error::Incompatible(
                "linear-assignment init without weights".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            net: self.net.on_tape(tape),
            eta: tape.param(self.eta.clone()),
            la: self.la.as_ref().map(|w| tape.param(w.clone())),
            embed: self.embed.as_ref().map(|e| EmbedVars {
                w1: tape.param(e.w1.clone()),
                b1: tape.param(e.b1.clone()),
                w2: tape.param(e.w2.clone()),
                b2: tape.param(e.b2.clone()),
            }),
        }
    }

    /// Wraps existing tape variables, given in [`Model::params`] order, as
    /// this model's parameters.
    pub fn vars_from<'t>(&self, leaves: &[Var<'t>]) -> Result<ModelVars<'t>> {
        let params = self.params();
        let shapes_match = leaves.len() == params.len()
            && leaves.iter().zip(&params).all(|(v, p)| v.shape() == p.shape());
        if !shapes_match {
            return Err(Error::InvalidArgument(format!(
                "expected {} variables shaped like the model parameters",
                params.len()
            )));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("length checked");
        let net = ComparisonNetVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let eta = next();
        let la = self.la.as_ref().map(|_| next());
        let embed = self.embed.as_ref().map(|_| EmbedVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        });
        Ok(ModelVars { net, eta, la, embed })
    }

    /// Runs the PO module on one set (one element per row of `x`) with the
    /// given inner-loop settings.
    pub fn forward<'t>(
        &self,
        vars: &ModelVars<'t>,
        x: Var<'t>,
        po: &PoConfig,
    ) -> Result<PoOutput<'t>> {
        let [n, dim] = x.shape();
        if n != self.set_size() || dim != self.input_dim() {
            return Err(Error::Incompatible(format!(
                "model expects sets of {} elements of dimension {}, got {n}x{dim}",
                self.set_size(),
                self.input_dim()
            )));
        }
        let features = match &vars.embed {
            Some(e) => e.apply(x)?,
            None => x,
        };
        let costs = pairwise_costs(features, &vars.net)?;
        let la = if po.init == InitMode::LinearAssignment {
            vars.la
        } else {
            None
        };
        optimise_with_costs(x, features, costs, &self.structure, po, vars.eta, la)
    }

    /// Mean squared error of one set against its target, with the gradient
    /// of every parameter in [`Model::params`] order.
    pub fn loss_and_grad(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars = self.on_tape(&tape);
        let loss = mse(self.forward(&vars, tape.constant(x.clone()), &self.po)?.y, target)?;
        let leaves = vars.leaves();
        let grads = tape.backward(loss, &leaves)?;
        let grads = leaves
            .iter()
            .map(|v| grads.get(*v).expect("requested").clone())
            .collect();
        Ok((loss.value().item(), grads))
    }

    /// Final soft permutation for one set, no gradients recorded.
    pub fn soft_permutation(&self, x: &Tensor, po: &PoConfig) -> Result<Tensor> {
        let tape = Tape::inference();
        let vars = self.on_tape(&tape);
        let out = self.forward(&vars, tape.constant(x.clone()), po)?;
        Ok(out.p_final.post.value().as_ref().clone())
    }
}

/// Mean of squared differences between `y` and a constant target.
pub fn mse<'t>(y: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let t = y.tape().constant(target.clone());
    Ok(y.sub(t)?.square().mean())
}

/// Structure for the given kind; `n` is ignored for grids.
pub fn structure_for(kind: StructureKind, n: usize) -> Result<PositionStructure> {
    match kind {
        StructureKind::Sequence => PositionStructure::sequence(n),
        StructureKind::Grid { rows, cols } => PositionStructure::grid(rows, cols),
    }
}
