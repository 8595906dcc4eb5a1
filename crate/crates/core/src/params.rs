//! Named parameters, their groups, and trainability.
//!
//! Every trainable scalar lives in exactly one [`ParamGroup`]. Curriculum
//! stages select groups by name; everything outside the selection is frozen
//! and never receives a gradient slot.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Index;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{grad_check_with, CorruptRule, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Token embedding table and output head.
    Embeddings,
    /// Base attention projections.
    Attention,
    Mlp,
    /// Every LayerNorm / QK-norm / RMSNorm parameter.
    Norms,
    Lora,
    /// Resampler queries and weights plus both linear projections.
    ProjectionStack,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Embeddings,
        ParamGroup::Attention,
        ParamGroup::Mlp,
        ParamGroup::Norms,
        ParamGroup::Lora,
        ParamGroup::ProjectionStack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::Mlp => "mlp",
            ParamGroup::Norms => "norms",
            ParamGroup::Lora => "lora",
            ParamGroup::ProjectionStack => "projection_stack",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::UnknownGroup(vec![s.to_string()]))
    }
}

/// Parses a selector, reporting every unknown name at once.
pub fn parse_groups<S: AsRef<str>>(names: &[S]) -> Result<BTreeSet<ParamGroup>> {
    let mut unknown = Vec::new();
    let mut out = BTreeSet::new();
    for n in names {
        match n.as_ref().parse::<ParamGroup>() {
            Ok(g) => {
                out.insert(g);
            }
            Err(_) => unknown.push(n.as_ref().to_string()),
        }
    }
    if unknown.is_empty() {
        Ok(out)
    } else {
        Err(Error::UnknownGroup(unknown))
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    grads_ready: bool,
}

/// Tape variables for every parameter of a store, created by
/// [`ParamStore::bind`].
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Bindings over externally created variables, one per parameter in
    /// registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings { vars }
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. New parameters start frozen.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(false);
        self.params.push(Param {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Sets `requires_grad` on exactly the parameters whose group is in the
    /// selector; every other parameter is frozen and its gradient dropped.
    pub fn mark_trainable<S: AsRef<str>>(&mut self, selector: &[S]) -> Result<()> {
        let groups = parse_groups(selector)?;
        self.mark_groups(&groups);
        Ok(())
    }

    pub fn mark_groups(&mut self, groups: &BTreeSet<ParamGroup>) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(groups.contains(&p.group));
        }
        self.grads_ready = false;
    }

    pub fn trainable_groups(&self) -> BTreeSet<ParamGroup> {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.group)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Records every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    /// Adds the tape's leaf gradients into the gradient slots of trainable
    /// parameters. Frozen parameters are left without a slot.
    pub fn collect_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.vars) {
            if !p.tensor.requires_grad() {
                continue;
            }
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g),
                None => p.tensor.accumulate_grad(&vec![0.0; p.tensor.len()]),
            }
        }
        self.grads_ready = true;
    }

    /// True once `collect_grads` ran since the last `clear_grads`.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
        self.grads_ready = false;
    }

    /// Copies of every parameter's values, in registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

/// Gradient-checks a scalar function of free `inputs` and every parameter of
/// `store`. The closure receives bindings whose variables are the
/// perturbed parameters.
pub fn grad_check_module<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    corrupt: Option<CorruptRule>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.params.iter().map(|p| p.tensor.clone()));
    grad_check_with(
        |tape, vars| {
            let bind = Bindings::from_vars(vars[n_in..].to_vec());
            f(tape, &bind, &vars[..n_in])
        },
        &all,
        eps,
        corrupt,
    )
}
