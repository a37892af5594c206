//! Named parameter storage, freeze groups and graph binding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Which sub-module a parameter belongs to, taken from the first
/// component of its dotted name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Backbone,
    Attention,
    Classifier,
    Cvae,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Backbone, Role::Attention, Role::Classifier, Role::Cvae];

    pub fn prefix(self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::Attention => "attention",
            Role::Classifier => "classifier",
            Role::Cvae => "cvae",
        }
    }

    pub fn of(name: &str) -> Option<Role> {
        let head = name.split('.').next()?;
        Role::ALL.into_iter().find(|r| r.prefix() == head)
    }
}

/// Model side: the network being distilled into, or the frozen reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Student,
    Teacher,
}

/// Freeze groups. Every tensor belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    StudentBackbone,
    StudentAttention,
    StudentClassifier,
    StudentCvae,
    TeacherAll,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::StudentBackbone,
        ParamGroup::StudentAttention,
        ParamGroup::StudentClassifier,
        ParamGroup::StudentCvae,
        ParamGroup::TeacherAll,
    ];

    pub fn of(side: Side, role: Role) -> ParamGroup {
        match (side, role) {
            (Side::Teacher, _) => ParamGroup::TeacherAll,
            (Side::Student, Role::Backbone) => ParamGroup::StudentBackbone,
            (Side::Student, Role::Attention) => ParamGroup::StudentAttention,
            (Side::Student, Role::Classifier) => ParamGroup::StudentClassifier,
            (Side::Student, Role::Cvae) => ParamGroup::StudentCvae,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::StudentBackbone => "student_backbone",
            ParamGroup::StudentAttention => "student_attention",
            ParamGroup::StudentClassifier => "student_classifier",
            ParamGroup::StudentCvae => "student_cvae",
            ParamGroup::TeacherAll => "teacher_all",
        }
    }

    /// Stable on-disk tag.
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::StudentBackbone => 0,
            ParamGroup::StudentAttention => 1,
            ParamGroup::StudentClassifier => 2,
            ParamGroup::StudentCvae => 3,
            ParamGroup::TeacherAll => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown parameter group `{s}`")))
    }
}

/// Ordered, uniquely named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate or role-less names; both are programming errors.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(Role::of(&name).is_some(), "parameter `{name}` has no role prefix");
        assert!(self.get(&name).is_none(), "duplicate parameter `{name}`");
        self.entries.push((name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.entries.iter().any(|(n, _)| Role::of(n) == Some(role))
    }

    /// Drop every tensor of `role`.
    pub fn remove_role(&mut self, role: Role) {
        self.entries.retain(|(n, _)| Role::of(n) != Some(role));
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names and payload bytes of the tensors selected by `filter`.
    pub fn digest(&self, mut filter: impl FnMut(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            if filter(n) {
                h.update(n.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                h.update(t.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_role(&self, role: Role) -> [u8; 32] {
        self.digest(|n| Role::of(n) == Some(role))
    }

    pub fn digest_all(&self) -> [u8; 32] {
        self.digest(|_| true)
    }

    /// Insert every tensor as a graph leaf; roles for which `trainable`
    /// returns true become gradient-tracked params, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(Role) -> bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let train = trainable(Role::of(n).expect("checked on insert"));
                (n.clone(), g.leaf(t.clone(), train), train)
            })
            .collect();
        Binding { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<(String, Var, bool)>,
}

impl Binding {
    /// Assemble a binding from existing graph handles `(name, var, trainable)`.
    pub fn from_vars(vars: Vec<(String, Var, bool)>) -> Binding {
        Binding { vars }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _, _)| n.as_str())
    }

    /// Panics if `name` was not bound; network code only asks for names it created.
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _, _)| n == name).map(|(_, v, _)| *v)
    }

    /// Gradients of every trainable tensor, keyed by name.
    ///
    /// Fails if a trainable tensor received no gradient or a frozen tensor
    /// received one.
    pub fn gradients(&self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var, train) in &self.vars {
            match (grads.get(*var), *train) {
                (Some(g), true) => {
                    out.insert(name.clone(), g.clone());
                }
                (None, true) => {
                    return Err(Error::Invariant(format!("trainable parameter `{name}` received no gradient")));
                }
                (Some(_), false) => {
                    return Err(Error::Invariant(format!("frozen parameter `{name}` received a gradient")));
                }
                (None, false) => {}
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_from_names() {
        assert_eq!(Role::of("backbone.block0.kernel"), Some(Role::Backbone));
        assert_eq!(Role::of("cvae.enc_fc.weight"), Some(Role::Cvae));
        assert_eq!(Role::of("misc.weight"), None);
    }

    #[test]
    fn group_tags_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(ParamGroup::from_tag(g.tag()), Some(g));
            assert_eq!(g.as_str().parse::<ParamGroup>().unwrap(), g);
        }
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("cvae.a", Tensor::zeros([1]));
        p.insert("cvae.a", Tensor::zeros([1]));
    }

    #[test]
    fn binding_reports_frozen_and_trainable() {
        let mut p = ParamStore::new();
        p.insert("backbone.w", Tensor::ones([2]));
        p.insert("cvae.w", Tensor::ones([2]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, |r| r == Role::Cvae);
        let s1 = g.sum(b.var("backbone.w"));
        let s2 = g.sum(b.var("cvae.w"));
        let l = g.add(s1, s2).unwrap();
        let grads = g.backward(l).unwrap();
        let named = b.gradients(&grads).unwrap();
        assert_eq!(named.keys().collect::<Vec<_>>(), vec!["cvae.w"]);
    }

    #[test]
    fn unreachable_trainable_is_an_invariant_violation() {
        let mut p = ParamStore::new();
        p.insert("backbone.w", Tensor::ones([2]));
        p.insert("cvae.w", Tensor::ones([2]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| true);
        let l = g.sum(b.var("backbone.w"));
        let grads = g.backward(l).unwrap();
        assert!(matches!(b.gradients(&grads), Err(Error::Invariant(_))));
    }

    #[test]
    fn digest_tracks_contents() {
        let mut p = ParamStore::new();
        p.insert("backbone.w", Tensor::ones([2]));
        p.insert("cvae.w", Tensor::ones([2]));
        let before = p.digest_role(Role::Backbone);
        let cvae_before = p.digest_role(Role::Cvae);
        p.get_mut("cvae.w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(p.digest_role(Role::Backbone), before);
        assert_ne!(p.digest_role(Role::Cvae), cvae_before);
    }
}
