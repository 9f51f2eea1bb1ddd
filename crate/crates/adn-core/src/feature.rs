use serde::{Deserialize, Serialize};

use crate::schema::{AttributeKind, DatasetSchema, Value};

/// Stable identifier of a feature. Ids are assigned in insertion order and
/// never reused, so a composite's children always have smaller ids than the
/// composite itself. That ordering doubles as a topological order of the DAG.
pub type FeatureId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    /// Real attribute >= boundary.
    Geq,
    /// Real attribute <= boundary.
    Leq,
    /// Nominal attribute == category.
    Equals,
}

/// Atomic condition over one input attribute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributePredicate {
    pub attribute_index: usize,
    pub kind: PredicateKind,
    /// Boundary value v for Geq/Leq; category id (as f64) for Equals.
    pub boundary: f64,
}

impl AttributePredicate {
    pub fn geq(attribute_index: usize, v: f64) -> Self {
        AttributePredicate {
            attribute_index,
            kind: PredicateKind::Geq,
            boundary: v,
        }
    }

    pub fn leq(attribute_index: usize, v: f64) -> Self {
        AttributePredicate {
            attribute_index,
            kind: PredicateKind::Leq,
            boundary: v,
        }
    }

    pub fn equals(attribute_index: usize, category: u32) -> Self {
        AttributePredicate {
            attribute_index,
            kind: PredicateKind::Equals,
            boundary: category as f64,
        }
    }

    pub fn category(&self) -> u32 {
        self.boundary as u32
    }

    /// Discrete match against a value of the referenced attribute.
    pub fn matches(&self, value: &Value) -> Option<bool> {
        match (self.kind, value) {
            (PredicateKind::Geq, Value::Real(x)) => Some(*x >= self.boundary),
            (PredicateKind::Leq, Value::Real(x)) => Some(*x <= self.boundary),
            (PredicateKind::Equals, Value::Nominal(c)) => Some(*c == self.category()),
            _ => None,
        }
    }

    /// Kind compatibility with the schema: Geq/Leq on reals, Equals on nominals.
    pub fn valid_for(&self, schema: &DatasetSchema) -> bool {
        match schema.attributes.get(self.attribute_index) {
            Some((_, AttributeKind::Real)) => {
                matches!(self.kind, PredicateKind::Geq | PredicateKind::Leq)
            }
            Some((_, AttributeKind::Nominal(cats))) => {
                self.kind == PredicateKind::Equals && (self.category() as usize) < cats.len()
            }
            None => false,
        }
    }
}

/// Activation function of continuous features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    #[default]
    Tanh,
    Relu,
}

impl ActivationFn {
    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match self {
            ActivationFn::Tanh => z.tanh(),
            ActivationFn::Relu => z.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match self {
            ActivationFn::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationFn::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Continuous parameters of a feature (soft-logic or randomly initialized).
///
/// For a predicate atom `weights` holds the single input weight; for a dense
/// atom it spans the whole encoded input vector; for a composite it aligns
/// with the child list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub activation_fn: ActivationFn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureBody {
    /// Predicate over one attribute; binary in discrete mode.
    Atom(AttributePredicate),
    /// Continuous-only atom with dense weights over the encoded input.
    /// Produced by random initialization; has no discrete interpretation.
    DenseAtom,
    /// Conjunction of existing features.
    Composite(Vec<FeatureId>),
}

/// Node of the feature DAG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Feature {
    pub id: FeatureId,
    pub body: FeatureBody,
    /// Composites that list this feature as a child.
    #[serde(skip)]
    pub parents: Vec<FeatureId>,
    /// Instance counter at creation.
    pub creation_step: u64,
    /// Carried over from a source problem by transfer learning.
    pub kept: bool,
    /// Continuous parameters, present when the network runs in (or was
    /// converted to) continuous mode.
    pub soft: Option<SoftParams>,
}

impl Feature {
    pub fn is_atom(&self) -> bool {
        matches!(self.body, FeatureBody::Atom(_) | FeatureBody::DenseAtom)
    }

    pub fn is_composite(&self) -> bool {
        matches!(self.body, FeatureBody::Composite(_))
    }

    pub fn children(&self) -> &[FeatureId] {
        match &self.body {
            FeatureBody::Composite(ids) => ids,
            _ => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicate_matching() {
        let geq = AttributePredicate::geq(0, 0.5);
        assert_eq!(geq.matches(&Value::Real(0.7)), Some(true));
        assert_eq!(geq.matches(&Value::Real(0.5)), Some(true));
        assert_eq!(geq.matches(&Value::Real(0.49)), Some(false));
        assert_eq!(geq.matches(&Value::Nominal(1)), None);

        let leq = AttributePredicate::leq(0, 0.5);
        assert_eq!(leq.matches(&Value::Real(0.5)), Some(true));
        assert_eq!(leq.matches(&Value::Real(0.51)), Some(false));

        let eq = AttributePredicate::equals(2, 3);
        assert_eq!(eq.matches(&Value::Nominal(3)), Some(true));
        assert_eq!(eq.matches(&Value::Nominal(2)), Some(false));
        assert_eq!(eq.matches(&Value::Real(3.0)), None);
    }

    #[test]
    fn predicate_schema_validity() {
        let schema = DatasetSchema {
            attributes: vec![
                ("r".into(), AttributeKind::Real),
                (
                    "n".into(),
                    AttributeKind::Nominal(vec!["a".into(), "b".into()]),
                ),
            ],
            classes: vec!["0".into(), "1".into()],
        };
        assert!(AttributePredicate::geq(0, 0.3).valid_for(&schema));
        assert!(!AttributePredicate::geq(1, 0.3).valid_for(&schema));
        assert!(AttributePredicate::equals(1, 1).valid_for(&schema));
        assert!(!AttributePredicate::equals(1, 2).valid_for(&schema));
        assert!(!AttributePredicate::equals(0, 0).valid_for(&schema));
        assert!(!AttributePredicate::geq(5, 0.0).valid_for(&schema));
    }

    #[test]
    fn relu_and_tanh() {
        assert_eq!(ActivationFn::Relu.apply(-2.0), 0.0);
        assert_eq!(ActivationFn::Relu.apply(2.0), 2.0);
        assert_eq!(ActivationFn::Relu.derivative(-1.0), 0.0);
        assert_eq!(ActivationFn::Relu.derivative(1.0), 1.0);
        let z = 0.37;
        let t = ActivationFn::Tanh.apply(z);
        assert!((ActivationFn::Tanh.derivative(z) - (1.0 - t * t)).abs() < 1e-15);
    }
}
