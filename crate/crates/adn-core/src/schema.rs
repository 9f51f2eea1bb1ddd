use serde::{Deserialize, Serialize};

use crate::error::{AdnError, Result};

/// Kind of a dataset attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Real,
    /// Nominal attribute with its category labels, in id order.
    Nominal(Vec<String>),
}

impl AttributeKind {
    pub fn is_real(&self) -> bool {
        matches!(self, AttributeKind::Real)
    }
}

/// Declared shape of a dataset: ordered attributes plus the class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub attributes: Vec<(String, AttributeKind)>,
    pub classes: Vec<String>,
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(AdnError::SchemaMismatch("no attributes declared".into()));
        }
        if self.classes.len() < 2 {
            return Err(AdnError::SchemaMismatch(
                "at least two classes required".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(AdnError::SchemaMismatch(format!("duplicate class `{c}`")));
            }
        }
        for (name, kind) in &self.attributes {
            if let AttributeKind::Nominal(cats) = kind {
                let mut seen = std::collections::BTreeSet::new();
                for c in cats {
                    if !seen.insert(c) {
                        return Err(AdnError::SchemaMismatch(format!(
                            "duplicate category `{c}` in attribute `{name}`"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Schema for an n-bit binary problem: every attribute is NOMINAL{0,1},
    /// classes "0"/"1".
    pub fn binary(n_attrs: usize) -> Self {
        let cats = || AttributeKind::Nominal(vec!["0".into(), "1".into()]);
        DatasetSchema {
            attributes: (0..n_attrs).map(|i| (format!("b{i}"), cats())).collect(),
            classes: vec!["0".into(), "1".into()],
        }
    }

    /// Width of the continuous input encoding (reals 1 slot, nominals one-hot).
    pub fn encoded_width(&self) -> usize {
        self.attributes
            .iter()
            .map(|(_, k)| match k {
                AttributeKind::Real => 1,
                AttributeKind::Nominal(cats) => cats.len(),
            })
            .sum()
    }
}

/// A single attribute value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Nominal(u32),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            Value::Nominal(_) => None,
        }
    }
}

/// One observation: attribute vector plus class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub attrs: Vec<Value>,
    pub label: u32,
}

/// A loaded, typed dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Encode an instance into the continuous input vector: real attributes
    /// verbatim, nominal attributes one-hot.
    pub fn encode(schema: &DatasetSchema, inst: &Instance, out: &mut Vec<f64>) {
        out.clear();
        for ((_, kind), value) in schema.attributes.iter().zip(&inst.attrs) {
            match (kind, value) {
                (AttributeKind::Real, Value::Real(v)) => out.push(*v),
                (AttributeKind::Nominal(cats), Value::Nominal(id)) => {
                    for c in 0..cats.len() {
                        out.push(if c as u32 == *id { 1.0 } else { 0.0 });
                    }
                }
                // Mismatched kinds are rejected at load time; keep the
                // encoding total anyway.
                (AttributeKind::Real, Value::Nominal(id)) => out.push(*id as f64),
                (AttributeKind::Nominal(cats), Value::Real(_)) => {
                    out.extend(std::iter::repeat(0.0).take(cats.len()))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_schema_shape() {
        let s = DatasetSchema::binary(6);
        assert_eq!(s.attributes.len(), 6);
        assert_eq!(s.classes, vec!["0", "1"]);
        s.validate().unwrap();
        assert_eq!(s.encoded_width(), 12);
    }

    #[test]
    fn duplicate_class_rejected() {
        let s = DatasetSchema {
            attributes: vec![("a".into(), AttributeKind::Real)],
            classes: vec!["x".into(), "x".into()],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn one_hot_encoding() {
        let s = DatasetSchema {
            attributes: vec![
                ("r".into(), AttributeKind::Real),
                (
                    "n".into(),
                    AttributeKind::Nominal(vec!["a".into(), "b".into(), "c".into()]),
                ),
            ],
            classes: vec!["0".into(), "1".into()],
        };
        let inst = Instance {
            attrs: vec![Value::Real(0.25), Value::Nominal(1)],
            label: 0,
        };
        let mut enc = Vec::new();
        Dataset::encode(&s, &inst, &mut enc);
        assert_eq!(enc, vec![0.25, 0.0, 1.0, 0.0]);
    }
}
