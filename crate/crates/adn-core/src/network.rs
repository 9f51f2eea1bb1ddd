use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{AdnError, Result};
use crate::feature::{
    ActivationFn, AttributePredicate, Feature, FeatureBody, FeatureId, PredicateKind, SoftParams,
};
use crate::schema::{Dataset, DatasetSchema, Instance, Value};

/// Output layer form. A two-class network may use a single logistic output;
/// softmax covers the general case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Softmax,
    /// Single output unit driving the class-1 logit of a two-class problem.
    Logistic,
}

/// Norm used for the selection value of a feature's classification weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    #[default]
    L1,
    L2,
}

/// One stored feature-class connection in sparse output mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseLink {
    pub class: u32,
    pub weight: f64,
    /// Insertion sequence number, used for oldest-first tie-breaks.
    pub created_seq: u64,
}

/// Per-feature output weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatWeights {
    /// One weight per output column.
    Dense(Vec<f64>),
    /// Only explicitly created links, sorted by class id.
    Sparse(Vec<SparseLink>),
}

impl FeatWeights {
    fn norm(&self, kind: WeightNorm) -> f64 {
        let it: Box<dyn Iterator<Item = f64> + '_> = match self {
            FeatWeights::Dense(w) => Box::new(w.iter().copied()),
            FeatWeights::Sparse(l) => Box::new(l.iter().map(|l| l.weight)),
        };
        match kind {
            WeightNorm::L1 => it.map(f64::abs).sum(),
            WeightNorm::L2 => it.map(|w| w * w).sum::<f64>().sqrt(),
        }
    }
}

/// Weights between features and classification nodes, plus per-class biases.
#[derive(Debug, Clone)]
pub struct OutputLayer {
    pub kind: OutputKind,
    /// Aligned with `FeatureNetwork::features`.
    per_feature: Vec<FeatWeights>,
    pub biases: Vec<f64>,
    /// 0 = dense output weights.
    pub sparse_limit: usize,
    link_count: usize,
    link_seq: u64,
}

impl OutputLayer {
    fn n_outputs(kind: OutputKind, n_classes: usize) -> usize {
        match kind {
            OutputKind::Softmax => n_classes,
            OutputKind::Logistic => 1,
        }
    }

    fn fresh_weights(&self, n_outputs: usize) -> FeatWeights {
        if self.sparse_limit > 0 {
            FeatWeights::Sparse(Vec::new())
        } else {
            FeatWeights::Dense(vec![0.0; n_outputs])
        }
    }
}

/// Per-instance record of feature activations and class scores.
#[derive(Debug, Clone, Default)]
pub struct ActivationState {
    /// Features matching the instance (discrete mode).
    pub active: BTreeSet<FeatureId>,
    /// Real-valued activations (continuous mode).
    pub values: BTreeMap<FeatureId, f64>,
    /// Class posteriors from the most recent classification.
    pub class_scores: Vec<f64>,
}

/// Classification outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_scores: Vec<f64>,
    pub argmax_class: u32,
}

/// Per-feature selection values (the removal criterion).
#[derive(Debug, Clone, Default)]
pub struct Fitness {
    pub values: BTreeMap<FeatureId, f64>,
}

impl Fitness {
    pub fn get(&self, id: FeatureId) -> f64 {
        self.values.get(&id).copied().unwrap_or(0.0)
    }
}

/// Reusable per-instance buffers. Owning one across a training run avoids
/// per-instance allocation.
#[derive(Debug, Default)]
pub struct Scratch {
    pub active: Vec<bool>,
    counters: Vec<u32>,
    /// Positions (not ids) of active features, ascending.
    pub active_pos: Vec<usize>,
    pub values: Vec<f64>,
    pub scores: Vec<f64>,
    pub enc: Vec<f64>,
    stack: Vec<usize>,
}

/// Accumulates averaged output-layer updates over a mini-batch.
#[derive(Debug, Default)]
pub struct MinibatchCtx {
    pub size: usize,
    count: usize,
    acc_w: BTreeMap<(FeatureId, usize), f64>,
    acc_b: Vec<f64>,
}

impl MinibatchCtx {
    pub fn new(size: usize) -> Self {
        MinibatchCtx {
            size: size.max(1),
            ..Default::default()
        }
    }
}

/// The feature population: a DAG of conjunctive features plus the output
/// layer. All mutation funnels through the owning training loop; read-only
/// evaluation is safe to share between threads.
#[derive(Debug, Clone)]
pub struct FeatureNetwork {
    pub schema: DatasetSchema,
    /// Sorted by id ascending. Children always precede parents, so this
    /// order is topological.
    features: Vec<Feature>,
    pub output: OutputLayer,
    pub weight_norm: WeightNorm,
    /// Set once any feature carries tuned continuous parameters.
    pub continuous: bool,
    next_id: FeatureId,
    n_atoms: usize,
    n_composites: usize,
    /// Positions of atoms, ascending.
    atom_pos: Vec<usize>,
}

impl FeatureNetwork {
    pub fn new(schema: DatasetSchema, kind: OutputKind, sparse_limit: usize) -> Result<Self> {
        schema.validate()?;
        if kind == OutputKind::Logistic && schema.n_classes() != 2 {
            return Err(AdnError::InvalidConfig(
                "logistic output requires exactly two classes".into(),
            ));
        }
        let n_outputs = OutputLayer::n_outputs(kind, schema.n_classes());
        Ok(FeatureNetwork {
            schema,
            features: Vec::new(),
            output: OutputLayer {
                kind,
                per_feature: Vec::new(),
                biases: vec![0.0; n_outputs],
                sparse_limit,
                link_count: 0,
                link_seq: 0,
            },
            weight_norm: WeightNorm::L1,
            continuous: false,
            next_id: 0,
            n_atoms: 0,
            n_composites: 0,
            atom_pos: Vec::new(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.schema.n_classes()
    }

    pub fn n_outputs(&self) -> usize {
        self.output.biases.len()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn n_composites(&self) -> usize {
        self.n_composites
    }

    pub fn link_count(&self) -> usize {
        self.output.link_count
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn pos_of(&self, id: FeatureId) -> Option<usize> {
        self.features.binary_search_by_key(&id, |f| f.id).ok()
    }

    pub fn feature(&self, id: FeatureId) -> Option<&Feature> {
        self.pos_of(id).map(|p| &self.features[p])
    }

    pub fn feature_mut(&mut self, id: FeatureId) -> Option<&mut Feature> {
        let p = self.pos_of(id)?;
        Some(&mut self.features[p])
    }

    pub fn weights_of(&self, id: FeatureId) -> Option<&FeatWeights> {
        self.pos_of(id).map(|p| &self.output.per_feature[p])
    }

    /// Stored weight for (feature, output column); absent sparse links read 0.
    pub fn weight(&self, id: FeatureId, col: usize) -> f64 {
        match self.weights_of(id) {
            Some(FeatWeights::Dense(w)) => w.get(col).copied().unwrap_or(0.0),
            Some(FeatWeights::Sparse(links)) => links
                .iter()
                .find(|l| l.class as usize == col)
                .map(|l| l.weight)
                .unwrap_or(0.0),
            None => 0.0,
        }
    }

    pub fn set_weight(&mut self, id: FeatureId, col: usize, value: f64) {
        let pos = self.pos_of(id).expect("unknown feature id");
        match &mut self.output.per_feature[pos] {
            FeatWeights::Dense(w) => w[col] = value,
            FeatWeights::Sparse(links) => {
                if let Some(l) = links.iter_mut().find(|l| l.class as usize == col) {
                    l.weight = value;
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Construction
    // ------------------------------------------------------------------

    fn push_feature(&mut self, body: FeatureBody, creation_step: u64, soft: Option<SoftParams>) -> FeatureId {
        let id = self.next_id;
        self.next_id += 1;
        let n_outputs = self.n_outputs();
        let is_atom = !matches!(body, FeatureBody::Composite(_));
        if let FeatureBody::Composite(children) = &body {
            for &c in children {
                let pos = self.pos_of(c).expect("child must exist");
                self.features[pos].parents.push(id);
            }
        }
        let fresh = self.output.fresh_weights(n_outputs);
        self.features.push(Feature {
            id,
            body,
            parents: Vec::new(),
            creation_step,
            kept: false,
            soft,
        });
        self.output.per_feature.push(fresh);
        if is_atom {
            self.n_atoms += 1;
            self.atom_pos.push(self.features.len() - 1);
        } else {
            self.n_composites += 1;
        }
        id
    }

    /// Add an atomic feature. The predicate must fit the schema.
    pub fn insert_atom(&mut self, pred: AttributePredicate, creation_step: u64) -> Result<FeatureId> {
        if !pred.valid_for(&self.schema) {
            return Err(AdnError::SchemaMismatch(format!(
                "predicate on attribute {} incompatible with schema",
                pred.attribute_index
            )));
        }
        Ok(self.push_feature(FeatureBody::Atom(pred), creation_step, None))
    }

    /// Add a continuous-only atom with dense weights over the encoded input.
    pub fn insert_dense_atom(&mut self, soft: SoftParams, creation_step: u64) -> FeatureId {
        self.continuous = true;
        self.push_feature(FeatureBody::DenseAtom, creation_step, Some(soft))
    }

    /// Add a composite of existing, distinct features.
    pub fn insert_composite(
        &mut self,
        children: Vec<FeatureId>,
        creation_step: u64,
        soft: Option<SoftParams>,
    ) -> Result<FeatureId> {
        if children.len() < 2 {
            return Err(AdnError::InternalInvariant(
                "composite needs at least two children".into(),
            ));
        }
        let mut sorted = children.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(AdnError::InternalInvariant(
                "composite children must be distinct".into(),
            ));
        }
        for &c in &children {
            if self.pos_of(c).is_none() {
                return Err(AdnError::InternalInvariant(format!(
                    "composite child {c} does not exist"
                )));
            }
        }
        if self.is_duplicate(&children) {
            return Err(AdnError::InternalInvariant(
                "duplicate composite child multiset".into(),
            ));
        }
        if soft.is_some() {
            self.continuous = true;
        }
        Ok(self.push_feature(FeatureBody::Composite(children), creation_step, soft))
    }

    /// True iff an existing composite has this exact child multiset. Only
    /// next-level parents of the candidate children are scanned; any
    /// duplicate is necessarily a parent of its own children, so the scan
    /// is equivalent to a global one.
    pub fn is_duplicate(&self, child_ids: &[FeatureId]) -> bool {
        if child_ids.is_empty() {
            return false;
        }
        let mut want: Vec<FeatureId> = child_ids.to_vec();
        want.sort_unstable();
        let first = match self.feature(child_ids[0]) {
            Some(f) => f,
            None => return false,
        };
        for &pid in &first.parents {
            if let Some(parent) = self.feature(pid) {
                let mut have: Vec<FeatureId> = parent.children().to_vec();
                have.sort_unstable();
                if have == want {
                    return true;
                }
            }
        }
        false
    }

    /// Find an existing atom with the same predicate.
    pub fn find_atom(&self, pred: &AttributePredicate) -> Option<FeatureId> {
        self.atom_pos.iter().find_map(|&p| {
            let f = &self.features[p];
            match &f.body {
                FeatureBody::Atom(q)
                    if q.attribute_index == pred.attribute_index
                        && q.kind == pred.kind
                        && q.boundary.to_bits() == pred.boundary.to_bits() =>
                {
                    Some(f.id)
                }
                _ => None,
            }
        })
    }

    /// Find the existing composite with this exact child multiset, if any.
    pub fn find_composite(&self, child_ids: &[FeatureId]) -> Option<FeatureId> {
        let mut want: Vec<FeatureId> = child_ids.to_vec();
        want.sort_unstable();
        let first = self.feature(*child_ids.first()?)?;
        for &pid in &first.parents {
            let parent = self.feature(pid)?;
            let mut have: Vec<FeatureId> = parent.children().to_vec();
            have.sort_unstable();
            if have == want {
                return Some(pid);
            }
        }
        None
    }

    /// Remove the given features. The caller supplies the full set including
    /// transitive parents; dangling references are rejected.
    pub fn remove_features(&mut self, ids: &BTreeSet<FeatureId>) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        for f in &self.features {
            if !ids.contains(&f.id) && f.children().iter().any(|c| ids.contains(c)) {
                return Err(AdnError::InternalInvariant(format!(
                    "removal would orphan composite {}",
                    f.id
                )));
            }
        }
        let mut kept_features = Vec::with_capacity(self.features.len() - ids.len());
        let mut kept_weights = Vec::with_capacity(kept_features.capacity());
        let mut removed_links = 0usize;
        for (f, w) in self.features.drain(..).zip(self.output.per_feature.drain(..)) {
            if ids.contains(&f.id) {
                if let FeatWeights::Sparse(links) = &w {
                    removed_links += links.len();
                }
            } else {
                kept_features.push(f);
                kept_weights.push(w);
            }
        }
        self.features = kept_features;
        self.output.per_feature = kept_weights;
        self.output.link_count -= removed_links;
        for f in &mut self.features {
            f.parents.retain(|p| !ids.contains(p));
        }
        self.rebuild_caches();
        Ok(())
    }

    fn rebuild_caches(&mut self) {
        self.n_atoms = 0;
        self.n_composites = 0;
        self.atom_pos.clear();
        for (pos, f) in self.features.iter().enumerate() {
            if f.is_atom() {
                self.n_atoms += 1;
                self.atom_pos.push(pos);
            } else {
                self.n_composites += 1;
            }
        }
    }

    /// All transitive parents of `id`, including `id` itself.
    pub fn parent_closure(&self, id: FeatureId) -> BTreeSet<FeatureId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(x) = stack.pop() {
            if out.insert(x) {
                if let Some(f) = self.feature(x) {
                    stack.extend(f.parents.iter().copied());
                }
            }
        }
        out
    }

    /// Longest child chain down to an atom; atoms have depth 0.
    pub fn depth_of(&self, id: FeatureId) -> usize {
        // Features are topologically ordered by id, so one ascending pass
        // bounded at `id` suffices.
        let mut depth: BTreeMap<FeatureId, usize> = BTreeMap::new();
        for f in &self.features {
            if f.id > id {
                break;
            }
            let d = match &f.body {
                FeatureBody::Composite(children) => {
                    1 + children
                        .iter()
                        .map(|c| depth.get(c).copied().unwrap_or(0))
                        .max()
                        .unwrap_or(0)
                }
                _ => 0,
            };
            depth.insert(f.id, d);
        }
        depth.get(&id).copied().unwrap_or(0)
    }

    /// Depths for every feature in one pass.
    pub fn depths(&self) -> BTreeMap<FeatureId, usize> {
        let mut depth: BTreeMap<FeatureId, usize> = BTreeMap::new();
        for f in &self.features {
            let d = match &f.body {
                FeatureBody::Composite(children) => {
                    1 + children
                        .iter()
                        .map(|c| depth.get(c).copied().unwrap_or(0))
                        .max()
                        .unwrap_or(0)
                }
                _ => 0,
            };
            depth.insert(f.id, d);
        }
        depth
    }

    // ------------------------------------------------------------------
    // Discrete activation
    // ------------------------------------------------------------------

    fn check_instance(&self, instance: &Instance) -> Result<()> {
        if instance.attrs.len() != self.schema.attributes.len() {
            return Err(AdnError::SchemaMismatch(format!(
                "instance has {} attributes, schema declares {}",
                instance.attrs.len(),
                self.schema.attributes.len()
            )));
        }
        Ok(())
    }

    /// Selective bottom-up activation: atoms are tested against the
    /// instance, and activity propagates upward through counters. A
    /// composite is evaluated (activated) only when all of its children are
    /// active; parents of an inactive feature are never reached from it.
    pub fn activate_discrete_into(&self, instance: &Instance, scratch: &mut Scratch) -> Result<()> {
        self.check_instance(instance)?;
        let n = self.features.len();
        scratch.active.clear();
        scratch.active.resize(n, false);
        scratch.counters.clear();
        scratch.counters.resize(n, 0);
        scratch.active_pos.clear();
        scratch.stack.clear();

        for &pos in &self.atom_pos {
            let f = &self.features[pos];
            let on = match &f.body {
                FeatureBody::Atom(pred) => {
                    let value = instance.attrs.get(pred.attribute_index).ok_or_else(|| {
                        AdnError::SchemaMismatch(format!(
                            "predicate attribute {} out of range",
                            pred.attribute_index
                        ))
                    })?;
                    pred.matches(value).ok_or_else(|| {
                        AdnError::SchemaMismatch(format!(
                            "predicate kind incompatible with attribute {}",
                            pred.attribute_index
                        ))
                    })?
                }
                FeatureBody::DenseAtom => {
                    return Err(AdnError::InternalInvariant(
                        "dense atom has no discrete interpretation".into(),
                    ))
                }
                FeatureBody::Composite(_) => unreachable!("atom cache holds only atoms"),
            };
            if on {
                scratch.active[pos] = true;
                scratch.stack.push(pos);
            }
        }

        while let Some(pos) = scratch.stack.pop() {
            // Iterate a raw index to appease the borrow checker; parents may
            // push further work.
            let parent_count = self.features[pos].parents.len();
            for i in 0..parent_count {
                let pid = self.features[pos].parents[i];
                let ppos = self
                    .pos_of(pid)
                    .ok_or_else(|| AdnError::InternalInvariant("dangling parent id".into()))?;
                scratch.counters[ppos] += 1;
                let n_children = self.features[ppos].children().len() as u32;
                if scratch.counters[ppos] == n_children && !scratch.active[ppos] {
                    scratch.active[ppos] = true;
                    scratch.stack.push(ppos);
                }
            }
        }

        scratch.active_pos.extend(
            scratch
                .active
                .iter()
                .enumerate()
                .filter_map(|(p, a)| a.then_some(p)),
        );
        Ok(())
    }

    /// Spec-shaped wrapper returning a fresh activation state.
    pub fn activate_discrete(&self, instance: &Instance) -> Result<ActivationState> {
        let mut scratch = Scratch::default();
        self.activate_discrete_into(instance, &mut scratch)?;
        let mut state = ActivationState::default();
        for &pos in &scratch.active_pos {
            state.active.insert(self.features[pos].id);
        }
        Ok(state)
    }

    // ------------------------------------------------------------------
    // Continuous forward pass
    // ------------------------------------------------------------------

    /// Full bottom-up pass: every feature is evaluated in topological order
    /// with its activation function. `scratch.enc` must hold the encoded
    /// input (see `Dataset::encode`).
    pub fn forward_continuous_into(&self, instance: &Instance, scratch: &mut Scratch) -> Result<()> {
        self.check_instance(instance)?;
        Dataset::encode(&self.schema, instance, &mut scratch.enc);
        let n = self.features.len();
        scratch.values.clear();
        scratch.values.resize(n, 0.0);
        for pos in 0..n {
            let f = &self.features[pos];
            let v = match &f.body {
                FeatureBody::Atom(pred) => match pred.kind {
                    PredicateKind::Equals => {
                        let value = instance.attrs.get(pred.attribute_index).ok_or_else(|| {
                            AdnError::SchemaMismatch("predicate attribute out of range".into())
                        })?;
                        match pred.matches(value) {
                            Some(true) => 1.0,
                            Some(false) => 0.0,
                            None => {
                                return Err(AdnError::SchemaMismatch(
                                    "equals predicate on non-nominal attribute".into(),
                                ))
                            }
                        }
                    }
                    PredicateKind::Geq | PredicateKind::Leq => {
                        let soft = f.soft.as_ref().ok_or_else(|| {
                            AdnError::InternalInvariant(format!(
                                "feature {} lacks continuous parameters",
                                f.id
                            ))
                        })?;
                        let x = instance
                            .attrs
                            .get(pred.attribute_index)
                            .and_then(Value::as_real)
                            .ok_or_else(|| {
                                AdnError::SchemaMismatch(
                                    "inequality predicate on non-real attribute".into(),
                                )
                            })?;
                        soft.activation_fn.apply(soft.weights[0] * x + soft.bias)
                    }
                },
                FeatureBody::DenseAtom => {
                    let soft = f.soft.as_ref().ok_or_else(|| {
                        AdnError::InternalInvariant("dense atom lacks parameters".into())
                    })?;
                    let z: f64 = soft
                        .weights
                        .iter()
                        .zip(&scratch.enc)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
                        + soft.bias;
                    soft.activation_fn.apply(z)
                }
                FeatureBody::Composite(children) => {
                    let soft = f.soft.as_ref().ok_or_else(|| {
                        AdnError::InternalInvariant(format!(
                            "composite {} lacks continuous parameters",
                            f.id
                        ))
                    })?;
                    let mut z = soft.bias;
                    for (w, &c) in soft.weights.iter().zip(children) {
                        let cpos = self.pos_of(c).ok_or_else(|| {
                            AdnError::InternalInvariant("dangling child id".into())
                        })?;
                        z += w * scratch.values[cpos];
                    }
                    soft.activation_fn.apply(z)
                }
            };
            scratch.values[pos] = v;
        }
        Ok(())
    }

    /// Spec-shaped wrapper returning a fresh activation state.
    pub fn forward_continuous(&self, instance: &Instance) -> Result<ActivationState> {
        let mut scratch = Scratch::default();
        self.forward_continuous_into(instance, &mut scratch)?;
        let mut state = ActivationState::default();
        for (pos, f) in self.features.iter().enumerate() {
            state.values.insert(f.id, scratch.values[pos]);
        }
        Ok(state)
    }

    // ------------------------------------------------------------------
    // Classification
    // ------------------------------------------------------------------

    fn logits_into(&self, scratch: &mut Scratch, continuous: bool) -> Vec<f64> {
        let mut z = self.output.biases.clone();
        if continuous {
            for (pos, w) in self.output.per_feature.iter().enumerate() {
                let a = scratch.values[pos];
                if a != 0.0 {
                    accumulate(&mut z, w, a);
                }
            }
        } else {
            for &pos in &scratch.active_pos {
                accumulate(&mut z, &self.output.per_feature[pos], 1.0);
            }
        }
        z
    }

    fn scores_from_logits(&self, logits: &[f64], scores: &mut Vec<f64>) {
        scores.clear();
        match self.output.kind {
            OutputKind::Softmax => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for &z in logits {
                    let e = (z - max).exp();
                    scores.push(e);
                    sum += e;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
            }
            OutputKind::Logistic => {
                let p = sigmoid(logits[0]);
                scores.push(1.0 - p);
                scores.push(p);
            }
        }
    }

    /// Class scores from the activations recorded in `scratch`.
    /// `continuous` selects real-valued activations over the active set.
    pub fn classify_into(&self, scratch: &mut Scratch, continuous: bool) -> Prediction {
        let logits = self.logits_into(scratch, continuous);
        let mut scores = std::mem::take(&mut scratch.scores);
        self.scores_from_logits(&logits, &mut scores);
        let argmax = argmax_lowest(&scores);
        scratch.scores = scores.clone();
        Prediction {
            class_scores: scores,
            argmax_class: argmax,
        }
    }

    /// Spec-shaped classification over a previously computed state. Scores
    /// are recorded back into the state.
    pub fn classify(&self, state: &mut ActivationState) -> Prediction {
        let mut logits = self.output.biases.clone();
        if !state.values.is_empty() {
            for (id, &a) in &state.values {
                if a != 0.0 {
                    if let Some(w) = self.weights_of(*id) {
                        accumulate(&mut logits, w, a);
                    }
                }
            }
        } else {
            for id in &state.active {
                if let Some(w) = self.weights_of(*id) {
                    accumulate(&mut logits, w, 1.0);
                }
            }
        }
        let mut scores = Vec::new();
        self.scores_from_logits(&logits, &mut scores);
        state.class_scores = scores.clone();
        Prediction {
            class_scores: scores,
            argmax_class: argmax_lowest(&scores),
        }
    }

    /// Cross-entropy loss of the recorded scores against a target class.
    pub fn loss(scores: &[f64], target: u32) -> f64 {
        -(scores[target as usize].max(1e-300)).ln()
    }

    // ------------------------------------------------------------------
    // Output-layer learning
    // ------------------------------------------------------------------

    /// Per-output error derivatives dL/dz from recorded scores.
    pub fn output_deltas(&self, scores: &[f64], target: u32) -> Vec<f64> {
        match self.output.kind {
            OutputKind::Softmax => scores
                .iter()
                .enumerate()
                .map(|(c, p)| p - if c as u32 == target { 1.0 } else { 0.0 })
                .collect(),
            OutputKind::Logistic => {
                let y = if target == 1 { 1.0 } else { 0.0 };
                vec![scores[1] - y]
            }
        }
    }

    /// Per-class deltas (score minus one-hot target), independent of output
    /// kind; used for sparse-link class sampling.
    pub fn class_deltas(scores: &[f64], target: u32) -> Vec<f64> {
        scores
            .iter()
            .enumerate()
            .map(|(c, p)| p - if c as u32 == target { 1.0 } else { 0.0 })
            .collect()
    }

    /// One cross-entropy gradient step on the output weights of the
    /// activated features (discrete: the active set with unit activations;
    /// continuous: all features with their real activations) and on the
    /// biases. With a mini-batch context larger than 1, updates are averaged
    /// over the batch before application.
    pub fn output_layer_step(
        &mut self,
        scratch: &Scratch,
        continuous: bool,
        target: u32,
        learning_rate: f64,
        minibatch: &mut MinibatchCtx,
    ) {
        debug_assert!(learning_rate > 0.0);
        let deltas = self.output_deltas(&scratch.scores, target);
        if minibatch.size <= 1 {
            self.apply_output_grads(scratch, continuous, &deltas, learning_rate);
            return;
        }
        if minibatch.acc_b.len() != deltas.len() {
            minibatch.acc_b = vec![0.0; deltas.len()];
        }
        for (b, d) in minibatch.acc_b.iter_mut().zip(&deltas) {
            *b += d;
        }
        let record = |acc: &mut BTreeMap<(FeatureId, usize), f64>, id: FeatureId, a: f64, w: &FeatWeights, deltas: &[f64]| match w {
            FeatWeights::Dense(ws) => {
                for c in 0..ws.len() {
                    *acc.entry((id, c)).or_insert(0.0) += deltas[c] * a;
                }
            }
            FeatWeights::Sparse(links) => {
                for l in links {
                    *acc.entry((id, l.class as usize)).or_insert(0.0) +=
                        delta_for(self.output.kind, deltas, l.class as usize) * a;
                }
            }
        };
        if continuous {
            for (pos, w) in self.output.per_feature.iter().enumerate() {
                let a = scratch.values[pos];
                if a != 0.0 {
                    record(&mut minibatch.acc_w, self.features[pos].id, a, w, &deltas);
                }
            }
        } else {
            for &pos in &scratch.active_pos {
                record(
                    &mut minibatch.acc_w,
                    self.features[pos].id,
                    1.0,
                    &self.output.per_feature[pos],
                    &deltas,
                );
            }
        }
        minibatch.count += 1;
        if minibatch.count >= minibatch.size {
            let scale = learning_rate / minibatch.count as f64;
            let acc = std::mem::take(&mut minibatch.acc_w);
            for ((id, col), g) in acc {
                if let Some(pos) = self.pos_of(id) {
                    match &mut self.output.per_feature[pos] {
                        FeatWeights::Dense(ws) => ws[col] -= scale * g,
                        FeatWeights::Sparse(links) => {
                            if let Some(l) = links.iter_mut().find(|l| l.class as usize == col) {
                                l.weight -= scale * g;
                            }
                        }
                    }
                }
            }
            for (b, g) in self.output.biases.iter_mut().zip(&minibatch.acc_b) {
                *b -= scale * g;
            }
            minibatch.acc_b.clear();
            minibatch.count = 0;
        }
    }

    fn apply_output_grads(
        &mut self,
        scratch: &Scratch,
        continuous: bool,
        deltas: &[f64],
        learning_rate: f64,
    ) {
        let kind = self.output.kind;
        let mut touch = |w: &mut FeatWeights, a: f64| match w {
            FeatWeights::Dense(ws) => {
                for (c, w) in ws.iter_mut().enumerate() {
                    *w -= learning_rate * deltas[c] * a;
                }
            }
            FeatWeights::Sparse(links) => {
                for l in links.iter_mut() {
                    l.weight -= learning_rate * delta_for(kind, deltas, l.class as usize) * a;
                }
            }
        };
        if continuous {
            for (pos, w) in self.output.per_feature.iter_mut().enumerate() {
                let a = scratch.values[pos];
                if a != 0.0 {
                    touch(w, a);
                }
            }
        } else {
            for &pos in &scratch.active_pos {
                touch(&mut self.output.per_feature[pos], 1.0);
            }
        }
        for (b, d) in self.output.biases.iter_mut().zip(deltas) {
            *b -= learning_rate * d;
        }
    }

    // ------------------------------------------------------------------
    // Selection values
    // ------------------------------------------------------------------

    /// Selection value of every feature: the maximum of its own output
    /// weight norm and the values of all its parents, computed in one
    /// top-down pass (parents are finalized before their children because
    /// ids ascend from children to parents).
    pub fn compute_fitness(&self) -> Result<Fitness> {
        let n = self.features.len();
        let mut vals = vec![0.0f64; n];
        for pos in (0..n).rev() {
            let f = &self.features[pos];
            for &c in f.children() {
                if c >= f.id {
                    return Err(AdnError::InternalInvariant(format!(
                        "cycle suspected: composite {} lists child {}",
                        f.id, c
                    )));
                }
            }
            let mut v = self.output.per_feature[pos].norm(self.weight_norm);
            for &p in &f.parents {
                let ppos = self
                    .pos_of(p)
                    .ok_or_else(|| AdnError::InternalInvariant("dangling parent id".into()))?;
                debug_assert!(ppos > pos);
                v = v.max(vals[ppos]);
            }
            vals[pos] = v;
        }
        let mut out = Fitness::default();
        for (pos, f) in self.features.iter().enumerate() {
            out.values.insert(f.id, vals[pos]);
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Sparse feature-class links
    // ------------------------------------------------------------------

    /// Create the (feature, class) link if absent. Returns true when a new
    /// link was stored.
    pub fn add_sparse_link(&mut self, id: FeatureId, class: u32) -> bool {
        let pos = match self.pos_of(id) {
            Some(p) => p,
            None => return false,
        };
        let seq = self.output.link_seq;
        match &mut self.output.per_feature[pos] {
            FeatWeights::Sparse(links) => {
                if links.iter().any(|l| l.class == class) {
                    return false;
                }
                links.push(SparseLink {
                    class,
                    weight: 0.0,
                    created_seq: seq,
                });
                links.sort_by_key(|l| l.class);
                self.output.link_seq += 1;
                self.output.link_count += 1;
                true
            }
            FeatWeights::Dense(_) => false,
        }
    }

    /// Remove lowest-|weight| links (oldest first on ties) until the count
    /// is within the limit. Returns the removed links.
    pub fn trim_sparse_links(&mut self) -> Vec<(FeatureId, u32)> {
        let limit = self.output.sparse_limit;
        if limit == 0 || self.output.link_count <= limit {
            return Vec::new();
        }
        let mut all: Vec<(f64, u64, FeatureId, u32)> = Vec::with_capacity(self.output.link_count);
        for (pos, w) in self.output.per_feature.iter().enumerate() {
            if let FeatWeights::Sparse(links) = w {
                for l in links {
                    all.push((l.weight.abs(), l.created_seq, self.features[pos].id, l.class));
                }
            }
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let excess = all.len() - limit;
        let victims: Vec<(FeatureId, u32)> = all[..excess].iter().map(|v| (v.2, v.3)).collect();
        for &(id, class) in &victims {
            let pos = self.pos_of(id).unwrap();
            if let FeatWeights::Sparse(links) = &mut self.output.per_feature[pos] {
                links.retain(|l| l.class != class);
            }
        }
        self.output.link_count -= victims.len();
        victims
    }
}

#[inline]
fn accumulate(logits: &mut [f64], w: &FeatWeights, a: f64) {
    match w {
        FeatWeights::Dense(ws) => {
            for (z, w) in logits.iter_mut().zip(ws) {
                *z += w * a;
            }
        }
        FeatWeights::Sparse(links) => {
            for l in links {
                // In logistic mode links target class 1 through column 0.
                let col = if logits.len() == 1 { 0 } else { l.class as usize };
                logits[col] += l.weight * a;
            }
        }
    }
}

/// dL/dz for the output column a sparse link of `class` feeds.
#[inline]
fn delta_for(kind: OutputKind, deltas: &[f64], class: usize) -> f64 {
    match kind {
        OutputKind::Softmax => deltas[class],
        OutputKind::Logistic => deltas[0],
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Argmax with ties broken by the lowest class id.
pub fn argmax_lowest(scores: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Instance;

    fn binary_net(n: usize) -> FeatureNetwork {
        FeatureNetwork::new(DatasetSchema::binary(n), OutputKind::Softmax, 0).unwrap()
    }

    fn inst(bits: &[u32]) -> Instance {
        Instance {
            attrs: bits.iter().map(|&b| Value::Nominal(b)).collect(),
            label: 0,
        }
    }

    #[test]
    fn atom_activation_matches_predicate() {
        let schema = DatasetSchema {
            attributes: vec![("x".into(), crate::schema::AttributeKind::Real)],
            classes: vec!["0".into(), "1".into()],
        };
        let mut net = FeatureNetwork::new(schema, OutputKind::Softmax, 0).unwrap();
        let a = net.insert_atom(AttributePredicate::geq(0, 0.5), 0).unwrap();
        let state = net
            .activate_discrete(&Instance {
                attrs: vec![Value::Real(0.7)],
                label: 0,
            })
            .unwrap();
        assert!(state.active.contains(&a));
    }

    #[test]
    fn composite_needs_all_children() {
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let b = net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        let c = net.insert_composite(vec![a, b], 0, None).unwrap();
        let state = net.activate_discrete(&inst(&[1, 0])).unwrap();
        assert!(state.active.contains(&a));
        assert!(!state.active.contains(&b));
        assert!(!state.active.contains(&c));
        let state = net.activate_discrete(&inst(&[1, 1])).unwrap();
        assert!(state.active.contains(&c));
    }

    #[test]
    fn parents_of_inactive_child_not_evaluated() {
        // Composite above an inactive child must keep a zero counter path:
        // activation equivalence is covered by the brute-force oracle test;
        // here we check the schema error path and the at-most-once guard.
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let b = net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        let c = net.insert_composite(vec![a, b], 0, None).unwrap();
        let _d = net.insert_composite(vec![a, c], 0, None).unwrap();
        let state = net.activate_discrete(&inst(&[1, 1])).unwrap();
        assert_eq!(state.active.len(), 4);
    }

    #[test]
    fn attribute_out_of_range_is_schema_error() {
        let mut net = binary_net(2);
        net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        let bad = Instance {
            attrs: vec![Value::Nominal(1)],
            label: 0,
        };
        assert!(matches!(
            net.activate_discrete(&bad),
            Err(AdnError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let schema = DatasetSchema {
            attributes: vec![("x".into(), crate::schema::AttributeKind::Real)],
            classes: vec!["a".into(), "b".into(), "c".into()],
        };
        let mut net = FeatureNetwork::new(schema, OutputKind::Softmax, 0).unwrap();
        net.insert_atom(AttributePredicate::geq(0, 0.0), 0).unwrap();
        let mut state = net
            .activate_discrete(&Instance {
                attrs: vec![Value::Real(0.5)],
                label: 0,
            })
            .unwrap();
        let pred = net.classify(&mut state);
        for s in &pred.class_scores {
            assert!((s - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(pred.argmax_class, 0);
    }

    #[test]
    fn dominant_weight_wins() {
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        net.set_weight(a, 0, 10.0); // logit column for class... softmax col 0
        let mut state = net.activate_discrete(&inst(&[1, 0])).unwrap();
        let pred = net.classify(&mut state);
        assert_eq!(pred.argmax_class, 0);
        net.set_weight(a, 0, 0.0);
        net.set_weight(a, 1, 10.0);
        let mut state = net.activate_discrete(&inst(&[1, 0])).unwrap();
        let pred = net.classify(&mut state);
        assert_eq!(pred.argmax_class, 1);
    }

    #[test]
    fn output_step_moves_target_weight_up() {
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let mut scratch = Scratch::default();
        net.activate_discrete_into(&inst(&[1, 0]), &mut scratch).unwrap();
        net.classify_into(&mut scratch, false);
        let before = net.weight(a, 0);
        let mut mb = MinibatchCtx::new(1);
        net.output_layer_step(&scratch, false, 0, 0.1, &mut mb);
        assert!(net.weight(a, 0) > before);
    }

    #[test]
    fn minibatch_of_identical_instances_equals_single_step() {
        let mut net1 = binary_net(2);
        let a1 = net1.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let mut net2 = net1.clone();
        let mut scratch = Scratch::default();

        net1.activate_discrete_into(&inst(&[1, 0]), &mut scratch).unwrap();
        net1.classify_into(&mut scratch, false);
        let mut mb1 = MinibatchCtx::new(1);
        net1.output_layer_step(&scratch, false, 0, 0.1, &mut mb1);

        let mut mb2 = MinibatchCtx::new(2);
        net2.activate_discrete_into(&inst(&[1, 0]), &mut scratch).unwrap();
        net2.classify_into(&mut scratch, false);
        net2.output_layer_step(&scratch, false, 0, 0.1, &mut mb2);
        net2.activate_discrete_into(&inst(&[1, 0]), &mut scratch).unwrap();
        net2.classify_into(&mut scratch, false);
        net2.output_layer_step(&scratch, false, 0, 0.1, &mut mb2);

        assert!((net1.weight(a1, 0) - net2.weight(a1, 0)).abs() < 1e-15);
        assert!((net1.output.biases[0] - net2.output.biases[0]).abs() < 1e-15);
    }

    #[test]
    fn fitness_examples() {
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        net.set_weight(a, 0, 0.2);
        net.set_weight(a, 1, -0.3);
        let fit = net.compute_fitness().unwrap();
        assert_eq!(fit.get(a), 0.5);

        // child under a strong parent inherits its value
        let b = net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        net.set_weight(b, 0, 0.1);
        let c = net.insert_composite(vec![a, b], 0, None).unwrap();
        net.set_weight(c, 0, 0.9);
        let fit = net.compute_fitness().unwrap();
        assert_eq!(fit.get(c), 0.9);
        assert_eq!(fit.get(b), 0.9);
        assert_eq!(fit.get(a), 0.9);
    }

    #[test]
    fn duplicate_detection_is_order_insensitive() {
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let b = net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        assert!(!net.is_duplicate(&[a, b]));
        net.insert_composite(vec![a, b], 0, None).unwrap();
        assert!(net.is_duplicate(&[b, a]));
        assert!(net.insert_composite(vec![b, a], 0, None).is_err());
    }

    #[test]
    fn removal_cascades_are_validated() {
        let mut net = binary_net(2);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let b = net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        let c = net.insert_composite(vec![a, b], 0, None).unwrap();
        // removing a child without its parent is rejected
        let only_a: BTreeSet<_> = [a].into_iter().collect();
        assert!(net.remove_features(&only_a).is_err());
        let closure = net.parent_closure(a);
        assert!(closure.contains(&c));
        net.remove_features(&closure).unwrap();
        assert_eq!(net.len(), 1);
        assert!(net.feature(b).is_some());
        assert!(net.feature(b).unwrap().parents.is_empty());
    }

    #[test]
    fn logistic_two_class() {
        let mut net =
            FeatureNetwork::new(DatasetSchema::binary(2), OutputKind::Logistic, 0).unwrap();
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        net.set_weight(a, 0, 3.0);
        let mut state = net.activate_discrete(&inst(&[1, 0])).unwrap();
        let pred = net.classify(&mut state);
        assert_eq!(pred.argmax_class, 1);
        assert!((pred.class_scores[0] + pred.class_scores[1] - 1.0).abs() < 1e-12);
        // zero logit ties -> lowest class id
        net.set_weight(a, 0, 0.0);
        let mut state = net.activate_discrete(&inst(&[1, 0])).unwrap();
        let pred = net.classify(&mut state);
        assert_eq!(pred.argmax_class, 0);
    }

    #[test]
    fn depth_computation() {
        let mut net = binary_net(3);
        let a = net.insert_atom(AttributePredicate::equals(0, 1), 0).unwrap();
        let b = net.insert_atom(AttributePredicate::equals(1, 1), 0).unwrap();
        let c = net.insert_atom(AttributePredicate::equals(2, 1), 0).unwrap();
        let ab = net.insert_composite(vec![a, b], 0, None).unwrap();
        let abc = net.insert_composite(vec![ab, c], 0, None).unwrap();
        assert_eq!(net.depth_of(a), 0);
        assert_eq!(net.depth_of(ab), 1);
        assert_eq!(net.depth_of(abc), 2);
    }
}
