//! Partition rule trees: the serializable artifact carried from Study 1 to
//! Study 2. Internal nodes hold predicates over schema covariates (true
//! routes left), leaves hold consecutive ids plus estimate metadata that
//! rides along without ever influencing classification.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{CohortTable, CovariateKind, CovariateSchema, UnitRecord};
use crate::num::Scalar;

/// Version tag carried by every rule file.
pub const RULE_FORMAT: &str = "hte-rules/1";

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("unsupported rule format `{found}` (expected `{RULE_FORMAT}`)")]
    Format { found: String },
    #[error("malformed rule document: {0}")]
    Malformed(String),
    #[error("unknown variable `{name}` in rule tree")]
    UnknownVariable { name: String },
    #[error("predicate on `{variable}`: {message}")]
    BadPredicate { variable: String, message: String },
    #[error("schema mismatch: rules built for hash `{tree}`, data has `{table}`")]
    SchemaMismatch { tree: String, table: String },
    #[error("covariate `{variable}` has value {value} outside the schema")]
    ValueOutOfRange { variable: String, value: f64 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Direction of a transported hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Negative,
    Positive,
    Null,
}

/// Stability classification attached by the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityLabel {
    StableHigh,
    StableLow,
    Noisy,
}

impl StabilityLabel {
    pub fn token(self) -> &'static str {
        match self {
            StabilityLabel::StableHigh => "stable-high",
            StabilityLabel::StableLow => "stable-low",
            StabilityLabel::Noisy => "noisy",
        }
    }
}

/// Predicate test; `true` routes to the left child.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PredicateTest<F> {
    /// `variable <= threshold`, ties left.
    NumericLe { threshold: F },
    /// `variable in levels` (sorted level labels).
    InLevels { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate<F> {
    pub variable: String,
    #[serde(flatten)]
    pub test: PredicateTest<F>,
}

/// Per-leaf estimates and gate verdicts. Routing never reads this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafMetadata<F> {
    pub train_estimate: Option<F>,
    pub train_se: Option<F>,
    pub val_estimate: Option<F>,
    pub val_se: Option<F>,
    pub hypothesis_direction: Direction,
    pub stability_label: Option<StabilityLabel>,
}

impl<F> Default for LeafMetadata<F> {
    fn default() -> Self {
        Self {
            train_estimate: None,
            train_se: None,
            val_estimate: None,
            val_se: None,
            hypothesis_direction: Direction::Null,
            stability_label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RuleNode<F> {
    Split {
        predicate: Predicate<F>,
        left: Box<RuleNode<F>>,
        right: Box<RuleNode<F>>,
    },
    Leaf {
        leaf_id: u32,
        metadata: LeafMetadata<F>,
    },
}

impl<F> RuleNode<F> {
    pub fn leaf(metadata: LeafMetadata<F>) -> Self {
        RuleNode::Leaf {
            leaf_id: 0,
            metadata,
        }
    }

    pub fn split(predicate: Predicate<F>, left: RuleNode<F>, right: RuleNode<F>) -> Self {
        RuleNode::Split {
            predicate,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Binary predicate tree with consecutively numbered leaves.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRuleTree<F> {
    schema_hash: String,
    root: RuleNode<F>,
    n_leaves: u32,
}

impl<F: Scalar> PartitionRuleTree<F> {
    /// Builds a tree, numbering leaves 0.. in left-to-right order and
    /// checking that every root-to-leaf path is satisfiable.
    pub fn new(schema_hash: impl Into<String>, mut root: RuleNode<F>) -> Result<Self, RulesError> {
        let mut next = 0u32;
        renumber(&mut root, &mut next);
        check_satisfiable(&root, &mut Vec::new())?;
        Ok(Self {
            schema_hash: schema_hash.into(),
            root,
            n_leaves: next,
        })
    }

    pub fn single_leaf(schema_hash: impl Into<String>, metadata: LeafMetadata<F>) -> Self {
        Self {
            schema_hash: schema_hash.into(),
            root: RuleNode::Leaf {
                leaf_id: 0,
                metadata,
            },
            n_leaves: 1,
        }
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn root(&self) -> &RuleNode<F> {
        &self.root
    }

    pub fn n_leaves(&self) -> u32 {
        self.n_leaves
    }

    /// Leaf metadata in leaf-id order.
    pub fn leaves(&self) -> Vec<(u32, &LeafMetadata<F>)> {
        let mut out = Vec::with_capacity(self.n_leaves as usize);
        collect_leaves(&self.root, &mut out);
        out
    }

    pub fn leaf_metadata(&self, id: u32) -> Option<&LeafMetadata<F>> {
        self.leaves()
            .into_iter()
            .find(|(l, _)| *l == id)
            .map(|(_, m)| m)
    }

    /// Returns a copy with every leaf's metadata rewritten.
    pub fn map_leaf_metadata(&self, f: impl Fn(u32, &LeafMetadata<F>) -> LeafMetadata<F>) -> Self {
        let mut out = self.clone();
        rewrite_leaves(&mut out.root, &f);
        out
    }

    /// Verifies that the tree was built against this schema.
    pub fn check_schema_hash(&self, schema: &CovariateSchema) -> Result<(), RulesError> {
        if self.schema_hash != schema.hash() {
            return Err(RulesError::SchemaMismatch {
                tree: self.schema_hash.clone(),
                table: schema.hash(),
            });
        }
        Ok(())
    }

    /// Resolves variable names and level labels against a schema for fast
    /// repeated classification.
    pub fn compile(&self, schema: &CovariateSchema) -> Result<CompiledTree<F>, RulesError> {
        let mut nodes = Vec::new();
        compile_node(&self.root, schema, &mut nodes)?;
        Ok(CompiledTree { nodes })
    }

    /// Classifies one record; a total function over schema-valid units.
    pub fn classify(
        &self,
        record: &UnitRecord<F>,
        schema: &CovariateSchema,
    ) -> Result<u32, RulesError> {
        self.compile(schema)?.classify(&record.covariates, schema)
    }

    /// Classifies a set of table rows, compiling once.
    pub fn classify_rows(
        &self,
        table: &CohortTable<F>,
        rows: &[usize],
    ) -> Result<Vec<u32>, RulesError> {
        let compiled = self.compile(table.schema())?;
        rows.iter()
            .map(|&r| compiled.classify(&table.record(r).covariates, table.schema()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let doc = self.to_doc();
        serde_json::to_string_pretty(&doc).expect("rule tree serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RulesError> {
        let doc: TreeDoc<F> = serde_json::from_str(text)?;
        Self::from_doc(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RulesError> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_json().as_bytes())?;
        file.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RulesError> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    fn to_doc(&self) -> TreeDoc<F> {
        let mut nodes = Vec::new();
        let mut leaves = Vec::new();
        let root = flatten(&self.root, &mut nodes, &mut leaves);
        TreeDoc {
            format: RULE_FORMAT.to_string(),
            schema_hash: self.schema_hash.clone(),
            root,
            nodes,
            leaves,
        }
    }

    fn from_doc(doc: TreeDoc<F>) -> Result<Self, RulesError> {
        if doc.format != RULE_FORMAT {
            return Err(RulesError::Format { found: doc.format });
        }
        let mut used_nodes = vec![false; doc.nodes.len()];
        let root = rebuild(&doc, doc.root, &mut used_nodes, 0)?;
        if let Some(unused) = used_nodes.iter().position(|u| !u) {
            return Err(RulesError::Malformed(format!(
                "node {unused} is unreachable"
            )));
        }
        let tree = Self::new(doc.schema_hash, root)?;
        // Leaf ids in the document must already be the canonical numbering.
        let doc_ids: Vec<u32> = doc.leaves.iter().map(|l| l.id).collect();
        let mut sorted = doc_ids.clone();
        sorted.sort_unstable();
        if sorted != (0..tree.n_leaves).collect::<Vec<_>>() {
            return Err(RulesError::Malformed(
                "leaf ids are not consecutive from zero".into(),
            ));
        }
        Ok(tree)
    }
}

impl<F: Scalar> Serialize for PartitionRuleTree<F> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_doc().serialize(serializer)
    }
}

impl<'de, F: Scalar> Deserialize<'de> for PartitionRuleTree<F> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = TreeDoc::<F>::deserialize(deserializer)?;
        Self::from_doc(doc).map_err(serde::de::Error::custom)
    }
}

fn renumber<F>(node: &mut RuleNode<F>, next: &mut u32) {
    match node {
        RuleNode::Leaf { leaf_id, .. } => {
            *leaf_id = *next;
            *next += 1;
        }
        RuleNode::Split { left, right, .. } => {
            renumber(left, next);
            renumber(right, next);
        }
    }
}

fn collect_leaves<'a, F>(node: &'a RuleNode<F>, out: &mut Vec<(u32, &'a LeafMetadata<F>)>) {
    match node {
        RuleNode::Leaf { leaf_id, metadata } => out.push((*leaf_id, metadata)),
        RuleNode::Split { left, right, .. } => {
            collect_leaves(left, out);
            collect_leaves(right, out);
        }
    }
}

fn rewrite_leaves<F>(
    node: &mut RuleNode<F>,
    f: &impl Fn(u32, &LeafMetadata<F>) -> LeafMetadata<F>,
) {
    match node {
        RuleNode::Leaf { leaf_id, metadata } => *metadata = f(*leaf_id, metadata),
        RuleNode::Split { left, right, .. } => {
            rewrite_leaves(left, f);
            rewrite_leaves(right, f);
        }
    }
}

/// Path constraint tracking for the satisfiability check.
enum Constraint<'a, F> {
    Interval {
        variable: &'a str,
        lo: Option<F>,
        hi: Option<F>,
    },
    Levels {
        variable: &'a str,
        include: BTreeSet<&'a str>,
        exclude: BTreeSet<&'a str>,
    },
}

fn check_satisfiable<'a, F: Scalar>(
    node: &'a RuleNode<F>,
    path: &mut Vec<Constraint<'a, F>>,
) -> Result<(), RulesError> {
    let RuleNode::Split {
        predicate,
        left,
        right,
    } = node
    else {
        return Ok(());
    };
    if let PredicateTest::InLevels { levels } = &predicate.test {
        if levels.is_empty() {
            return Err(RulesError::BadPredicate {
                variable: predicate.variable.clone(),
                message: "empty level subset".into(),
            });
        }
    }
    for (branch, is_left) in [(left, true), (right, false)] {
        let constraint = constraint_for(predicate, is_left);
        if conflicts(path, &constraint) {
            return Err(RulesError::Malformed(format!(
                "unsatisfiable path through `{}`",
                predicate.variable
            )));
        }
        path.push(constraint);
        check_satisfiable(branch, path)?;
        path.pop();
    }
    Ok(())
}

fn constraint_for<'a, F: Scalar>(predicate: &'a Predicate<F>, is_left: bool) -> Constraint<'a, F> {
    match &predicate.test {
        PredicateTest::NumericLe { threshold } => {
            if is_left {
                Constraint::Interval {
                    variable: &predicate.variable,
                    lo: None,
                    hi: Some(*threshold),
                }
            } else {
                Constraint::Interval {
                    variable: &predicate.variable,
                    lo: Some(*threshold),
                    hi: None,
                }
            }
        }
        PredicateTest::InLevels { levels } => {
            let set: BTreeSet<&str> = levels.iter().map(String::as_str).collect();
            if is_left {
                Constraint::Levels {
                    variable: &predicate.variable,
                    include: set,
                    exclude: BTreeSet::new(),
                }
            } else {
                Constraint::Levels {
                    variable: &predicate.variable,
                    include: BTreeSet::new(),
                    exclude: set,
                }
            }
        }
    }
}

fn conflicts<F: Scalar>(path: &[Constraint<'_, F>], new: &Constraint<'_, F>) -> bool {
    match new {
        Constraint::Interval { variable, lo, hi } => {
            // Effective interval is (lo, hi]; empty when lo >= hi.
            let mut cur_lo = *lo;
            let mut cur_hi = *hi;
            for c in path {
                if let Constraint::Interval {
                    variable: v,
                    lo: plo,
                    hi: phi,
                } = c
                {
                    if v == variable {
                        if let Some(p) = plo {
                            cur_lo = Some(cur_lo.map_or(*p, |c| c.max(*p)));
                        }
                        if let Some(p) = phi {
                            cur_hi = Some(cur_hi.map_or(*p, |c| c.min(*p)));
                        }
                    }
                }
            }
            matches!((cur_lo, cur_hi), (Some(l), Some(h)) if l >= h)
        }
        Constraint::Levels {
            variable,
            include,
            exclude,
        } => {
            let mut inc: Option<BTreeSet<&str>> = if include.is_empty() {
                None
            } else {
                Some(include.clone())
            };
            let mut exc = exclude.clone();
            for c in path {
                if let Constraint::Levels {
                    variable: v,
                    include: pinc,
                    exclude: pexc,
                } = c
                {
                    if v == variable {
                        if !pinc.is_empty() {
                            inc = Some(match inc {
                                None => pinc.clone(),
                                Some(cur) => cur.intersection(pinc).copied().collect(),
                            });
                        }
                        exc.extend(pexc.iter().copied());
                    }
                }
            }
            match inc {
                Some(set) => set.difference(&exc).next().is_none(),
                None => false,
            }
        }
    }
}

// --- compiled form ---------------------------------------------------------

enum CompiledTest<F> {
    Le(F),
    Mask(u64),
}

enum CompiledNode<F> {
    Split {
        col: usize,
        test: CompiledTest<F>,
        left: usize,
        right: usize,
    },
    Leaf(u32),
}

/// Rule tree bound to a schema: column indices and level bitmasks resolved.
pub struct CompiledTree<F> {
    nodes: Vec<CompiledNode<F>>,
}

fn compile_node<F: Scalar>(
    node: &RuleNode<F>,
    schema: &CovariateSchema,
    out: &mut Vec<CompiledNode<F>>,
) -> Result<usize, RulesError> {
    match node {
        RuleNode::Leaf { leaf_id, .. } => {
            out.push(CompiledNode::Leaf(*leaf_id));
            Ok(out.len() - 1)
        }
        RuleNode::Split {
            predicate,
            left,
            right,
        } => {
            let col = schema.index_of(&predicate.variable).ok_or_else(|| {
                RulesError::UnknownVariable {
                    name: predicate.variable.clone(),
                }
            })?;
            let test = match (&predicate.test, &schema.column(col).kind) {
                (
                    PredicateTest::NumericLe { threshold },
                    CovariateKind::Numeric | CovariateKind::Binary,
                ) => CompiledTest::Le(*threshold),
                (
                    PredicateTest::InLevels { levels },
                    CovariateKind::Categorical { levels: declared },
                ) => {
                    if declared.len() > 64 {
                        return Err(RulesError::BadPredicate {
                            variable: predicate.variable.clone(),
                            message:
                                "categorical variables with more than 64 levels are unsupported"
                                    .into(),
                        });
                    }
                    let mut mask = 0u64;
                    for l in levels {
                        let ix = declared.iter().position(|d| d == l).ok_or_else(|| {
                            RulesError::BadPredicate {
                                variable: predicate.variable.clone(),
                                message: format!("level `{l}` not declared in schema"),
                            }
                        })?;
                        mask |= 1u64 << ix;
                    }
                    CompiledTest::Mask(mask)
                }
                _ => {
                    return Err(RulesError::BadPredicate {
                        variable: predicate.variable.clone(),
                        message: "predicate form does not match covariate kind".into(),
                    })
                }
            };
            let slot = out.len();
            out.push(CompiledNode::Leaf(0)); // placeholder
            let left_ix = compile_node(left, schema, out)?;
            let right_ix = compile_node(right, schema, out)?;
            out[slot] = CompiledNode::Split {
                col,
                test,
                left: left_ix,
                right: right_ix,
            };
            Ok(slot)
        }
    }
}

impl<F: Scalar> CompiledTree<F> {
    /// Routes a covariate vector to its leaf id.
    pub fn classify(&self, covariates: &[F], schema: &CovariateSchema) -> Result<u32, RulesError> {
        let mut ix = 0usize;
        loop {
            match &self.nodes[ix] {
                CompiledNode::Leaf(id) => return Ok(*id),
                CompiledNode::Split {
                    col,
                    test,
                    left,
                    right,
                } => {
                    let v = covariates[*col];
                    let goes_left = match test {
                        CompiledTest::Le(t) => v <= *t,
                        CompiledTest::Mask(mask) => {
                            let level = v.as_f64() as usize;
                            if v.fract() != F::zero() || level >= schema.n_levels(*col) {
                                return Err(RulesError::ValueOutOfRange {
                                    variable: schema.column(*col).name.clone(),
                                    value: v.as_f64(),
                                });
                            }
                            mask & (1u64 << level) != 0
                        }
                    };
                    ix = if goes_left { *left } else { *right };
                }
            }
        }
    }
}

// --- serialized document ----------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NodeRef {
    Node(u32),
    Leaf(u32),
}

#[derive(Serialize, Deserialize)]
struct NodeDoc<F> {
    id: u32,
    predicate: Predicate<F>,
    left: NodeRef,
    right: NodeRef,
}

#[derive(Serialize, Deserialize)]
struct LeafDoc<F> {
    id: u32,
    metadata: LeafMetadata<F>,
}

#[derive(Serialize, Deserialize)]
struct TreeDoc<F> {
    format: String,
    schema_hash: String,
    root: NodeRef,
    nodes: Vec<NodeDoc<F>>,
    leaves: Vec<LeafDoc<F>>,
}

fn flatten<F: Scalar>(
    node: &RuleNode<F>,
    nodes: &mut Vec<NodeDoc<F>>,
    leaves: &mut Vec<LeafDoc<F>>,
) -> NodeRef {
    match node {
        RuleNode::Leaf { leaf_id, metadata } => {
            leaves.push(LeafDoc {
                id: *leaf_id,
                metadata: metadata.clone(),
            });
            NodeRef::Leaf(*leaf_id)
        }
        RuleNode::Split {
            predicate,
            left,
            right,
        } => {
            let id = nodes.len() as u32;
            nodes.push(NodeDoc {
                id,
                predicate: predicate.clone(),
                left: NodeRef::Leaf(0),
                right: NodeRef::Leaf(0),
            });
            let l = flatten(left, nodes, leaves);
            let r = flatten(right, nodes, leaves);
            let slot = &mut nodes[id as usize];
            slot.left = l;
            slot.right = r;
            NodeRef::Node(id)
        }
    }
}

fn rebuild<F: Scalar>(
    doc: &TreeDoc<F>,
    at: NodeRef,
    used_nodes: &mut [bool],
    depth: usize,
) -> Result<RuleNode<F>, RulesError> {
    if depth > 512 {
        return Err(RulesError::Malformed(
            "tree nesting too deep or cyclic".into(),
        ));
    }
    match at {
        NodeRef::Leaf(id) => {
            let leaf = doc.leaves.iter().find(|l| l.id == id).ok_or_else(|| {
                RulesError::Malformed(format!("leaf {id} referenced but not defined"))
            })?;
            Ok(RuleNode::Leaf {
                leaf_id: id,
                metadata: leaf.metadata.clone(),
            })
        }
        NodeRef::Node(id) => {
            let node = doc.nodes.iter().find(|n| n.id == id).ok_or_else(|| {
                RulesError::Malformed(format!("node {id} referenced but not defined"))
            })?;
            let ix = id as usize;
            if used_nodes[ix] {
                return Err(RulesError::Malformed(format!("node {id} referenced twice")));
            }
            used_nodes[ix] = true;
            Ok(RuleNode::Split {
                predicate: node.predicate.clone(),
                left: Box::new(rebuild(doc, node.left, used_nodes, depth + 1)?),
                right: Box::new(rebuild(doc, node.right, used_nodes, depth + 1)?),
            })
        }
    }
}
