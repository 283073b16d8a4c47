//! Kernel ASTs: base kernels, composition operators and covariance evaluation.
//!
//! Trees use heap addressing. The root is node `1` and the children of node
//! `n` are `2n` and `2n + 1`. Storage is sparse since trees are unbalanced.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use serde_json::Value;
use thiserror::Error;

/// Fixed decay width of the changepoint sigmoid gate.
pub const CP_DECAY: f64 = 0.1;

/// Additive positivity offset on SE and PER lengthscale/period sites.
pub const LENGTH_OFFSET: f64 = 0.01;

/// Heap index of a node.
pub type NodeIndex = u64;

pub const ROOT: NodeIndex = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("node {0} does not exist in the tree")]
    UnknownNode(NodeIndex),
    #[error("non-finite hyperparameter at node {node}")]
    NonFinite { node: NodeIndex },
    #[error("inconsistent tree: {0}")]
    Inconsistent(String),
    #[error("empty input vector")]
    EmptyInput,
    #[error("malformed kernel expression: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseKernel {
    WhiteNoise,
    Constant,
    Linear,
    SquaredExp,
    Periodic,
}

impl BaseKernel {
    /// Order used by the prior's categorical weights.
    pub const ALL: [BaseKernel; 5] = [
        BaseKernel::WhiteNoise,
        BaseKernel::Constant,
        BaseKernel::Linear,
        BaseKernel::SquaredExp,
        BaseKernel::Periodic,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            BaseKernel::WhiteNoise => "WN",
            BaseKernel::Constant => "C",
            BaseKernel::Linear => "LIN",
            BaseKernel::SquaredExp => "SE",
            BaseKernel::Periodic => "PER",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.symbol() == s)
    }

    /// Offsets of the hyperparameter sites, one entry per site.
    pub fn offsets(self) -> &'static [f64] {
        match self {
            BaseKernel::WhiteNoise | BaseKernel::Constant | BaseKernel::Linear => &[0.0],
            BaseKernel::SquaredExp => &[LENGTH_OFFSET],
            BaseKernel::Periodic => &[LENGTH_OFFSET, LENGTH_OFFSET],
        }
    }

    pub fn arity(self) -> usize {
        self.offsets().len()
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    /// Scalar covariance for constrained hyperparameters `h`.
    pub fn eval(self, h: &[f64], x: f64, y: f64) -> f64 {
        match self {
            BaseKernel::WhiteNoise => {
                if x == y {
                    h[0]
                } else {
                    0.0
                }
            }
            BaseKernel::Constant => h[0],
            BaseKernel::Linear => (x - h[0]) * (y - h[0]),
            BaseKernel::SquaredExp => {
                let r = x - y;
                (-(r * r) / (2.0 * h[0] * h[0])).exp()
            }
            BaseKernel::Periodic => {
                let s = (PI * (x - y).abs() / h[1]).sin();
                (-2.0 * s * s / (h[0] * h[0])).exp()
            }
        }
    }

    /// Partial derivative of [`BaseKernel::eval`] with respect to `h[slot]`.
    pub fn eval_grad(self, h: &[f64], slot: usize, x: f64, y: f64) -> f64 {
        match (self, slot) {
            (BaseKernel::WhiteNoise, 0) => {
                if x == y {
                    1.0
                } else {
                    0.0
                }
            }
            (BaseKernel::Constant, 0) => 1.0,
            (BaseKernel::Linear, 0) => 2.0 * h[0] - x - y,
            (BaseKernel::SquaredExp, 0) => {
                let r2 = (x - y) * (x - y);
                let l = h[0];
                (-r2 / (2.0 * l * l)).exp() * r2 / (l * l * l)
            }
            (BaseKernel::Periodic, 0) => {
                let l = h[0];
                let s = (PI * (x - y).abs() / h[1]).sin();
                (-2.0 * s * s / (l * l)).exp() * 4.0 * s * s / (l * l * l)
            }
            (BaseKernel::Periodic, 1) => {
                let (l, p) = (h[0], h[1]);
                let r = (x - y).abs();
                let u = PI * r / p;
                let s = u.sin();
                let k = (-2.0 * s * s / (l * l)).exp();
                k * 2.0 * PI * r * (2.0 * u).sin() / (l * l * p * p)
            }
            _ => panic!("{} has no hyperparameter slot {slot}", self.symbol()),
        }
    }
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    Sum,
    Product,
    ChangePoint,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Sum, Operator::Product, Operator::ChangePoint];

    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Sum => "+",
            Operator::Product => "*",
            Operator::ChangePoint => "CP",
        }
    }

    pub fn offsets(self) -> &'static [f64] {
        match self {
            Operator::ChangePoint => &[0.0],
            _ => &[],
        }
    }

    pub fn arity(self) -> usize {
        self.offsets().len()
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&o| o == self).unwrap()
    }
}

/// Changepoint gate; `1` well before `loc`, `0` well after.
pub fn cp_gate(loc: f64, x: f64) -> f64 {
    1.0 / (1.0 + ((x - loc) / CP_DECAY).exp())
}

/// Numerically stable `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One positive hyperparameter and its unconstrained coordinate.
///
/// `constrained = softplus(-unconstrained) + offset`, so the excess over the
/// offset is `-log(sigmoid(unconstrained))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperSite {
    pub unconstrained: f64,
    pub constrained: f64,
    pub offset: f64,
}

impl HyperSite {
    pub fn from_unconstrained(t: f64, offset: f64) -> Self {
        HyperSite {
            unconstrained: t,
            constrained: softplus(-t) + offset,
            offset,
        }
    }

    /// Inverse map. The constrained value is stored exactly as given.
    pub fn from_constrained(h: f64, offset: f64) -> Self {
        let v = h - offset;
        // t = -log(expm1(v)), split to stay finite for large v
        let t = if v > 30.0 {
            -(v + (-(-v).exp()).ln_1p())
        } else {
            -v.exp_m1().ln()
        };
        HyperSite {
            unconstrained: t,
            constrained: h,
            offset,
        }
    }

    /// d(constrained)/d(unconstrained).
    pub fn dconstrained_dt(&self) -> f64 {
        -sigmoid(-self.unconstrained)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Branch(Operator),
    Leaf(BaseKernel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeBundle {
    pub kind: NodeKind,
    pub hypers: Vec<HyperSite>,
}

impl NodeBundle {
    pub fn is_branch(&self) -> bool {
        matches!(self.kind, NodeKind::Branch(_))
    }

    pub fn constrained(&self) -> Vec<f64> {
        self.hypers.iter().map(|h| h.constrained).collect()
    }

    fn expected_offsets(&self) -> &'static [f64] {
        match self.kind {
            NodeKind::Branch(op) => op.offsets(),
            NodeKind::Leaf(k) => k.offsets(),
        }
    }
}

/// Address of one hyperparameter site: node index plus slot within the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HyperAddress {
    pub node: NodeIndex,
    pub slot: usize,
}

pub fn left(n: NodeIndex) -> NodeIndex {
    2 * n
}

pub fn right(n: NodeIndex) -> NodeIndex {
    2 * n + 1
}

/// Level of a node, with the root at level 1.
pub fn level(n: NodeIndex) -> u32 {
    64 - n.leading_zeros()
}

/// Re-roots `n` (relative to root 1) under `new_root`.
fn reroot(n: NodeIndex, new_root: NodeIndex) -> NodeIndex {
    let depth = level(n) - 1;
    let path = n - (1u64 << depth);
    (new_root << depth) + path
}

/// Whether `n` lies in the subtree rooted at `root`.
pub fn is_descendant(n: NodeIndex, root: NodeIndex) -> bool {
    let (ln, lr) = (level(n), level(root));
    ln >= lr && (n >> (ln - lr)) == root
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelAst {
    nodes: BTreeMap<NodeIndex, NodeBundle>,
}

impl KernelAst {
    pub fn from_nodes(nodes: BTreeMap<NodeIndex, NodeBundle>) -> Self {
        KernelAst { nodes }
    }

    /// Single-leaf tree from constrained hyperparameter values.
    pub fn leaf(kernel: BaseKernel, hypers: &[f64]) -> Self {
        assert_eq!(hypers.len(), kernel.arity(), "{kernel} arity");
        let hypers = hypers
            .iter()
            .zip(kernel.offsets())
            .map(|(&h, &off)| HyperSite::from_constrained(h, off))
            .collect();
        let mut nodes = BTreeMap::new();
        nodes.insert(
            ROOT,
            NodeBundle {
                kind: NodeKind::Leaf(kernel),
                hypers,
            },
        );
        KernelAst { nodes }
    }

    pub fn wn(scale: f64) -> Self {
        Self::leaf(BaseKernel::WhiteNoise, &[scale])
    }

    pub fn constant(c: f64) -> Self {
        Self::leaf(BaseKernel::Constant, &[c])
    }

    pub fn linear(intercept: f64) -> Self {
        Self::leaf(BaseKernel::Linear, &[intercept])
    }

    pub fn se(lengthscale: f64) -> Self {
        Self::leaf(BaseKernel::SquaredExp, &[lengthscale])
    }

    pub fn periodic(lengthscale: f64, period: f64) -> Self {
        Self::leaf(BaseKernel::Periodic, &[lengthscale, period])
    }

    /// Joins two trees under a new root branch.
    pub fn branch(op: Operator, hypers: &[f64], lhs: KernelAst, rhs: KernelAst) -> Self {
        assert_eq!(hypers.len(), op.arity());
        let hypers = hypers
            .iter()
            .zip(op.offsets())
            .map(|(&h, &off)| HyperSite::from_constrained(h, off))
            .collect();
        let mut nodes = BTreeMap::new();
        nodes.insert(
            ROOT,
            NodeBundle {
                kind: NodeKind::Branch(op),
                hypers,
            },
        );
        for (sub, child_root) in [(lhs, 2), (rhs, 3)] {
            for (n, b) in sub.nodes {
                nodes.insert(reroot(n, child_root), b);
            }
        }
        KernelAst { nodes }
    }

    pub fn sum(lhs: KernelAst, rhs: KernelAst) -> Self {
        Self::branch(Operator::Sum, &[], lhs, rhs)
    }

    pub fn product(lhs: KernelAst, rhs: KernelAst) -> Self {
        Self::branch(Operator::Product, &[], lhs, rhs)
    }

    pub fn changepoint(location: f64, before: KernelAst, after: KernelAst) -> Self {
        Self::branch(Operator::ChangePoint, &[location], before, after)
    }

    pub fn node(&self, n: NodeIndex) -> Result<&NodeBundle, KernelError> {
        self.nodes.get(&n).ok_or(KernelError::UnknownNode(n))
    }

    pub fn node_mut(&mut self, n: NodeIndex) -> Result<&mut NodeBundle, KernelError> {
        self.nodes.get_mut(&n).ok_or(KernelError::UnknownNode(n))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeIndex, &NodeBundle)> {
        self.nodes.iter().map(|(&n, b)| (n, b))
    }

    pub fn indices(&self) -> Vec<NodeIndex> {
        self.nodes.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains_operator(&self, op: Operator) -> bool {
        self.nodes.values().any(|b| b.kind == NodeKind::Branch(op))
    }

    pub fn contains_kernel(&self, k: BaseKernel) -> bool {
        self.nodes.values().any(|b| b.kind == NodeKind::Leaf(k))
    }

    /// All hyperparameter sites in index order.
    pub fn hyper_addresses(&self) -> Vec<HyperAddress> {
        self.nodes
            .iter()
            .flat_map(|(&node, b)| (0..b.hypers.len()).map(move |slot| HyperAddress { node, slot }))
            .collect()
    }

    pub fn hyper(&self, addr: HyperAddress) -> Result<&HyperSite, KernelError> {
        self.node(addr.node)?
            .hypers
            .get(addr.slot)
            .ok_or(KernelError::UnknownNode(addr.node))
    }

    pub fn set_hyper(&mut self, addr: HyperAddress, site: HyperSite) -> Result<(), KernelError> {
        let slot = self
            .node_mut(addr.node)?
            .hypers
            .get_mut(addr.slot)
            .ok_or(KernelError::UnknownNode(addr.node))?;
        *slot = site;
        Ok(())
    }

    /// Copy of the subtree at `n`, re-rooted at 1.
    pub fn subtree(&self, n: NodeIndex) -> Result<KernelAst, KernelError> {
        self.node(n)?;
        let depth = level(n) - 1;
        let nodes = self
            .nodes
            .iter()
            .filter(|(&i, _)| is_descendant(i, n))
            .map(|(&i, b)| {
                let rel_depth = level(i) - 1 - depth;
                let path = i - (n << rel_depth);
                ((1u64 << rel_depth) + path, b.clone())
            })
            .collect();
        Ok(KernelAst { nodes })
    }

    /// Replaces the subtree at `n` with `sub`, whose nodes carry absolute
    /// indices already rooted at `n`.
    pub fn replace_subtree(&mut self, n: NodeIndex, sub: KernelAst) {
        self.nodes.retain(|&i, _| !is_descendant(i, n));
        self.nodes.extend(sub.nodes);
    }

    /// Re-roots a tree rooted at 1 so that its root sits at `n`.
    pub fn rerooted(self, n: NodeIndex) -> KernelAst {
        KernelAst {
            nodes: self
                .nodes
                .into_iter()
                .map(|(i, b)| (reroot(i, n), b))
                .collect(),
        }
    }

    /// Checks the structural and hyperparameter invariants.
    pub fn validate(&self) -> Result<(), KernelError> {
        if !self.nodes.contains_key(&ROOT) {
            return Err(KernelError::Inconsistent("missing root".into()));
        }
        for (&n, b) in &self.nodes {
            if n != ROOT && !self.nodes.get(&(n / 2)).is_some_and(|p| p.is_branch()) {
                return Err(KernelError::Inconsistent(format!(
                    "node {n} has no branch parent"
                )));
            }
            let has_l = self.nodes.contains_key(&left(n));
            let has_r = self.nodes.contains_key(&right(n));
            if b.is_branch() && !(has_l && has_r) {
                return Err(KernelError::Inconsistent(format!(
                    "branch {n} lacks a child"
                )));
            }
            let offsets = b.expected_offsets();
            if b.hypers.len() != offsets.len() {
                return Err(KernelError::Inconsistent(format!(
                    "node {n} has {} hyperparameters, expected {}",
                    b.hypers.len(),
                    offsets.len()
                )));
            }
            for (site, &off) in b.hypers.iter().zip(offsets) {
                if !site.constrained.is_finite() || !site.unconstrained.is_finite() {
                    return Err(KernelError::NonFinite { node: n });
                }
                if site.offset != off || site.constrained <= off {
                    return Err(KernelError::Inconsistent(format!(
                        "node {n} hyperparameter out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Covariance `k_n(x, y)` by direct recursion.
    pub fn eval(&self, n: NodeIndex, x: f64, y: f64) -> Result<f64, KernelError> {
        let b = self.node(n)?;
        if b.hypers.iter().any(|h| !h.constrained.is_finite()) {
            return Err(KernelError::NonFinite { node: n });
        }
        match b.kind {
            NodeKind::Leaf(k) => {
                if b.hypers.len() != k.arity() {
                    return Err(KernelError::Inconsistent(format!("arity at node {n}")));
                }
                Ok(k.eval(&b.constrained(), x, y))
            }
            NodeKind::Branch(op) => {
                let k1 = self.eval(left(n), x, y)?;
                let k2 = self.eval(right(n), x, y)?;
                Ok(match op {
                    Operator::Sum => k1 + k2,
                    Operator::Product => k1 * k2,
                    Operator::ChangePoint => {
                        let loc = b.hypers[0].constrained;
                        let (sx, sy) = (cp_gate(loc, x), cp_gate(loc, y));
                        sx * sy * k1 + (1.0 - sx) * (1.0 - sy) * k2
                    }
                })
            }
        }
    }

    /// Covariance matrix `[k_n(a_i, b_j)]`, composed node by node.
    pub fn cross_cov(
        &self,
        n: NodeIndex,
        a: &[f64],
        b: &[f64],
    ) -> Result<DMatrix<f64>, KernelError> {
        let bundle = self.node(n)?;
        if bundle.hypers.iter().any(|h| !h.constrained.is_finite()) {
            return Err(KernelError::NonFinite { node: n });
        }
        match bundle.kind {
            NodeKind::Leaf(k) => {
                if bundle.hypers.len() != k.arity() {
                    return Err(KernelError::Inconsistent(format!("arity at node {n}")));
                }
                let h = bundle.constrained();
                Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| {
                    k.eval(&h, a[i], b[j])
                }))
            }
            NodeKind::Branch(op) => {
                let k1 = self.cross_cov(left(n), a, b)?;
                let k2 = self.cross_cov(right(n), a, b)?;
                Ok(match op {
                    Operator::Sum => k1 + k2,
                    Operator::Product => k1.component_mul(&k2),
                    Operator::ChangePoint => {
                        let (before, after) = cp_weights(bundle.hypers[0].constrained, a, b);
                        before.component_mul(&k1) + after.component_mul(&k2)
                    }
                })
            }
        }
    }

    /// Square covariance matrix over `xs`.
    pub fn cov_matrix(&self, n: NodeIndex, xs: &[f64]) -> Result<DMatrix<f64>, KernelError> {
        if xs.is_empty() {
            return Err(KernelError::EmptyInput);
        }
        self.cross_cov(n, xs, xs)
    }

    /// Canonical infix rendering of the skeleton, ignoring hyperparameters.
    pub fn structure_label(&self) -> String {
        self.label_at(ROOT)
    }

    fn label_at(&self, n: NodeIndex) -> String {
        let Some(b) = self.nodes.get(&n) else {
            return "?".to_string();
        };
        match b.kind {
            NodeKind::Leaf(k) => k.symbol().to_string(),
            NodeKind::Branch(Operator::ChangePoint) => {
                format!(
                    "CP({}, {})",
                    self.label_at(left(n)),
                    self.label_at(right(n))
                )
            }
            NodeKind::Branch(op) => {
                let wrap = |c: NodeIndex| {
                    let s = self.label_at(c);
                    match self.nodes.get(&c).map(|b| b.kind) {
                        // a product inside a sum binds tighter; anything else nested gets parens
                        Some(NodeKind::Branch(Operator::Product)) if op == Operator::Sum => s,
                        Some(NodeKind::Branch(Operator::Sum | Operator::Product)) => {
                            format!("({s})")
                        }
                        _ => s,
                    }
                };
                format!("{} {} {}", wrap(left(n)), op.symbol(), wrap(right(n)))
            }
        }
    }

    /// Nested-list JSON form, e.g. `["*", ["LIN", 0.36], ["WN", 2.05]]`.
    pub fn to_json(&self) -> Value {
        self.json_at(ROOT)
    }

    fn json_at(&self, n: NodeIndex) -> Value {
        let Some(b) = self.nodes.get(&n) else {
            return Value::Null;
        };
        let mut items = Vec::new();
        match b.kind {
            NodeKind::Leaf(k) => {
                items.push(Value::from(k.symbol()));
                items.extend(b.hypers.iter().map(|h| Value::from(h.constrained)));
            }
            NodeKind::Branch(op) => {
                items.push(Value::from(op.symbol()));
                items.extend(b.hypers.iter().map(|h| Value::from(h.constrained)));
                items.push(self.json_at(left(n)));
                items.push(self.json_at(right(n)));
            }
        }
        Value::Array(items)
    }

    pub fn from_json(value: &Value) -> Result<Self, KernelError> {
        let mut nodes = BTreeMap::new();
        parse_json(value, ROOT, &mut nodes)?;
        let ast = KernelAst { nodes };
        ast.validate()?;
        Ok(ast)
    }

    pub fn from_json_str(s: &str) -> Result<Self, KernelError> {
        let v: Value = serde_json::from_str(s).map_err(|e| KernelError::Parse(e.to_string()))?;
        Self::from_json(&v)
    }
}

/// Gate outer products for a changepoint at `loc`.
pub fn cp_weights(loc: f64, a: &[f64], b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let sa: Vec<f64> = a.iter().map(|&x| cp_gate(loc, x)).collect();
    let sb: Vec<f64> = b.iter().map(|&x| cp_gate(loc, x)).collect();
    let before = DMatrix::from_fn(a.len(), b.len(), |i, j| sa[i] * sb[j]);
    let after = DMatrix::from_fn(a.len(), b.len(), |i, j| (1.0 - sa[i]) * (1.0 - sb[j]));
    (before, after)
}

fn parse_json(
    value: &Value,
    n: NodeIndex,
    nodes: &mut BTreeMap<NodeIndex, NodeBundle>,
) -> Result<(), KernelError> {
    let err = |msg: &str| KernelError::Parse(format!("{msg} at node {n}"));
    let items = value.as_array().ok_or_else(|| err("expected a list"))?;
    let head = items
        .first()
        .and_then(Value::as_str)
        .ok_or_else(|| err("expected a symbol"))?;
    let number = |v: &Value| v.as_f64().ok_or_else(|| err("expected a number"));
    if let Some(k) = BaseKernel::from_symbol(head) {
        if items.len() != 1 + k.arity() {
            return Err(err("wrong number of hyperparameters"));
        }
        let hypers = items[1..]
            .iter()
            .zip(k.offsets())
            .map(|(v, &off)| Ok(HyperSite::from_constrained(number(v)?, off)))
            .collect::<Result<_, KernelError>>()?;
        nodes.insert(
            n,
            NodeBundle {
                kind: NodeKind::Leaf(k),
                hypers,
            },
        );
        return Ok(());
    }
    let op = Operator::ALL
        .into_iter()
        .find(|o| o.symbol() == head)
        .ok_or_else(|| err("unknown symbol"))?;
    if items.len() != 3 + op.arity() {
        return Err(err("wrong number of operands"));
    }
    let hypers = items[1..1 + op.arity()]
        .iter()
        .zip(op.offsets())
        .map(|(v, &off)| Ok(HyperSite::from_constrained(number(v)?, off)))
        .collect::<Result<_, KernelError>>()?;
    nodes.insert(
        n,
        NodeBundle {
            kind: NodeKind::Branch(op),
            hypers,
        },
    );
    parse_json(&items[1 + op.arity()], left(n), nodes)?;
    parse_json(&items[2 + op.arity()], right(n), nodes)
}

impl fmt::Display for KernelAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.structure_label())
    }
}
