//! Rooted trees, the Connes–Kreimer coproduct, and B-series characters.
//!
//! Trees are non-planar: children are kept sorted so structural equality
//! coincides with tree isomorphism. Characters are dense maps over every
//! canonical tree up to a cutoff order and compose through the coproduct,
//! which is what the order and effective-symmetry certificates are built on.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::tableau::ButcherTableau;
use crate::{Error, Result};

/// Largest tree accepted by [`elementary_weight`].
pub const MAX_WEIGHT_NODES: usize = 12;

/// Default cutoff order for characters.
pub const DEFAULT_CUTOFF: usize = 6;

/// Residuals at or below this are treated as zero.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A canonical non-planar rooted tree with vertex labels in `1..=d`.
///
/// Field order matters: the derived `Ord` compares `(size, label, children)`,
/// which is the canonical child order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelledTree {
    size: usize,
    label: u8,
    children: Vec<LabelledTree>,
}

impl LabelledTree {
    pub fn leaf(label: u8) -> Self {
        Self {
            size: 1,
            label,
            children: Vec::new(),
        }
    }

    /// `[children]_label`, canonicalized.
    pub fn join(label: u8, mut children: Vec<LabelledTree>) -> Self {
        children.sort();
        let size = 1 + children.iter().map(|c| c.size).sum::<usize>();
        Self {
            size,
            label,
            children,
        }
    }

    /// Chain of `n` vertices with label 1.
    pub fn chain(n: usize) -> Self {
        assert!(n >= 1);
        (1..n).fold(Self::leaf(1), |t, _| Self::join(1, vec![t]))
    }

    /// Root with `n` leaf children, label 1.
    pub fn bushy(n: usize) -> Self {
        Self::join(1, vec![Self::leaf(1); n])
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn children(&self) -> &[LabelledTree] {
        &self.children
    }

    /// Re-sorts children recursively. Trees built through [`join`](Self::join)
    /// are already canonical.
    pub fn canonical(&self) -> Self {
        Self::join(
            self.label,
            self.children.iter().map(LabelledTree::canonical).collect(),
        )
    }

    /// The same shape with every label set to 1.
    pub fn unlabelled(&self) -> Self {
        Self::join(1, self.children.iter().map(LabelledTree::unlabelled).collect())
    }

    /// Children grouped into `(distinct child, multiplicity)`.
    fn grouped_children(&self) -> Vec<(&LabelledTree, u64)> {
        let mut groups: Vec<(&LabelledTree, u64)> = Vec::new();
        for c in &self.children {
            match groups.last_mut() {
                Some((t, k)) if *t == c => *k += 1,
                _ => groups.push((c, 1)),
            }
        }
        groups
    }
}

impl fmt::Display for LabelledTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.children.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]_{}", self.label)
    }
}

impl FromStr for LabelledTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        fn parse(bytes: &[u8], pos: &mut usize) -> Result<LabelledTree> {
            let err = |p: usize, what: &str| Error::Parse(format!("tree: expected {what} at byte {p}"));
            if bytes.get(*pos) != Some(&b'[') {
                return Err(err(*pos, "`[`"));
            }
            *pos += 1;
            let mut children = Vec::new();
            if bytes.get(*pos) != Some(&b']') {
                loop {
                    children.push(parse(bytes, pos)?);
                    match bytes.get(*pos) {
                        Some(b',') => *pos += 1,
                        Some(b']') => break,
                        _ => return Err(err(*pos, "`,` or `]`")),
                    }
                }
            }
            *pos += 1;
            if bytes.get(*pos) != Some(&b'_') {
                return Err(err(*pos, "`_`"));
            }
            *pos += 1;
            let start = *pos;
            while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
                *pos += 1;
            }
            let label = std::str::from_utf8(&bytes[start..*pos])
                .ok()
                .and_then(|t| t.parse::<u8>().ok())
                .filter(|&l| l >= 1)
                .ok_or_else(|| err(start, "a label >= 1"))?;
            Ok(LabelledTree::join(label, children))
        }
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bytes = compact.as_bytes();
        let mut pos = 0;
        let tree = parse(bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(Error::Parse(format!("tree: trailing input at byte {pos}")));
        }
        Ok(tree)
    }
}

/// All canonical trees with at most `max_nodes` vertices and labels drawn
/// from `1..=labels`, sorted canonically (hence grouped by order).
pub fn enumerate_trees(max_nodes: usize, labels: u8) -> Vec<LabelledTree> {
    let mut all: Vec<LabelledTree> = Vec::new();
    for n in 1..=max_nodes {
        let mut order_n = Vec::new();
        let mut forest = Vec::new();
        for label in 1..=labels {
            forests_of_size(&all, 0, n - 1, &mut forest, &mut |children| {
                order_n.push(LabelledTree::join(label, children.to_vec()));
            });
        }
        order_n.sort();
        all.extend(order_n);
    }
    all
}

/// Visits every multiset of trees from `pool[from..]` whose sizes sum to
/// `remaining`, as non-decreasing index sequences.
fn forests_of_size(
    pool: &[LabelledTree],
    from: usize,
    remaining: usize,
    current: &mut Vec<LabelledTree>,
    visit: &mut dyn FnMut(&[LabelledTree]),
) {
    if remaining == 0 {
        visit(current);
        return;
    }
    for i in from..pool.len() {
        let size = pool[i].size;
        if size > remaining {
            // pool is sorted by size first
            break;
        }
        current.push(pool[i].clone());
        forests_of_size(pool, i, remaining - size, current, visit);
        current.pop();
    }
}

/// `τ! = |τ| Π τ_i!`, computed on the unlabelled shape.
pub fn tree_factorial(tree: &LabelledTree) -> u64 {
    tree.size as u64 * tree.children.iter().map(tree_factorial).product::<u64>()
}

/// Symmetry factor `σ`, the order of the automorphism group of the
/// unlabelled shape.
pub fn sigma(tree: &LabelledTree) -> u64 {
    fn go(t: &LabelledTree) -> u64 {
        t.grouped_children()
            .into_iter()
            .map(|(c, k)| factorial(k) * go(c).pow(k as u32))
            .product()
    }
    go(&tree.unlabelled())
}

/// Non-negative rational in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rational {
    pub num: u128,
    pub den: u128,
}

impl Rational {
    pub fn new(num: u128, den: u128) -> Self {
        fn gcd(a: u128, b: u128) -> u128 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn mul(self, o: Rational) -> Rational {
        Rational::new(self.num * o.num, self.den * o.den)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// `β` via the multinomial recursion over child sizes:
/// `β([τ_1^{k_1},..]) = (|τ|-1; |τ_1|,..) Π β(τ_i)^{k_i} / k_i!`,
/// where the multinomial runs over every child counted with multiplicity.
pub fn beta(tree: &LabelledTree) -> Rational {
    fn go(t: &LabelledTree) -> Rational {
        let mut acc = Rational::new(factorial(t.size as u64 - 1) as u128, 1);
        for (c, k) in t.grouped_children() {
            let denom = (factorial(c.size as u64) as u128).pow(k as u32) * factorial(k) as u128;
            acc = acc.mul(Rational::new(1, denom));
            let bc = go(c);
            for _ in 0..k {
                acc = acc.mul(bc);
            }
        }
        acc
    }
    go(&tree.unlabelled())
}

fn factorial(n: u64) -> u64 {
    (1..=n).product()
}

/// Per-stage weights `Φ_i(τ) = Π_children (A Φ(child))_i`; a leaf gives 1.
fn stage_weights(t: &ButcherTableau, tree: &LabelledTree) -> Vec<f64> {
    let s = t.stages();
    let mut w = vec![1.0; s];
    for child in &tree.children {
        let cw = stage_weights(t, child);
        for (i, wi) in w.iter_mut().enumerate() {
            *wi *= t.a_row(i).iter().zip(&cw).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    w
}

/// RK elementary weight `φ(τ) = Σ b_{i_1} Π_{(k,l) ∈ E} a_{i_k i_l}`.
/// Labels are ignored.
pub fn elementary_weight(t: &ButcherTableau, tree: &LabelledTree) -> Result<f64> {
    if tree.size > MAX_WEIGHT_NODES {
        return Err(Error::TreeTooLarge {
            nodes: tree.size,
            limit: MAX_WEIGHT_NODES,
        });
    }
    Ok(t.b().iter().zip(stage_weights(t, tree)).map(|(b, w)| b * w).sum())
}

/// One term `multiplicity · (forest ⊗ trunk)` of a coproduct; `trunk == None`
/// is the empty tree and an empty `forest` is the empty forest.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoproductTerm {
    pub forest: Vec<LabelledTree>,
    pub trunk: Option<LabelledTree>,
    pub multiplicity: u64,
}

type ForestPair = (Vec<LabelledTree>, Vec<LabelledTree>);

fn merge_forests(a: &[LabelledTree], b: &[LabelledTree]) -> Vec<LabelledTree> {
    let mut out: Vec<LabelledTree> = a.iter().chain(b).cloned().collect();
    out.sort();
    out
}

/// Coproduct with both legs as forests (the right leg is empty or one tree).
fn delta(tree: &LabelledTree) -> BTreeMap<ForestPair, u64> {
    let mut product: BTreeMap<ForestPair, u64> = BTreeMap::new();
    product.insert((Vec::new(), Vec::new()), 1);
    for child in &tree.children {
        let dc = delta(child);
        let mut next = BTreeMap::new();
        for ((f1, g1), m1) in &product {
            for ((f2, g2), m2) in &dc {
                let key = (merge_forests(f1, f2), merge_forests(g1, g2));
                *next.entry(key).or_insert(0) += m1 * m2;
            }
        }
        product = next;
    }
    let mut out: BTreeMap<ForestPair, u64> = BTreeMap::new();
    for ((forest, trunk_children), m) in product {
        let trunk = LabelledTree::join(tree.label, trunk_children);
        *out.entry((forest, vec![trunk])).or_insert(0) += m;
    }
    *out.entry((vec![tree.clone()], Vec::new())).or_insert(0) += 1;
    out
}

/// Connes–Kreimer coproduct `Δτ = τ ⊗ ∅ + (id ⊗ B_+^a)(Δτ_1 ⋯ Δτ_m)` with
/// equal terms merged.
pub fn coproduct(tree: &LabelledTree) -> Vec<CoproductTerm> {
    delta(tree)
        .into_iter()
        .map(|((forest, mut right), multiplicity)| CoproductTerm {
            forest,
            trunk: right.pop(),
            multiplicity,
        })
        .collect()
}

/// `Δ(∅) = ∅ ⊗ ∅`.
pub fn coproduct_of_empty() -> Vec<CoproductTerm> {
    vec![CoproductTerm {
        forest: Vec::new(),
        trunk: None,
        multiplicity: 1,
    }]
}

/// A map from trees to reals, defined on every canonical tree up to a
/// cutoff order, with value 1 on the empty tree.
#[derive(Clone, Debug)]
pub struct BSeriesCharacter {
    cutoff: usize,
    labels: u8,
    trees: Vec<LabelledTree>,
    values: Vec<f64>,
    index: HashMap<LabelledTree, usize>,
}

impl BSeriesCharacter {
    pub fn from_fn(cutoff: usize, labels: u8, mut f: impl FnMut(&LabelledTree) -> f64) -> Self {
        let trees = enumerate_trees(cutoff, labels);
        let values = trees.iter().map(&mut f).collect();
        let index = trees.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self {
            cutoff,
            labels,
            trees,
            values,
            index,
        }
    }

    /// Convolution identity: zero on every non-empty tree.
    pub fn counit(cutoff: usize) -> Self {
        Self::from_fn(cutoff, 1, |_| 0.0)
    }

    /// Exact flow of an autonomous ODE: `e(τ) = 1/τ!`.
    pub fn exact_flow(cutoff: usize) -> Self {
        Self::from_fn(cutoff, 1, |t| 1.0 / tree_factorial(t) as f64)
    }

    /// Elementary weights of an explicit RK method.
    pub fn runge_kutta(t: &ButcherTableau, cutoff: usize) -> Result<Self> {
        if cutoff > MAX_WEIGHT_NODES {
            return Err(Error::TreeTooLarge {
                nodes: cutoff,
                limit: MAX_WEIGHT_NODES,
            });
        }
        Ok(Self::from_fn(cutoff, 1, |tree| {
            t.b().iter().zip(stage_weights(t, tree)).map(|(b, w)| b * w).sum()
        }))
    }

    /// Character of the same method run with step `-h`: `(-1)^|τ| φ(τ)`.
    pub fn negated_step(&self) -> Self {
        let mut out = self.clone();
        for (v, t) in out.values.iter_mut().zip(&self.trees) {
            if t.size % 2 == 1 {
                *v = -*v;
            }
        }
        out
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn trees(&self) -> &[LabelledTree] {
        &self.trees
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LabelledTree, f64)> {
        self.trees.iter().zip(self.values.iter().copied())
    }

    /// Value at `tree`; `None` past the cutoff or for foreign labels.
    pub fn get(&self, tree: &LabelledTree) -> Option<f64> {
        self.index.get(tree).map(|&i| self.values[i])
    }

    fn at(&self, tree: Option<&LabelledTree>) -> f64 {
        match tree {
            None => 1.0,
            Some(t) => self.values[self.index[t]],
        }
    }

    /// Multiplicative extension to forests.
    fn forest(&self, forest: &[LabelledTree]) -> f64 {
        forest.iter().map(|t| self.at(Some(t))).product()
    }

    /// `(self * other)(τ) = Σ self(τ^(1)) other(τ^(2))`, the character of
    /// the composition "apply `self`, then `other`".
    pub fn convolve(&self, other: &Self) -> Result<Self> {
        if self.cutoff != other.cutoff {
            return Err(Error::CutoffMismatch {
                left: self.cutoff,
                right: other.cutoff,
            });
        }
        if self.labels != other.labels {
            return Err(Error::Config(format!(
                "label alphabets differ ({} vs {})",
                self.labels, other.labels
            )));
        }
        let mut out = self.clone();
        for (i, tree) in self.trees.iter().enumerate() {
            out.values[i] = coproduct(tree)
                .iter()
                .map(|term| {
                    term.multiplicity as f64
                        * self.forest(&term.forest)
                        * other.at(term.trunk.as_ref())
                })
                .sum();
        }
        Ok(out)
    }
}

/// For each order `1..=order`, the largest `|(φ * φ̄)(τ)|` over trees of that
/// order, where `φ̄` is the negative-step character. All zero means the
/// backward step undoes the forward step up to that order.
pub fn check_effective_symmetry(t: &ButcherTableau, order: usize) -> Result<Vec<f64>> {
    let phi = BSeriesCharacter::runge_kutta(t, order)?;
    let composed = phi.convolve(&phi.negated_step())?;
    Ok(max_abs_by_order(composed.iter(), order))
}

/// For each order `1..=order`, the largest `|φ(τ) - 1/τ!|`.
pub fn order_residuals(t: &ButcherTableau, order: usize) -> Result<Vec<f64>> {
    let phi = BSeriesCharacter::runge_kutta(t, order)?;
    Ok(max_abs_by_order(
        phi.iter()
            .map(|(tree, v)| (tree, v - 1.0 / tree_factorial(tree) as f64)),
        order,
    ))
}

fn max_abs_by_order<'a>(
    values: impl Iterator<Item = (&'a LabelledTree, f64)>,
    order: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; order];
    for (tree, v) in values {
        let slot = &mut out[tree.size - 1];
        *slot = slot.max(v.abs());
    }
    out
}

/// Largest `p <= max_order` with every order condition up to `p` satisfied.
pub fn classical_order(t: &ButcherTableau, max_order: usize) -> Result<usize> {
    let residuals = order_residuals(t, max_order)?;
    Ok(residuals.iter().take_while(|r| **r <= SYMMETRY_TOL).count())
}

/// Largest `m <= max_order` such that the symmetric-composition residual
/// vanishes at every order up to `m`.
pub fn symmetry_order(t: &ButcherTableau, max_order: usize) -> Result<usize> {
    let residuals = check_effective_symmetry(t, max_order)?;
    Ok(residuals.iter().take_while(|r| **r <= SYMMETRY_TOL).count())
}
