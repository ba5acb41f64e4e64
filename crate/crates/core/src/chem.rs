//! SMILES subset parser, molecular graphs and atom featurization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::tensor::Matrix;

/// Highest supported atom degree; the degree one-hot caps here.
pub const MAX_DEGREE: usize = 6;

/// Width of the per-atom feature vector.
pub const ATOM_FEATURES: usize = Element::ALL.len() + MAX_DEGREE + 1 + 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChemError {
    #[error("empty SMILES")]
    EmptyInput,
    #[error("unsupported element '{symbol}' at byte {offset}")]
    UnsupportedElement { symbol: String, offset: usize },
    #[error("unbalanced parentheses at byte {offset}")]
    UnbalancedParentheses { offset: usize },
    #[error("unmatched ring closure {label} at byte {offset}")]
    UnmatchedRingClosure { label: u32, offset: usize },
    #[error("syntax error at byte {offset}: {message}")]
    SyntaxError { offset: usize, message: String },
    #[error("atom {atom} has degree {degree}, above the supported maximum of {MAX_DEGREE}")]
    DegreeOverflow { atom: usize, degree: usize },
    #[error("invalid molecular graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Element {
    B,
    C,
    N,
    O,
    P,
    S,
    F,
    Cl,
    Br,
    I,
}

impl Element {
    /// Feature-slot order.
    pub const ALL: [Element; 10] = [
        Element::B,
        Element::C,
        Element::N,
        Element::O,
        Element::P,
        Element::S,
        Element::F,
        Element::Cl,
        Element::Br,
        Element::I,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::B => "B",
            Element::C => "C",
            Element::N => "N",
            Element::O => "O",
            Element::P => "P",
            Element::S => "S",
            Element::F => "F",
            Element::Cl => "Cl",
            Element::Br => "Br",
            Element::I => "I",
        }
    }

    pub fn from_symbol(symbol: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|e| e.symbol() == symbol)
    }

    pub fn slot(self) -> usize {
        self as usize
    }

    /// Elements that may be written aromatic (lowercase) in the supported subset.
    fn can_be_aromatic(self) -> bool {
        matches!(
            self,
            Element::B | Element::C | Element::N | Element::O | Element::P | Element::S
        )
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Atom {
    pub element: Element,
    pub aromatic: bool,
    pub formal_charge: i8,
    /// Hydrogens written in a bracket atom. Organic-subset atoms carry 0.
    pub explicit_h: u8,
}

impl Atom {
    pub fn new(element: Element, aromatic: bool) -> Self {
        Self {
            element,
            aromatic,
            formal_charge: 0,
            explicit_h: 0,
        }
    }
}

/// Connectivity-only molecular graph. Hydrogens are never nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    source_smiles: String,
}

impl MolGraph {
    /// Validates and builds a graph. Bond pairs are stored with `i < j`.
    pub fn new(
        atoms: Vec<Atom>,
        bonds: impl IntoIterator<Item = (usize, usize)>,
        source_smiles: impl Into<String>,
    ) -> Result<Self, ChemError> {
        if atoms.is_empty() {
            return Err(ChemError::InvalidGraph("no atoms".into()));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::new();
        let mut neighbors = vec![Vec::new(); atoms.len()];
        for (a, b) in bonds {
            if a == b {
                return Err(ChemError::InvalidGraph(format!("self-loop on atom {a}")));
            }
            if a >= atoms.len() || b >= atoms.len() {
                return Err(ChemError::InvalidGraph(format!(
                    "bond ({a}, {b}) out of range for {} atoms",
                    atoms.len()
                )));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(ChemError::InvalidGraph(format!(
                    "duplicate bond ({}, {})",
                    key.0, key.1
                )));
            }
            normalized.push(key);
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for (i, nb) in neighbors.iter_mut().enumerate() {
            nb.sort_unstable();
            if nb.len() > MAX_DEGREE {
                return Err(ChemError::DegreeOverflow {
                    atom: i,
                    degree: nb.len(),
                });
            }
        }
        Ok(Self {
            atoms,
            bonds: normalized,
            neighbors,
            source_smiles: source_smiles.into(),
        })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    /// Neighbors of atom `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn source_smiles(&self) -> &str {
        &self.source_smiles
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, ChemError> {
        let n = self.atoms.len();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if perm.len() != n || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(ChemError::InvalidGraph("not a permutation".into()));
        }
        let mut atoms = self.atoms.clone();
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let bonds = self.bonds.iter().map(|&(a, b)| (perm[a], perm[b]));
        Self::new(atoms, bonds, self.source_smiles.clone())
    }

    /// True if the bond graph is a single connected component.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.atoms.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Trims whitespace and keeps the fragment with the most atoms.
///
/// Ties go to the first fragment. Fragment atom counts come from a lexical
/// scan, so a fragment need not parse to be counted.
pub fn sanitize_smiles(text: &str) -> Result<String, ChemError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    if !trimmed.contains('.') {
        return Ok(trimmed.to_string());
    }
    let mut best: Option<(&str, usize)> = None;
    for frag in trimmed.split('.') {
        let count = count_atoms(frag);
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((frag, count));
        }
    }
    let (frag, _) = best.expect("split yields at least one fragment");
    if frag.is_empty() {
        return Err(ChemError::EmptyInput);
    }
    Ok(frag.to_string())
}

fn count_atoms(frag: &str) -> usize {
    let bytes = frag.as_bytes();
    let mut i = 0;
    let mut count = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => {
                count += 1;
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
            }
            b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I' => count += 1,
            b'b' | b'c' | b'n' | b'o' | b'p' | b's' => count += 1,
            // the 'r' of Br and the 'l' of Cl are not atoms
            _ => {}
        }
        i += 1;
    }
    count
}

/// Parses a single-fragment SMILES into a connectivity graph.
pub fn parse_smiles(text: &str) -> Result<MolGraph, ChemError> {
    Parser::new(text).run()
}

/// `sanitize_smiles` followed by `parse_smiles`.
pub fn parse_raw_smiles(text: &str) -> Result<MolGraph, ChemError> {
    parse_smiles(&sanitize_smiles(text)?)
}

struct RingOpen {
    atom: usize,
    offset: usize,
}

struct Parser<'s> {
    text: &'s str,
    bytes: &'s [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize)>,
    bond_set: BTreeSet<(usize, usize)>,
    prev: Option<usize>,
    branches: Vec<(Option<usize>, usize)>,
    rings: BTreeMap<u32, RingOpen>,
    /// Offset of a bond symbol not yet consumed by an atom or ring closure.
    pending_bond: Option<usize>,
    /// Offset of the most recent '(' whose branch has no atom yet.
    empty_branch: Option<usize>,
}

impl<'s> Parser<'s> {
    fn new(text: &'s str) -> Self {
        Self {
            text,
            bytes: text.as_bytes(),
            pos: 0,
            atoms: Vec::new(),
            bonds: Vec::new(),
            bond_set: BTreeSet::new(),
            prev: None,
            branches: Vec::new(),
            rings: BTreeMap::new(),
            pending_bond: None,
            empty_branch: None,
        }
    }

    fn syntax(&self, offset: usize, message: impl Into<String>) -> ChemError {
        ChemError::SyntaxError {
            offset,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn run(mut self) -> Result<MolGraph, ChemError> {
        if self.text.trim().is_empty() {
            return Err(ChemError::EmptyInput);
        }
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    if self.prev.is_none() {
                        return Err(self.syntax(start, "branch before any atom"));
                    }
                    if self.pending_bond.is_some() {
                        return Err(self.syntax(start, "bond symbol before '('"));
                    }
                    self.branches.push((self.prev, start));
                    self.empty_branch = Some(start);
                    self.pos += 1;
                }
                b')' => {
                    if let Some(off) = self.pending_bond {
                        return Err(self.syntax(off, "dangling bond symbol"));
                    }
                    if let Some(off) = self.empty_branch {
                        return Err(self.syntax(off, "empty branch"));
                    }
                    let (prev, _) = self
                        .branches
                        .pop()
                        .ok_or(ChemError::UnbalancedParentheses { offset: start })?;
                    self.prev = prev;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' | b'$' => {
                    if self.prev.is_none() {
                        return Err(self.syntax(start, "bond symbol before any atom"));
                    }
                    if self.pending_bond.is_some() {
                        return Err(self.syntax(start, "two consecutive bond symbols"));
                    }
                    self.pending_bond = Some(start);
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => self.ring_closure()?,
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, start)?;
                }
                b'.' => {
                    return Err(self.syntax(start, "multiple fragments; sanitize first"));
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom, start)?;
                }
            }
        }
        if let Some(off) = self.pending_bond {
            return Err(self.syntax(off, "dangling bond symbol"));
        }
        if let Some(&(_, offset)) = self.branches.last() {
            return Err(ChemError::UnbalancedParentheses { offset });
        }
        if let Some((&label, open)) = self.rings.iter().next() {
            return Err(ChemError::UnmatchedRingClosure {
                label,
                offset: open.offset,
            });
        }
        if self.atoms.is_empty() {
            return Err(ChemError::EmptyInput);
        }
        MolGraph::new(self.atoms, self.bonds, self.text)
    }

    fn add_bond(&mut self, a: usize, b: usize, offset: usize) -> Result<(), ChemError> {
        if a == b {
            return Err(self.syntax(offset, "ring closure onto the same atom"));
        }
        let key = (a.min(b), a.max(b));
        if !self.bond_set.insert(key) {
            return Err(self.syntax(offset, "duplicate bond"));
        }
        self.bonds.push(key);
        Ok(())
    }

    fn add_atom(&mut self, atom: Atom, offset: usize) -> Result<(), ChemError> {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        if let Some(p) = self.prev {
            self.add_bond(p, idx, offset)?;
        }
        self.pending_bond = None;
        self.empty_branch = None;
        self.prev = Some(idx);
        Ok(())
    }

    fn ring_closure(&mut self) -> Result<(), ChemError> {
        let start = self.pos;
        let label = if self.bytes[start] == b'%' {
            let digits = self.bytes.get(start + 1..start + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0')
                }
                _ => return Err(self.syntax(start, "'%' must be followed by two digits")),
            }
        } else {
            self.pos += 1;
            u32::from(self.bytes[start] - b'0')
        };
        let Some(current) = self.prev else {
            return Err(self.syntax(start, "ring closure before any atom"));
        };
        if self.empty_branch.is_some() {
            return Err(self.syntax(start, "ring closure at start of branch"));
        }
        match self.rings.remove(&label) {
            Some(open) => self.add_bond(open.atom, current, start)?,
            None => {
                self.rings.insert(
                    label,
                    RingOpen {
                        atom: current,
                        offset: start,
                    },
                );
            }
        }
        self.pending_bond = None;
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, ChemError> {
        let start = self.pos;
        let c = self.bytes[start];
        let next = self.bytes.get(start + 1).copied();
        let (element, aromatic, width) = match (c, next) {
            (b'C', Some(b'l')) => (Element::Cl, false, 2),
            (b'B', Some(b'r')) => (Element::Br, false, 2),
            (b'B', _) => (Element::B, false, 1),
            (b'C', _) => (Element::C, false, 1),
            (b'N', _) => (Element::N, false, 1),
            (b'O', _) => (Element::O, false, 1),
            (b'P', _) => (Element::P, false, 1),
            (b'S', _) => (Element::S, false, 1),
            (b'F', _) => (Element::F, false, 1),
            (b'I', _) => (Element::I, false, 1),
            (b'b', _) => (Element::B, true, 1),
            (b'c', _) => (Element::C, true, 1),
            (b'n', _) => (Element::N, true, 1),
            (b'o', _) => (Element::O, true, 1),
            (b'p', _) => (Element::P, true, 1),
            (b's', _) => (Element::S, true, 1),
            _ if c.is_ascii_alphabetic() => {
                let mut end = start + 1;
                if c.is_ascii_uppercase() && next.is_some_and(|n| n.is_ascii_lowercase()) {
                    end += 1;
                }
                return Err(ChemError::UnsupportedElement {
                    symbol: self.text[start..end].to_string(),
                    offset: start,
                });
            }
            _ => {
                let ch = self.text[start..].chars().next().unwrap_or('?');
                return Err(self.syntax(start, format!("unexpected character '{ch}'")));
            }
        };
        self.pos += width;
        Ok(Atom::new(element, aromatic))
    }

    fn bracket_atom(&mut self) -> Result<Atom, ChemError> {
        let open = self.pos;
        let close = self.bytes[open..]
            .iter()
            .position(|&b| b == b']')
            .map(|p| open + p)
            .ok_or_else(|| self.syntax(open, "unterminated bracket atom"))?;
        let body = &self.bytes[open + 1..close];
        let mut i = 0;

        // isotope
        while i < body.len() && body[i].is_ascii_digit() {
            i += 1;
        }

        let sym_start = i;
        if i >= body.len() || !body[i].is_ascii_alphabetic() {
            return Err(self.syntax(open + 1 + i, "missing element symbol"));
        }
        let (element, aromatic) = if body[i].is_ascii_lowercase() {
            // aromatic bracket symbols in the supported subset are one letter
            i += 1;
            let sym = std::str::from_utf8(&body[sym_start..i]).expect("ascii");
            match Element::from_symbol(&sym.to_ascii_uppercase()) {
                Some(e) if e.can_be_aromatic() => (e, true),
                _ => {
                    return Err(ChemError::UnsupportedElement {
                        symbol: sym.to_string(),
                        offset: open + 1 + sym_start,
                    })
                }
            }
        } else {
            i += 1;
            if i < body.len() && body[i].is_ascii_lowercase() {
                i += 1;
            }
            let sym = std::str::from_utf8(&body[sym_start..i]).expect("ascii");
            let element = Element::from_symbol(sym);
            match element {
                Some(e) => (e, false),
                None => {
                    return Err(ChemError::UnsupportedElement {
                        symbol: sym.to_string(),
                        offset: open + 1 + sym_start,
                    })
                }
            }
        };

        // chirality
        if i < body.len() && body[i] == b'@' {
            i += 1;
            if i < body.len() && body[i] == b'@' {
                i += 1;
            }
        }

        let mut explicit_h = 0u8;
        if i < body.len() && body[i] == b'H' {
            i += 1;
            explicit_h = 1;
            if i < body.len() && body[i].is_ascii_digit() {
                explicit_h = body[i] - b'0';
                i += 1;
            }
        }

        let mut charge: i32 = 0;
        if i < body.len() && (body[i] == b'+' || body[i] == b'-') {
            let sign = body[i];
            let sign_value = if sign == b'+' { 1 } else { -1 };
            i += 1;
            if i < body.len() && body[i].is_ascii_digit() {
                let mut magnitude = 0i32;
                while i < body.len() && body[i].is_ascii_digit() {
                    magnitude = magnitude * 10 + i32::from(body[i] - b'0');
                    i += 1;
                }
                charge = sign_value * magnitude;
            } else {
                charge = sign_value;
                while i < body.len() && body[i] == sign {
                    charge += sign_value;
                    i += 1;
                }
            }
        }
        if !(-2..=2).contains(&charge) {
            return Err(self.syntax(open, format!("formal charge {charge} out of range")));
        }

        // atom class
        if i < body.len() && body[i] == b':' {
            i += 1;
            let digits_start = i;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
            if i == digits_start {
                return Err(self.syntax(open + 1 + i, "empty atom class"));
            }
        }

        if i != body.len() {
            return Err(self.syntax(open + 1 + i, "unexpected content in bracket atom"));
        }
        self.pos = close + 1;
        Ok(Atom {
            element,
            aromatic,
            formal_charge: charge as i8,
            explicit_h,
        })
    }
}

/// Writes a connected graph as SMILES that parses back to the same graph up
/// to atom order. Bond orders are not represented.
pub fn write_smiles(graph: &MolGraph) -> Result<String, ChemError> {
    if !graph.is_connected() {
        return Err(ChemError::InvalidGraph("cannot write a disconnected graph".into()));
    }
    let n = graph.atom_count();
    let mut visited = vec![false; n];
    let mut children = vec![Vec::new(); n];
    let mut tree_edges = BTreeSet::new();
    // (ancestor, descendant) pairs closed by ring labels
    let mut closures: Vec<(usize, usize)> = Vec::new();
    let mut stack = vec![(0usize, usize::MAX, 0usize)];
    visited[0] = true;
    while let Some(top) = stack.last_mut() {
        let (v, parent) = (top.0, top.1);
        let nb = graph.neighbors(v);
        if top.2 == nb.len() {
            stack.pop();
            continue;
        }
        let u = nb[top.2];
        top.2 += 1;
        if u == parent {
            continue;
        }
        if !visited[u] {
            visited[u] = true;
            children[v].push(u);
            tree_edges.insert((v.min(u), v.max(u)));
            stack.push((u, v, 0));
        } else if !tree_edges.contains(&(v.min(u), v.max(u)))
            && !closures.contains(&(u, v))
            && !closures.contains(&(v, u))
        {
            // first sighting of a non-tree edge is always from the descendant
            closures.push((u, v));
        }
    }

    let mut w = SmilesWriter {
        graph,
        children,
        closures,
        labels: BTreeMap::new(),
        in_use: BTreeSet::new(),
        out: String::new(),
    };
    w.emit(0);
    Ok(w.out)
}

struct SmilesWriter<'g> {
    graph: &'g MolGraph,
    children: Vec<Vec<usize>>,
    closures: Vec<(usize, usize)>,
    labels: BTreeMap<(usize, usize), u32>,
    in_use: BTreeSet<u32>,
    out: String,
}

impl SmilesWriter<'_> {
    fn emit(&mut self, v: usize) {
        let atom = self.graph.atoms()[v];
        self.write_atom(&atom);
        // open before closing so a label is never reused on the same atom
        let opening: Vec<(usize, usize)> = self.closures.iter().copied().filter(|&(a, _)| a == v).collect();
        for key in opening {
            let label = (1..).find(|l| !self.in_use.contains(l)).expect("labels are unbounded");
            self.in_use.insert(label);
            self.labels.insert(key, label);
            self.write_label(label);
        }
        let closing: Vec<(usize, usize)> = self.closures.iter().copied().filter(|&(_, d)| d == v).collect();
        for key in closing {
            let label = self.labels[&key];
            self.in_use.remove(&label);
            self.write_label(label);
        }
        let kids = self.children[v].clone();
        for (k, &c) in kids.iter().enumerate() {
            if k + 1 < kids.len() {
                self.out.push('(');
                self.emit(c);
                self.out.push(')');
            } else {
                self.emit(c);
            }
        }
    }

    fn write_label(&mut self, label: u32) {
        if label < 10 {
            self.out.push_str(&label.to_string());
        } else {
            self.out.push_str(&format!("%{label:02}"));
        }
    }

    fn write_atom(&mut self, atom: &Atom) {
        let symbol = if atom.aromatic {
            atom.element.symbol().to_lowercase()
        } else {
            atom.element.symbol().to_string()
        };
        if atom.formal_charge == 0 && atom.explicit_h == 0 {
            self.out.push_str(&symbol);
            return;
        }
        self.out.push('[');
        self.out.push_str(&symbol);
        match atom.explicit_h {
            0 => {}
            1 => self.out.push('H'),
            h => self.out.push_str(&format!("H{h}")),
        }
        match atom.formal_charge {
            0 => {}
            1 => self.out.push('+'),
            -1 => self.out.push('-'),
            c if c > 0 => self.out.push_str(&format!("+{c}")),
            c => self.out.push_str(&format!("-{}", -c)),
        }
        self.out.push(']');
    }
}

/// Column names of [`featurize`] output, in order.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = Element::ALL.iter().map(|e| format!("elem_{e}")).collect();
    names.extend((0..=MAX_DEGREE).map(|d| format!("degree_{d}")));
    names.push("aromatic".into());
    names
}

/// One row per atom: element one-hot, degree one-hot (0..=6), aromatic flag.
pub fn featurize(graph: &MolGraph) -> Matrix {
    let mut out = Matrix::zeros(graph.atom_count(), ATOM_FEATURES);
    let degree_base = Element::ALL.len();
    let aromatic_slot = degree_base + MAX_DEGREE + 1;
    for (i, atom) in graph.atoms().iter().enumerate() {
        out.set(i, atom.element.slot(), 1.0);
        out.set(i, degree_base + graph.degree(i).min(MAX_DEGREE), 1.0);
        if atom.aromatic {
            out.set(i, aromatic_slot, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_names_match_width() {
        let names = feature_names();
        assert_eq!(names.len(), ATOM_FEATURES);
        assert_eq!(names[1], "elem_C");
        assert_eq!(names.last().unwrap(), "aromatic");
    }

    #[test]
    fn sanitize_examples() {
        assert_eq!(sanitize_smiles("CCO").unwrap(), "CCO");
        assert_eq!(sanitize_smiles("CC(=O)O.[Na+]").unwrap(), "CC(=O)O");
        assert_eq!(sanitize_smiles("   C  ").unwrap(), "C");
        assert_eq!(sanitize_smiles("  \t"), Err(ChemError::EmptyInput));
        // ties keep the first fragment
        assert_eq!(sanitize_smiles("CO.OC").unwrap(), "CO");
        assert_eq!(sanitize_smiles("[Na+].[Cl-].CCl").unwrap(), "CCl");
    }

    #[test]
    fn parse_single_atom() {
        let g = parse_smiles("C").unwrap();
        assert_eq!(g.atom_count(), 1);
        assert!(g.bonds().is_empty());
    }

    #[test]
    fn parse_benzene() {
        let g = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert_eq!(g.bonds().len(), 6);
        assert!(g.atoms().iter().all(|a| a.aromatic && a.element == Element::C));
        assert_eq!(g.degrees(), vec![2; 6]);
        assert!(g.bonds().contains(&(0, 5)));
    }

    #[test]
    fn parse_branch() {
        let g = parse_smiles("CC(C)C").unwrap();
        assert_eq!(g.bonds(), &[(0, 1), (1, 2), (1, 3)]);
        assert_eq!(g.degrees(), vec![1, 3, 1, 1]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_smiles("C1CC"),
            Err(ChemError::UnmatchedRingClosure { label: 1, offset: 1 })
        ));
        assert!(matches!(
            parse_smiles("CC(C"),
            Err(ChemError::UnbalancedParentheses { offset: 2 })
        ));
        assert!(matches!(
            parse_smiles("CC)C"),
            Err(ChemError::UnbalancedParentheses { offset: 2 })
        ));
        assert!(matches!(
            parse_smiles("C[Cu]"),
            Err(ChemError::UnsupportedElement { ref symbol, offset: 2 }) if symbol == "Cu"
        ));
        assert!(matches!(
            parse_smiles("CXC"),
            Err(ChemError::UnsupportedElement { ref symbol, offset: 1 }) if symbol == "X"
        ));
        assert!(matches!(parse_smiles("C=(C)"), Err(ChemError::SyntaxError { offset: 2, .. })));
        assert!(matches!(parse_smiles("CC="), Err(ChemError::SyntaxError { offset: 2, .. })));
        assert!(matches!(parse_smiles("C()C"), Err(ChemError::SyntaxError { offset: 1, .. })));
        assert!(matches!(parse_smiles("C11"), Err(ChemError::SyntaxError { .. })));
        assert!(matches!(parse_smiles("C1C1"), Err(ChemError::SyntaxError { .. })));
        assert!(matches!(parse_smiles("C.C"), Err(ChemError::SyntaxError { offset: 1, .. })));
        assert!(matches!(parse_smiles("C[C"), Err(ChemError::SyntaxError { offset: 1, .. })));
        assert!(matches!(parse_smiles("[H]"), Err(ChemError::UnsupportedElement { .. })));
        assert!(matches!(parse_smiles("[C+3]"), Err(ChemError::SyntaxError { .. })));
    }

    #[test]
    fn parse_brackets_stereo_and_rings() {
        let g = parse_smiles("[13CH3][C@@H](N)C(=O)[O-]").unwrap();
        assert_eq!(g.atom_count(), 6);
        assert_eq!(g.atoms()[0].explicit_h, 3);
        assert_eq!(g.atoms()[5].formal_charge, -1);

        let g = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(g.bonds().len(), 3);

        let g = parse_smiles("[nH]1cccc1").unwrap();
        assert!(g.atoms()[0].aromatic);
        assert_eq!(g.atoms()[0].explicit_h, 1);

        let g = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(g.bonds().len(), 3);

        let g = parse_smiles("[S+2]([O-])([O-])").unwrap();
        assert_eq!(g.atoms()[0].formal_charge, 2);

        let g = parse_smiles("[Cl-]").unwrap();
        assert_eq!(g.atoms()[0].element, Element::Cl);
        assert_eq!(g.atoms()[0].formal_charge, -1);

        let g = parse_smiles("[N++]").unwrap();
        assert_eq!(g.atoms()[0].formal_charge, 2);

        // ring digit reused after closing
        let g = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        assert_eq!(g.atom_count(), 12);
        assert_eq!(g.bonds().len(), 13);

        let g = parse_smiles("C=1CC1").unwrap();
        assert_eq!(g.bonds().len(), 3);
    }

    #[test]
    fn degree_overflow_is_reported() {
        assert!(parse_smiles("S(F)(F)(F)(F)(F)F").is_ok());
        assert!(matches!(
            parse_smiles("C(C)(C)(C)(C)(C)(C)C"),
            Err(ChemError::DegreeOverflow { atom: 0, degree: 7 })
        ));
    }

    #[test]
    fn featurize_examples() {
        let f = featurize(&parse_smiles("C").unwrap());
        assert_eq!(f.shape(), (1, ATOM_FEATURES));
        assert_eq!(ATOM_FEATURES, 18);
        let mut expected = vec![0.0; 18];
        expected[Element::C.slot()] = 1.0;
        expected[10] = 1.0;
        assert_eq!(f.row(0), expected.as_slice());

        let f = featurize(&parse_smiles("CC").unwrap());
        assert_eq!(f.get(0, 11), 1.0);
        assert_eq!(f.get(1, 11), 1.0);

        let f = featurize(&parse_smiles("c1ccccc1").unwrap());
        let mut expected = vec![0.0; 18];
        expected[Element::C.slot()] = 1.0;
        expected[12] = 1.0;
        expected[17] = 1.0;
        for r in 0..6 {
            assert_eq!(f.row(r), expected.as_slice());
        }
    }

    #[test]
    fn permuted_relabels_bonds() {
        let g = parse_smiles("CCO").unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.atoms()[1].element, Element::O);
        assert_eq!(p.atoms()[2].element, g.atoms()[0].element);
        assert_eq!(p.neighbors(0), &[1, 2]);
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }

    #[test]
    fn write_round_trips() {
        for smiles in [
            "C",
            "CCO",
            "c1ccccc1",
            "CC(C)(C)C",
            "c1ccc2ccccc2c1",
            "C1CC2CCC1CC2",
            "O=C(O)c1ccc[nH]1",
            "C[N+](C)(C)C",
            "[O-]c1ccccc1Cl",
            "C12C3C4C1C5C2C3C45",
        ] {
            let g = parse_smiles(smiles).unwrap();
            let written = write_smiles(&g).unwrap();
            let back = parse_smiles(&written).unwrap();
            assert_eq!(back.atoms(), g.atoms(), "{smiles} -> {written}");
            assert_eq!(back.bonds(), g.bonds(), "{smiles} -> {written}");
        }
    }
}
