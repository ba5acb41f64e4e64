//! Seeded random molecules for fixtures, gradient checks and benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chem::{write_smiles, Atom, Element, MolGraph};

fn valence(e: Element) -> usize {
    match e {
        Element::C => 4,
        Element::N | Element::B | Element::P => 3,
        Element::O | Element::S => 2,
        _ => 1,
    }
}

fn chain_element(rng: &mut impl Rng, allow_halogen: bool) -> Element {
    let r: f64 = rng.gen();
    match r {
        r if r < 0.62 => Element::C,
        r if r < 0.74 => Element::N,
        r if r < 0.86 => Element::O,
        r if r < 0.90 => Element::S,
        _ if !allow_halogen => Element::C,
        r if r < 0.95 => Element::F,
        _ => Element::Br,
    }
}

struct Builder {
    atoms: Vec<Atom>,
    bonds: Vec<(usize, usize)>,
    degree: Vec<usize>,
}

impl Builder {
    fn new() -> Self {
        Self {
            atoms: Vec::new(),
            bonds: Vec::new(),
            degree: Vec::new(),
        }
    }

    fn add(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.degree.push(0);
        self.atoms.len() - 1
    }

    fn bond(&mut self, a: usize, b: usize) {
        self.bonds.push((a, b));
        self.degree[a] += 1;
        self.degree[b] += 1;
    }

    fn free(&self, i: usize) -> bool {
        self.degree[i] < valence(self.atoms[i].element)
    }

    fn random_free_atom(&self, rng: &mut impl Rng) -> Option<usize> {
        let open: Vec<usize> = (0..self.atoms.len()).filter(|&i| self.free(i)).collect();
        if open.is_empty() {
            None
        } else {
            Some(open[rng.gen_range(0..open.len())])
        }
    }

    /// Adds a ring of `size` atoms and attaches it to an existing atom.
    fn ring(&mut self, rng: &mut impl Rng, size: usize, aromatic: bool, hetero: Option<Element>) -> usize {
        let anchor = if self.atoms.is_empty() {
            None
        } else {
            self.random_free_atom(rng)
        };
        let first = self.atoms.len();
        for k in 0..size {
            let element = match hetero {
                Some(e) if k == size / 2 => e,
                _ => Element::C,
            };
            self.add(Atom::new(element, aromatic));
        }
        for k in 0..size {
            self.bond(first + k, first + (k + 1) % size);
        }
        if let Some(a) = anchor {
            self.bond(a, first);
        }
        first
    }

    /// Grows `count` chain atoms onto random atoms with free valence.
    fn grow(&mut self, rng: &mut impl Rng, count: usize, allow_halogen: bool) {
        for _ in 0..count {
            let e = chain_element(rng, allow_halogen);
            match self.random_free_atom(rng) {
                Some(a) => {
                    let b = self.add(Atom::new(e, false));
                    self.bond(a, b);
                }
                None if self.atoms.is_empty() => {
                    self.add(Atom::new(e, false));
                }
                None => return,
            }
        }
    }

    fn finish(self) -> MolGraph {
        MolGraph::new(self.atoms, self.bonds, "").expect("builder respects valences")
    }
}

/// Random connected graph with between `min` and `max` atoms (both at
/// least 1), possibly with one ring.
pub fn random_graph(rng: &mut impl Rng, min: usize, max: usize) -> MolGraph {
    let min = min.max(1);
    let target = rng.gen_range(min..=max.max(min));
    // halogens can cap every open valence early; retry until big enough
    let mut b = Builder::new();
    while b.atoms.len() < min {
        b = Builder::new();
        b.grow(rng, target, true);
    }
    let n = b.atoms.len();
    // close one ring between two non-adjacent atoms with free valence
    if n >= 4 && rng.gen_bool(0.4) {
        let open: Vec<usize> = (0..n).filter(|&i| b.free(i)).collect();
        'pick: for &i in &open {
            for &j in open.iter().rev() {
                let adjacent = b.bonds.contains(&(i, j)) || b.bonds.contains(&(j, i));
                if i < j && !adjacent && b.free(i) && b.free(j) {
                    b.bond(i, j);
                    break 'pick;
                }
            }
        }
    }
    if n >= 3 && rng.gen_bool(0.3) {
        let i = rng.gen_range(0..n);
        if b.atoms[i].element == Element::C {
            b.atoms[i].aromatic = true;
        }
    }
    b.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RingKind {
    None,
    Aliphatic,
    Aromatic,
}

fn molecule(rng: &mut impl Rng, ring: RingKind, chain: usize, halogens: bool) -> Builder {
    let mut b = Builder::new();
    match ring {
        RingKind::None => {}
        RingKind::Aliphatic => {
            let size = rng.gen_range(5..=6);
            let hetero = rng.gen_bool(0.3).then_some(Element::N);
            b.ring(rng, size, false, hetero);
        }
        RingKind::Aromatic => {
            let hetero = rng.gen_bool(0.3).then_some(Element::N);
            b.ring(rng, 6, true, hetero);
        }
    }
    b.grow(rng, chain, halogens);
    b
}

/// SMILES of `n` random molecules labelled 1 when they contain an aromatic
/// ring. Non-aromatic molecules carry an aliphatic ring half of the time,
/// so ring presence alone does not give the label away.
pub fn aromatic_fixture(n: usize, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let aromatic = rng.gen_bool(0.5);
            let ring = if aromatic {
                RingKind::Aromatic
            } else if rng.gen_bool(0.5) {
                RingKind::Aliphatic
            } else {
                RingKind::None
            };
            let chain = rng.gen_range(1..=6);
            let g = molecule(&mut rng, ring, chain, true).finish();
            (write_smiles(&g).expect("connected"), if aromatic { 1.0 } else { 0.0 })
        })
        .collect()
}

/// Regression targets for the same kind of molecules: the number of
/// aromatic atoms plus a tenth of the heavy-atom count.
pub fn aromatic_regression_fixture(n: usize, seed: u64) -> Vec<(String, f64)> {
    aromatic_fixture(n, seed)
        .into_iter()
        .map(|(smiles, _)| {
            let g = crate::chem::parse_smiles(&smiles).expect("writer output parses");
            let aromatic = g.atoms().iter().filter(|a| a.aromatic).count() as f64;
            (smiles, aromatic + 0.1 * g.atom_count() as f64)
        })
        .collect()
}

/// Imbalanced binary task. A molecule is positive when a chlorine sits
/// directly on an aromatic ring, which is planted in roughly
/// `positive_rate` of the molecules; decoys carry aromatic rings and
/// chlorines apart from each other. One percent of labels are flipped.
pub fn imbalanced_fixture(n: usize, positive_rate: f64, seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let positive = rng.gen_bool(positive_rate);
            let ring = if positive || rng.gen_bool(0.5) {
                RingKind::Aromatic
            } else if rng.gen_bool(0.5) {
                RingKind::Aliphatic
            } else {
                RingKind::None
            };
            let chain = rng.gen_range(1..=7);
            let mut b = molecule(&mut rng, ring, chain, true);
            if positive {
                // first ring atom after the anchor is aromatic carbon
                let ring_atom = (0..b.atoms.len())
                    .find(|&i| b.atoms[i].aromatic && b.atoms[i].element == Element::C && b.free(i))
                    .expect("aromatic ring has a free carbon");
                let cl = b.add(Atom::new(Element::Cl, false));
                b.bond(ring_atom, cl);
            } else if rng.gen_bool(0.3) {
                // a decoy chlorine on an aliphatic carbon
                if let Some(c) = (0..b.atoms.len())
                    .find(|&i| !b.atoms[i].aromatic && b.atoms[i].element == Element::C && b.free(i))
                {
                    let cl = b.add(Atom::new(Element::Cl, false));
                    b.bond(c, cl);
                }
            }
            let label = positive ^ rng.gen_bool(0.01);
            let g = b.finish();
            (write_smiles(&g).expect("connected"), if label { 1.0 } else { 0.0 })
        })
        .collect()
}

/// CSV text with a `smiles` column and one label column.
pub fn fixture_csv(rows: &[(String, f64)], task: &str) -> String {
    let mut out = format!("smiles,{task}\n");
    for (s, y) in rows {
        out.push_str(&format!("{s},{y}\n"));
    }
    out
}
