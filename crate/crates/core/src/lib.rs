//! Molecular property prediction with graph convolutions and a dummy super
//! node as the graph-level readout.

pub mod chem;
pub mod cli;
pub mod data;
pub mod diff;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;

pub use chem::{featurize, parse_smiles, sanitize_smiles, MolGraph};
pub use graph::{build_batch, GraphBatch};
pub use tensor::Matrix;
