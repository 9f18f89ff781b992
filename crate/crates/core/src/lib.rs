//! Spectral neighbor joining and companion tools for reconstructing
//! phylogenetic trees from similarity matrices.

pub mod bench;
pub mod error;
pub mod generate;
pub mod markov;
pub mod properties;
pub mod reconstruct;
pub mod rng;
pub mod similarity;
pub mod tree;

pub use error::{Error, Result};
pub use generate::{GenSpec, TreeKind};
pub use markov::{population_similarity, simulate, CharacterMatrix, MarkovTreeModel};
pub use reconstruct::{max_quartet_nj, nj, snj, snj_exhaustive, MergeTrace, Method};
pub use similarity::{DistanceMatrix, SimilarityMatrix};
pub use tree::{parse_newick, rf_distance, write_newick, EdgeAffinities, Topology};
