//! Attention, shape-embedding and conditioning layers.

pub mod attention;
pub mod film;
pub mod geometry;

pub use attention::{grouped_vector_attention, AttentionPairs, GroupedAttentionBlock};
pub use film::{build_condition, FilmAdapter};
pub use geometry::{GeometryEncoder, GeometryTokens};
