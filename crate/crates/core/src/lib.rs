//! Fine-grained geolocation of short social-media posts.
//!
//! The crate covers the full pipeline: corpus ingestion and synthetic
//! generation ([`corpus`]), text normalization and encoding ([`textprep`]),
//! pretrained word embeddings ([`embed`]), a reverse-mode autodiff tensor
//! engine ([`tensor`]), the model zoo and training loop ([`models`]), the
//! user-history and cluster-retrieval augmentations ([`augment`]), and
//! geodesic metrics with an offline spatial labeler ([`geo`]).

pub mod augment;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod geo;
pub mod models;
pub mod tensor;
pub mod textprep;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
