//! Downstream evaluation: embedding extraction, k-NN and linear probing, the
//! three classification metrics, source-held-out and k-fold protocols, and
//! PCA feature maps.

mod embeddings;
mod knn;
mod metrics;
mod pca;
mod probe;
mod protocols;

pub use embeddings::{embed, embed_images, sidecar_path, EmbeddingSet, RowMeta, EMBEDDING_MAGIC};
pub use knn::{knn, Distance};
pub use metrics::{metrics, Metrics};
pub use pca::{pca, pca_map, PcaResult, PCA_TOL};
pub use probe::{linear_probe, LinearProbe, ProbeConfig};
pub use protocols::{
    evaluate_split, fold_assignment, kfold, leave_one_source_out, Aggregate, ClassifierSpec, EvalReport, Prediction,
    SplitRecord,
};
