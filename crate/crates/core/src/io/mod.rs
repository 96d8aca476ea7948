//! Volume files, synthetic phantoms, and dataset manifests.

mod dataset;
mod manifest;
mod mha;
mod phantom;

pub use dataset::{write_phantom_dataset, MANIFEST_FILE};
pub use manifest::{split_manifest, CaseFiles, DatasetManifest, ManifestEntry, Split};
pub use mha::{decode_mha, encode_mha, read_mha, read_mha_typed, write_mha, ElementType, MhaError};
pub use phantom::{
    generate_phantom_pair, Ellipsoid, PhantomPair, PhantomSpec, Tissue, BACKGROUND_HU, TISSUES,
};
