//! Manifests, synthetic domains, image decoding and patient-level splits.

mod images;
mod manifest;
mod split;
mod synth;

pub use images::{decode_pnm, decode_raw, hflip, Dataset};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, ManifestEntry, Modality, MANIFEST_HEADER};
pub use split::{audit_split, ood_sweep_specs, patient_split, LeakageAudit, Split, SplitFile, SplitName, SplitSpec};
pub use synth::{synth_dataset, SyntheticDomainSpec, SyntheticSource, SYNTH_PREFIX};
