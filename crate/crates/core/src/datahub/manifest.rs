use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Color,
    Xray,
    Oct,
    Ct,
    Mri,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Color => "color",
            Modality::Xray => "xray",
            Modality::Oct => "oct",
            Modality::Ct => "ct",
            Modality::Mri => "mri",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "color" => Ok(Modality::Color),
            "xray" | "x-ray" => Ok(Modality::Xray),
            "oct" => Ok(Modality::Oct),
            "ct" => Ok(Modality::Ct),
            "mri" => Ok(Modality::Mri),
            other => Err(format!("unknown modality {other:?} (color, xray, oct, ct, mri)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// File path (relative to the manifest) or `synth:<index>`.
    pub sample_ref: String,
    pub label: usize,
    pub patient_id: String,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: [&str; 4] = ["sample_ref", "label", "patient_id", "modality"];

impl DatasetManifest {
    pub fn new(name: impl Into<String>, num_classes: usize, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { name: name.into(), num_classes, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Label range and sample_ref uniqueness; rows are reported 1-based after the header.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let row = i + 2;
            if e.label >= self.num_classes {
                return Err(Error::Parse { row, msg: format!("label {} outside [0, {})", e.label, self.num_classes) });
            }
            if e.sample_ref.is_empty() {
                return Err(Error::Parse { row, msg: "empty sample_ref".into() });
            }
            if !seen.insert(e.sample_ref.as_str()) {
                return Err(Error::Parse { row, msg: format!("duplicate sample_ref {:?}", e.sample_ref) });
            }
        }
        Ok(())
    }

    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<&str> {
        let mut p: Vec<&str> = self.entries.iter().map(|e| e.patient_id.as_str()).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let wrap = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(MANIFEST_HEADER).map_err(wrap)?;
        for e in &self.entries {
            w.write_record([e.sample_ref.as_str(), &e.label.to_string(), &e.patient_id, e.modality.name()])
                .map_err(wrap)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Parse manifest CSV text (`sample_ref,label,patient_id,modality`).
pub fn parse_manifest(text: &str, name: &str, num_classes: usize) -> Result<DatasetManifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 1, msg: format!("missing column {name:?}") })
    };
    let (ci, li, pi, mi) = (col("sample_ref")?, col("label")?, col("patient_id")?, col("modality")?);
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let label =
            field(li).parse::<usize>().map_err(|_| Error::Parse { row, msg: format!("bad label {:?}", field(li)) })?;
        let modality = field(mi).parse::<Modality>().map_err(|msg| Error::Parse { row, msg })?;
        entries.push(ManifestEntry {
            sample_ref: field(ci).to_string(),
            label,
            patient_id: field(pi).to_string(),
            modality,
        });
    }
    if entries.is_empty() {
        return Err(Error::Parse { row: 1, msg: "manifest has no samples".into() });
    }
    DatasetManifest::new(name, num_classes, entries)
}

/// Read and validate a manifest file; the file stem becomes its name.
pub fn load_manifest(path: &Path, num_classes: usize) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    parse_manifest(&text, name, num_classes)
}
