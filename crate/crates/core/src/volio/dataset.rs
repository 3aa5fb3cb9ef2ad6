//! Pair manifests: one pair per line, four tab-separated paths
//! `fixed  fixed_seg  moving  moving_seg`, `-` for a missing segmentation.
//! Relative paths resolve against the manifest's directory; blank lines and
//! lines starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use super::{nifti, Volume};
use crate::error::{Error, Result};
use crate::warpfield::LabelMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub fixed: PathBuf,
    pub fixed_seg: Option<PathBuf>,
    pub moving: PathBuf,
    pub moving_seg: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairDataset {
    pub entries: Vec<PairEntry>,
}

/// One pair in memory. Segmentations share a label vocabulary.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub fixed: Volume,
    pub fixed_seg: Option<LabelMap>,
    pub moving: Volume,
    pub moving_seg: Option<LabelMap>,
}

impl LoadedPair {
    /// Both segmentations, when present.
    pub fn segs(&self) -> Option<(&LabelMap, &LabelMap)> {
        self.fixed_seg.as_ref().zip(self.moving_seg.as_ref())
    }
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("expected 4 tab-separated columns, found {}", cols.len()),
                });
            }
            let path = |s: &str| -> Result<PathBuf> {
                if s.is_empty() || s == "-" {
                    return Err(Error::Manifest {
                        line: i + 1,
                        reason: "image path is missing".into(),
                    });
                }
                Ok(base.join(s))
            };
            let opt = |s: &str| (s != "-" && !s.is_empty()).then(|| base.join(s));
            entries.push(PairEntry {
                fixed: path(cols[0])?,
                fixed_seg: opt(cols[1]),
                moving: path(cols[2])?,
                moving_seg: opt(cols[3]),
            });
        }
        Ok(Self { entries })
    }

    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Manifest text; paths under `base` are written relative to it.
    pub fn to_manifest_text(&self, base: &Path) -> String {
        let show = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let opt = |p: &Option<PathBuf>| p.as_deref().map_or_else(|| "-".to_string(), show);
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", show(&e.fixed), opt(&e.fixed_seg), show(&e.moving), opt(&e.moving_seg)))
            .collect()
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_manifest_text(path.parent().unwrap_or(Path::new("")));
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(&self, index: usize) -> Result<LoadedPair> {
        let e = &self.entries[index];
        let fixed = nifti::read_nifti(&e.fixed)?;
        let moving = nifti::read_nifti(&e.moving)?;
        if fixed.shape() != moving.shape() {
            return Err(Error::ShapeMismatch {
                left: fixed.shape(),
                right: moving.shape(),
            });
        }
        let seg = |p: &Option<PathBuf>| -> Result<Option<LabelMap>> {
            let Some(p) = p else { return Ok(None) };
            let (labels, _) = nifti::read_labels(p)?;
            if labels.shape() != fixed.shape() {
                return Err(Error::ShapeMismatch {
                    left: fixed.shape(),
                    right: labels.shape(),
                });
            }
            Ok(Some(labels))
        };
        let (mut fixed_seg, mut moving_seg) = (seg(&e.fixed_seg)?, seg(&e.moving_seg)?);
        if let (Some(f), Some(m)) = (&fixed_seg, &moving_seg) {
            let n = f.num_labels().max(m.num_labels());
            fixed_seg = Some(f.clone().with_num_labels(n)?);
            moving_seg = Some(m.clone().with_num_labels(n)?);
        }
        Ok(LoadedPair {
            fixed,
            fixed_seg,
            moving,
            moving_seg,
        })
    }
}
