//! Dataset manifests: one `image<TAB>mask<TAB>group` line per sample, paths
//! relative to the manifest's directory unless absolute. Lines starting with
//! `#` are comments.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::pgm;
use super::phantom::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub group: usize,
}

/// Samples with their group ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub groups: Vec<usize>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || {
            Error::Data(format!(
                "manifest line {}: expected image<TAB>mask<TAB>group",
                no + 1
            ))
        };
        if f.len() != 3 || f[0].is_empty() || f[1].is_empty() {
            return Err(bad());
        }
        out.push(ManifestEntry {
            image: f[0].into(),
            mask: f[1].into(),
            group: f[2].trim().parse().map_err(|_| bad())?,
        });
    }
    if out.is_empty() {
        return Err(Error::Data("manifest lists no samples".into()));
    }
    Ok(out)
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::from("# image\tmask\tgroup\n");
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            e.image.display(),
            e.mask.display(),
            e.group
        ));
    }
    s
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads every image/mask pair listed in `manifest`. Sample ids are the
    /// image file stems.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| {
            Error::Data(format!("cannot read manifest {}: {e}", manifest.display()))
        })?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut ds = Dataset::default();
        for e in parse_manifest(&text)? {
            let read = |p: &Path, mask: bool| {
                let path = base.join(p);
                let r = if mask {
                    pgm::read_mask(&path)
                } else {
                    pgm::read_pgm(&path)
                };
                r.map_err(|err| Error::Data(format!("{}: {err}", path.display())))
            };
            let image = read(&e.image, false)?;
            let mask = read(&e.mask, true)?;
            if image.shape() != mask.shape() {
                return Err(Error::Data(format!(
                    "{}: image {:?} and mask {:?} differ in shape",
                    e.image.display(),
                    image.shape(),
                    mask.shape()
                )));
            }
            let id = e
                .image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            ds.samples.push(Sample { id, image, mask });
            ds.groups.push(e.group);
        }
        Ok(ds)
    }

    /// Writes `images/<id>.pgm`, `masks/<id>.pgm` and `manifest.txt` under
    /// `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut entries = Vec::with_capacity(self.len());
        for (s, &group) in self.samples.iter().zip(&self.groups) {
            let image = PathBuf::from("images").join(format!("{}.pgm", s.id));
            let mask = PathBuf::from("masks").join(format!("{}.pgm", s.id));
            pgm::write_pgm(&dir.join(&image), &s.image)?;
            pgm::write_mask(&dir.join(&mask), &s.mask)?;
            entries.push(ManifestEntry { image, mask, group });
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, render_manifest(&entries))?;
        Ok(path)
    }

    /// Training samples come from the `train_groups` lowest group ids, test
    /// samples from the rest.
    pub fn split_by_group(&self, train_groups: usize) -> (Dataset, Dataset) {
        let ids: BTreeSet<usize> = self.groups.iter().copied().collect();
        let train_ids: BTreeSet<usize> = ids.into_iter().take(train_groups).collect();
        let (mut train, mut test) = (Dataset::default(), Dataset::default());
        for (s, &g) in self.samples.iter().zip(&self.groups) {
            let dst = if train_ids.contains(&g) {
                &mut train
            } else {
                &mut test
            };
            dst.samples.push(s.clone());
            dst.groups.push(g);
        }
        (train, test)
    }
}
