//! On-disk layout of a prepared dataset: one HSC1 file per HR and LR patch plus
//! `manifest.tsv` with columns `split, index, y, x, hr, lr, degradation`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::cube::{load_cube, save_cube};
use super::dataset::{DatasetBundle, DegradationSpec, PatchPair};
use crate::error::{CstError, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "split\tindex\ty\tx\thr\tlr\tdegradation";

impl DegradationSpec {
    /// Short tag such as `bicubic-x4-aa`.
    pub fn tag(&self) -> String {
        format!(
            "{}-x{}-{}",
            self.method,
            self.scale,
            if self.antialias { "aa" } else { "noaa" }
        )
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        let bad = || CstError::Format(format!("bad degradation tag '{}'", tag));
        let mut parts = tag.split('-');
        let (method, scale, aa) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(m), Some(s), Some(a), None) => (m, s, a),
            _ => return Err(bad()),
        };
        let scale = scale.strip_prefix('x').and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let antialias = match aa {
            "aa" => true,
            "noaa" => false,
            _ => return Err(bad()),
        };
        Ok(DegradationSpec {
            method: method.to_string(),
            scale,
            antialias,
        })
    }
}

/// Writes every patch of `bundle` into `dir` and returns the manifest text.
pub fn write_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| CstError::io(dir, e))?;
    let tag = bundle.degradation.tag();
    let mut manifest = format!("{}\n", MANIFEST_HEADER);
    for (split, pairs) in [("test", &bundle.test), ("train", &bundle.train), ("val", &bundle.val)] {
        for (i, p) in pairs.iter().enumerate() {
            let hr = format!("{}_{:04}_hr.hsc", split, i);
            let lr = format!("{}_{:04}_lr.hsc", split, i);
            save_cube(&p.hr, dir.join(&hr))?;
            save_cube(&p.lr, dir.join(&lr))?;
            let _ = writeln!(
                manifest,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                split, i, p.origin.0, p.origin.1, hr, lr, tag
            );
        }
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, &manifest).map_err(|e| CstError::io(&path, e))?;
    Ok(manifest)
}

/// Loads a directory written by [`write_bundle`].
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| CstError::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(CstError::Format(format!("{} has an unexpected header", path.display())));
    }
    let mut bundle = DatasetBundle {
        test: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        degradation: DegradationSpec::bicubic(2),
    };
    let mut tag: Option<String> = None;
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || CstError::Format(format!("manifest line {}: '{}'", n + 2, line));
        if f.len() != 7 {
            return Err(bad());
        }
        let y = f[2].parse().map_err(|_| bad())?;
        let x = f[3].parse().map_err(|_| bad())?;
        match &tag {
            None => tag = Some(f[6].to_string()),
            Some(t) if t != f[6] => return Err(CstError::Format("manifest mixes degradations".into())),
            _ => {}
        }
        let pair = PatchPair {
            origin: (y, x),
            hr: load_cube(dir.join(f[4]))?,
            lr: load_cube(dir.join(f[5]))?,
        };
        match f[0] {
            "test" => bundle.test.push(pair),
            "train" => bundle.train.push(pair),
            "val" => bundle.val.push(pair),
            _ => return Err(bad()),
        }
    }
    if let Some(t) = tag {
        bundle.degradation = DegradationSpec::from_tag(&t)?;
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{prepare_dataset, synth_cube, PatchProtocol};

    #[test]
    fn bundle_round_trip() {
        let cube = synth_cube(64, 64, 3, 2);
        let proto = PatchProtocol::desk(64, 64, 2);
        let b = prepare_dataset(&cube, &proto, &DegradationSpec::bicubic(2), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_bundle(&b, dir.path()).unwrap();
        assert_eq!(m.lines().count(), 1 + b.test.len() + b.train.len() + b.val.len());
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn tag_round_trip() {
        let mut d = DegradationSpec::bicubic(8);
        d.antialias = false;
        assert_eq!(d.tag(), "bicubic-x8-noaa");
        assert_eq!(DegradationSpec::from_tag(&d.tag()).unwrap(), d);
        assert!(DegradationSpec::from_tag("bicubic-4-aa").is_err());
    }
}
