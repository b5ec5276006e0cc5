//! Patch cropping and bicubic degradation following the test-strip / train-area protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bicubic::resize_with;
use super::cube::HsiCube;
use crate::error::{CstError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Which edge of the usable region the test crops are taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestEdge {
    Top,
    Left,
}

impl TestEdge {
    pub fn as_str(self) -> &'static str {
        match self {
            TestEdge::Top => "top",
            TestEdge::Left => "left",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(TestEdge::Top),
            "left" => Ok(TestEdge::Left),
            _ => Err(CstError::Config(format!("unknown test edge '{}'", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchProtocol {
    /// Usable part of the scene, in cube coordinates.
    pub region: Rect,
    /// Side of each square HR test crop.
    pub test_side: usize,
    pub test_count: usize,
    pub test_edge: TestEdge,
    /// Side of the square LR training patch; the HR patch is `lr_patch * scale`.
    pub lr_patch: usize,
    pub scale: usize,
    /// HR-pixel stride between training crops; `None` means non-overlapping.
    pub stride: Option<usize>,
    pub val_fraction: f64,
}

impl PatchProtocol {
    pub fn hr_patch(&self) -> usize {
        self.lr_patch * self.scale
    }

    pub fn hr_stride(&self) -> usize {
        self.stride.unwrap_or_else(|| self.hr_patch())
    }

    /// 2304x2048 central region, four 512x512 test crops along the top.
    pub fn chikusei(scale: usize) -> Self {
        PatchProtocol {
            region: Rect {
                y: 0,
                x: 0,
                h: 2304,
                w: 2048,
            },
            test_side: 512,
            test_count: 4,
            test_edge: TestEdge::Top,
            lr_patch: 32,
            scale,
            stride: None,
            val_fraction: 0.1,
        }
    }

    /// Full 1202x4172 scene, eight 256x256 test crops along the top.
    pub fn houston(scale: usize) -> Self {
        PatchProtocol {
            region: Rect {
                y: 0,
                x: 0,
                h: 1202,
                w: 4172,
            },
            test_side: 256,
            test_count: 8,
            test_edge: TestEdge::Top,
            lr_patch: 32,
            scale,
            stride: None,
            val_fraction: 0.1,
        }
    }

    /// 1096x715 usable area, test crops down the left side (256 px, or 128 px at x8).
    pub fn pavia(scale: usize) -> Self {
        let (side, count) = if scale == 8 { (128, 8) } else { (256, 4) };
        PatchProtocol {
            region: Rect {
                y: 0,
                x: 0,
                h: 1096,
                w: 715,
            },
            test_side: side,
            test_count: count,
            test_edge: TestEdge::Left,
            lr_patch: 32,
            scale,
            stride: None,
            val_fraction: 0.1,
        }
    }

    /// Small protocol for synthetic cubes: two test crops of side `h/4` from the top,
    /// 16 px LR patches from the remainder.
    pub fn desk(height: usize, width: usize, scale: usize) -> Self {
        let side = (height / 4).min(width / 2) / scale * scale;
        PatchProtocol {
            region: Rect {
                y: 0,
                x: 0,
                h: height,
                w: width,
            },
            test_side: side,
            test_count: 2,
            test_edge: TestEdge::Top,
            lr_patch: 16,
            scale,
            stride: None,
            val_fraction: 0.1,
        }
    }

    pub fn preset(name: &str, scale: usize, cube_dims: (usize, usize)) -> Result<Self> {
        match name {
            "chikusei" => Ok(Self::chikusei(scale)),
            "houston" => Ok(Self::houston(scale)),
            "pavia" => Ok(Self::pavia(scale)),
            "desk" => Ok(Self::desk(cube_dims.0, cube_dims.1, scale)),
            _ => Err(CstError::Config(format!("unknown protocol preset '{}'", name))),
        }
    }

    /// Rectangle of the training area (the region minus the test strip).
    pub fn train_area(&self) -> Rect {
        let r = self.region;
        match self.test_edge {
            TestEdge::Top => Rect {
                y: r.y + self.test_side,
                x: r.x,
                h: r.h.saturating_sub(self.test_side),
                w: r.w,
            },
            TestEdge::Left => Rect {
                y: r.y,
                x: r.x + self.test_side,
                h: r.h,
                w: r.w.saturating_sub(self.test_side),
            },
        }
    }

    pub fn test_origins(&self) -> Vec<(usize, usize)> {
        let r = self.region;
        (0..self.test_count)
            .map(|i| match self.test_edge {
                TestEdge::Top => (r.y, r.x + i * self.test_side),
                TestEdge::Left => (r.y + i * self.test_side, r.x),
            })
            .collect()
    }

    /// Top-left corners of every HR training crop, row-major.
    pub fn train_origins(&self) -> Vec<(usize, usize)> {
        let a = self.train_area();
        let p = self.hr_patch();
        let s = self.hr_stride();
        if a.h < p || a.w < p {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut y = a.y;
        while y + p <= a.y + a.h {
            let mut x = a.x;
            while x + p <= a.x + a.w {
                out.push((y, x));
                x += s;
            }
            y += s;
        }
        out
    }

    pub fn val_count(&self, n_patches: usize) -> usize {
        ((n_patches as f64) * self.val_fraction).round() as usize
    }

    pub fn validate(&self, cube_h: usize, cube_w: usize) -> Result<()> {
        if ![2, 4, 8].contains(&self.scale) {
            return Err(CstError::Geometry(format!("scale {} not in {{2, 4, 8}}", self.scale)));
        }
        if self.lr_patch == 0 || self.hr_stride() == 0 {
            return Err(CstError::Geometry("patch size and stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CstError::Geometry(format!(
                "val_fraction {} not in [0, 1)",
                self.val_fraction
            )));
        }
        let r = self.region;
        if r.y + r.h > cube_h || r.x + r.w > cube_w {
            return Err(CstError::Geometry(format!(
                "region {}x{} at ({}, {}) exceeds {}x{} cube",
                r.h, r.w, r.y, r.x, cube_h, cube_w
            )));
        }
        if self.test_side == 0 || self.test_side % self.scale != 0 {
            return Err(CstError::Geometry(format!(
                "test crop side {} must be a positive multiple of scale {}",
                self.test_side, self.scale
            )));
        }
        let (along, across) = match self.test_edge {
            TestEdge::Top => (r.w, r.h),
            TestEdge::Left => (r.h, r.w),
        };
        if self.test_count * self.test_side > along || self.test_side > across {
            return Err(CstError::Geometry(format!(
                "{} test crops of side {} do not fit the {}x{} region",
                self.test_count, self.test_side, r.h, r.w
            )));
        }
        if self.train_origins().is_empty() {
            return Err(CstError::Geometry(format!(
                "training area cannot hold a single {}px HR patch",
                self.hr_patch()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegradationSpec {
    pub method: String,
    pub scale: usize,
    pub antialias: bool,
}

impl DegradationSpec {
    pub fn bicubic(scale: usize) -> Self {
        DegradationSpec {
            method: "bicubic".to_string(),
            scale,
            antialias: true,
        }
    }

    /// Downsamples an HR cube by the degradation factor.
    pub fn degrade(&self, hr: &HsiCube) -> Result<HsiCube> {
        if self.scale < 2 {
            return Err(CstError::Config(format!("degradation scale {} < 2", self.scale)));
        }
        if self.method != "bicubic" {
            return Err(CstError::Config(format!("unsupported degradation '{}'", self.method)));
        }
        if hr.height() % self.scale != 0 || hr.width() % self.scale != 0 {
            return Err(CstError::Geometry(format!(
                "{}x{} not divisible by scale {}",
                hr.height(),
                hr.width(),
                self.scale
            )));
        }
        resize_with(hr, hr.height() / self.scale, hr.width() / self.scale, self.antialias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub origin: (usize, usize),
    pub hr: HsiCube,
    pub lr: HsiCube,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub test: Vec<PatchPair>,
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    pub degradation: DegradationSpec,
}

/// Seeded permutation of `0..n`.
pub fn split_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn make_pair(cube: &HsiCube, origin: (usize, usize), side: usize, deg: &DegradationSpec) -> Result<PatchPair> {
    let hr = cube.crop(origin.0, origin.1, side, side)?;
    let lr = deg.degrade(&hr)?;
    Ok(PatchPair { origin, hr, lr })
}

pub fn prepare_dataset(
    cube: &HsiCube,
    proto: &PatchProtocol,
    deg: &DegradationSpec,
    seed: u64,
) -> Result<DatasetBundle> {
    if deg.scale != proto.scale {
        return Err(CstError::Config(format!(
            "degradation scale {} differs from protocol scale {}",
            deg.scale, proto.scale
        )));
    }
    proto.validate(cube.height(), cube.width())?;
    let test = proto
        .test_origins()
        .into_iter()
        .map(|o| make_pair(cube, o, proto.test_side, deg))
        .collect::<Result<Vec<_>>>()?;
    let origins = proto.train_origins();
    let perm = split_permutation(origins.len(), seed);
    let n_val = proto.val_count(origins.len());
    let mut val_idx: Vec<usize> = perm[..n_val].to_vec();
    let mut train_idx: Vec<usize> = perm[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let hr = proto.hr_patch();
    let build = |idx: &[usize]| {
        idx.iter()
            .map(|&i| make_pair(cube, origins[i], hr, deg))
            .collect::<Result<Vec<_>>>()
    };
    Ok(DatasetBundle {
        test,
        train: build(&train_idx)?,
        val: build(&val_idx)?,
        degradation: deg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi::{bicubic_resize, synth_cube};

    fn overlaps(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
        let (ay, ax, asz) = a;
        let (by, bx, bsz) = b;
        ay < by + bsz && by < ay + asz && ax < bx + bsz && bx < ax + asz
    }

    #[test]
    fn chikusei_geometry() {
        let p = PatchProtocol::chikusei(4);
        p.validate(2304, 2048).unwrap();
        assert_eq!(p.test_origins(), vec![(0, 0), (0, 512), (0, 1024), (0, 1536)]);
        assert_eq!(p.hr_patch(), 128);
        // training area 1792x2048 with non-overlapping 128 px crops
        assert_eq!(p.train_origins().len(), 14 * 16);
    }

    #[test]
    fn preset_crops_are_disjoint() {
        for p in [
            PatchProtocol::chikusei(2),
            PatchProtocol::houston(4),
            PatchProtocol::pavia(8),
        ] {
            p.validate(p.region.h, p.region.w).unwrap();
            let tests: Vec<_> = p.test_origins().into_iter().map(|(y, x)| (y, x, p.test_side)).collect();
            for (i, a) in tests.iter().enumerate() {
                for b in &tests[i + 1..] {
                    assert!(!overlaps(*a, *b));
                }
                for &(y, x) in &p.train_origins() {
                    assert!(!overlaps(*a, (y, x, p.hr_patch())));
                }
            }
        }
    }

    #[test]
    fn lr_is_bicubic_of_hr() {
        let cube = synth_cube(96, 64, 3, 1);
        let p = PatchProtocol::desk(96, 64, 2);
        let b = prepare_dataset(&cube, &p, &DegradationSpec::bicubic(2), 3).unwrap();
        assert_eq!(b.test.len(), 2);
        for pair in b.test.iter().chain(&b.train).chain(&b.val) {
            let lr = bicubic_resize(&pair.hr, pair.hr.height() / 2, pair.hr.width() / 2).unwrap();
            assert_eq!(lr, pair.lr);
        }
    }

    #[test]
    fn zero_val_fraction() {
        let cube = synth_cube(96, 64, 2, 1);
        let mut p = PatchProtocol::desk(96, 64, 2);
        p.val_fraction = 0.0;
        let b = prepare_dataset(&cube, &p, &DegradationSpec::bicubic(2), 3).unwrap();
        assert!(b.val.is_empty());
        assert_eq!(b.train.len(), p.train_origins().len());
    }

    #[test]
    fn split_is_seeded() {
        let cube = synth_cube(160, 128, 2, 1);
        let mut p = PatchProtocol::desk(160, 128, 2);
        p.val_fraction = 0.25;
        let deg = DegradationSpec::bicubic(2);
        let a = prepare_dataset(&cube, &p, &deg, 5).unwrap();
        let b = prepare_dataset(&cube, &p, &deg, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(split_permutation(24, 5), split_permutation(24, 6));
        let c = prepare_dataset(&cube, &p, &deg, 6).unwrap();
        let origins = |d: &DatasetBundle| d.val.iter().map(|v| v.origin).collect::<Vec<_>>();
        assert_ne!(origins(&a), origins(&c));
    }

    #[test]
    fn misfit_protocol_is_geometry_error() {
        let cube = synth_cube(64, 64, 2, 1);
        let p = PatchProtocol::chikusei(4);
        let err = prepare_dataset(&cube, &p, &DegradationSpec::bicubic(4), 0).unwrap_err();
        assert!(matches!(err, CstError::Geometry(_)));
        let mut q = PatchProtocol::desk(64, 64, 2);
        q.scale = 3;
        assert!(q.validate(64, 64).is_err());
    }
}
