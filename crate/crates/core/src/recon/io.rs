//! Prediction interchange file.
//!
//! Layout (little-endian): `"SVPR"`, version `u32`, instance count `u32`, then
//! per instance `class u32, score f64, point count u32, xyz f64 triples`.
//! Optional trailing blocks: `"SVMK"` with `views, h, w` (u32) and one byte per
//! mask pixel for every instance, and `"SVDP"` with `views, h, w` and the
//! predicted depth rasters.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{InstancePrediction, PointCloudSeg};
use crate::scenegen::Vec3;

pub const PREDICTION_MAGIC: &[u8; 4] = b"SVPR";
pub const PREDICTION_VERSION: u32 = 1;
const MASK_TAG: &[u8; 4] = b"SVMK";
const DEPTH_TAG: &[u8; 4] = b"SVDP";

#[derive(Debug, Error)]
pub enum PredictionIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed prediction file at byte {offset}: {reason}")]
    Parse {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileInstance {
    pub class: usize,
    pub score: f64,
    pub points: Vec<Vec3>,
}

/// Per-instance binary masks for every view at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBlock {
    pub views: usize,
    pub res: (usize, usize),
    /// `[instance][view]` row-major masks.
    pub masks: Vec<Vec<Vec<bool>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBlock {
    pub res: (usize, usize),
    pub depths: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionFile {
    pub instances: Vec<FileInstance>,
    pub masks: Option<MaskBlock>,
    pub depths: Option<DepthBlock>,
}

impl PredictionFile {
    /// Bundles an assembled segmentation with the masks that produced it.
    pub fn from_parts(
        seg: &PointCloudSeg,
        preds: &[InstancePrediction],
        views: usize,
        depths: Option<DepthBlock>,
    ) -> Self {
        let instances = (0..seg.classes.len())
            .map(|i| FileInstance {
                class: seg.classes[i],
                score: seg.scores[i],
                points: seg.instance_points(i),
            })
            .collect();
        let res = preds.first().map_or((0, 0), |p| p.mask_res);
        let masks = Some(MaskBlock {
            views,
            res,
            masks: preds.iter().map(|p| p.masks.clone()).collect(),
        });
        Self {
            instances,
            masks,
            depths,
        }
    }

    /// Rebuilds the instance predictions carried by the mask block.
    pub fn predictions(&self) -> Option<Vec<InstancePrediction>> {
        let block = self.masks.as_ref()?;
        Some(
            self.instances
                .iter()
                .zip(&block.masks)
                .enumerate()
                .map(|(i, (inst, masks))| InstancePrediction {
                    query: i,
                    class: inst.class,
                    class_prob: 1.0,
                    masks: masks.clone(),
                    mask_res: block.res,
                    score: inst.score,
                })
                .collect(),
        )
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_predictions(path: &Path, file: &PredictionFile) -> Result<(), PredictionIoError> {
    let mut out = Vec::new();
    out.extend_from_slice(PREDICTION_MAGIC);
    push_u32(&mut out, PREDICTION_VERSION as usize);
    push_u32(&mut out, file.instances.len());
    for inst in &file.instances {
        push_u32(&mut out, inst.class);
        out.extend_from_slice(&inst.score.to_le_bytes());
        push_u32(&mut out, inst.points.len());
        for p in &inst.points {
            for c in p {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    if let Some(m) = &file.masks {
        out.extend_from_slice(MASK_TAG);
        push_u32(&mut out, m.views);
        push_u32(&mut out, m.res.0);
        push_u32(&mut out, m.res.1);
        for inst in &m.masks {
            for view in inst {
                out.extend(view.iter().map(|&b| b as u8));
            }
        }
    }
    if let Some(d) = &file.depths {
        out.extend_from_slice(DEPTH_TAG);
        push_u32(&mut out, d.depths.len());
        push_u32(&mut out, d.res.0);
        push_u32(&mut out, d.res.1);
        for view in &d.depths {
            for v in view {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|source| PredictionIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> PredictionIoError {
        PredictionIoError::Parse {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PredictionIoError> {
        if n > self.bytes.len() - self.pos {
            return Err(self.fail(self.bytes.len(), "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, PredictionIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64, PredictionIoError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn read_predictions(path: &Path) -> Result<PredictionFile, PredictionIoError> {
    let bytes = fs::read(path).map_err(|source| PredictionIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != PREDICTION_MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != PREDICTION_VERSION as usize {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut file = PredictionFile::default();
    for _ in 0..count {
        let class = r.u32()?;
        let score = r.f64()?;
        let n = r.u32()?;
        let mut points = Vec::with_capacity(n.min(bytes.len() / 24));
        for _ in 0..n {
            points.push([r.f64()?, r.f64()?, r.f64()?]);
        }
        file.instances.push(FileInstance {
            class,
            score,
            points,
        });
    }
    while r.pos < bytes.len() {
        let at = r.pos;
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let (views, h, w) = (r.u32()?, r.u32()?, r.u32()?);
        match &tag {
            t if t == MASK_TAG => {
                let mut masks = Vec::with_capacity(count);
                for _ in 0..count {
                    let mut per_view = Vec::with_capacity(views);
                    for _ in 0..views {
                        per_view.push(r.take(h * w)?.iter().map(|&b| b != 0).collect());
                    }
                    masks.push(per_view);
                }
                file.masks = Some(MaskBlock {
                    views,
                    res: (h, w),
                    masks,
                });
            }
            t if t == DEPTH_TAG => {
                let mut depths = Vec::with_capacity(views);
                for _ in 0..views {
                    let raw = r.take(h * w * 8)?;
                    depths.push(
                        raw.chunks_exact(8)
                            .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
                            .collect(),
                    );
                }
                file.depths = Some(DepthBlock {
                    res: (h, w),
                    depths,
                });
            }
            _ => return Err(r.fail(at, "unknown block tag")),
        }
    }
    Ok(file)
}
