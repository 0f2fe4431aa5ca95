//! On-disk dataset layout:
//!
//! ```text
//! manifest.json
//! scene_{s}/view_{i}.ppm        P6, 8-bit RGB
//! scene_{s}/view_{i}.depth      "SVDP", H, W (u32 LE), H·W f64 LE; invalid = -1.0
//! scene_{s}/view_{i}.inst       "SVIN", H, W (u32 LE), H·W i32 LE; background = -1
//! scene_{s}/view_{i}.half.inst  same as .inst at (H/2, W/2), the mask targets
//! scene_{s}/cameras.json        quaternion, translation, fov at 17 significant digits
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CameraParams, SceneObject, ViewSample};

pub const FORMAT_VERSION: u32 = 1;
pub const DEPTH_MAGIC: &[u8; 4] = b"SVDP";
pub const INSTANCE_MAGIC: &[u8; 4] = b"SVIN";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file}: byte {offset}: {reason}")]
    Parse {
        file: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub id: i32,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub views: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub instances: Vec<InstanceEntry>,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub scenes: Vec<SceneEntry>,
}

/// A scene with every raster needed for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    /// (instance id, class) pairs.
    pub instances: Vec<(i32, usize)>,
    pub objects: Vec<SceneObject>,
    pub views: Vec<ViewSample>,
    /// Instance rasters at (H/2, W/2), ray cast directly at that resolution.
    pub half_instance_maps: Vec<Vec<i32>>,
}

impl RenderedScene {
    pub fn height(&self) -> usize {
        self.views[0].height
    }

    pub fn width(&self) -> usize {
        self.views[0].width
    }

    pub fn class_of(&self, id: i32) -> Option<usize> {
        self.instances
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, c)| *c)
    }

    fn entry(&self) -> SceneEntry {
        SceneEntry {
            name: self.name.clone(),
            seed: self.seed,
            views: self.views.len(),
            height: self.height(),
            width: self.width(),
            num_classes: self.num_classes,
            instances: self
                .instances
                .iter()
                .map(|&(id, class)| InstanceEntry { id, class })
                .collect(),
            objects: self.objects.clone(),
        }
    }
}

fn raster_header(magic: &[u8; 4], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out
}

pub fn write_f64_raster(
    path: &Path,
    magic: &[u8; 4],
    h: usize,
    w: usize,
    data: &[f64],
) -> Result<(), DatasetError> {
    debug_assert_eq!(data.len(), h * w);
    let mut out = raster_header(magic, h, w);
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn write_i32_raster(
    path: &Path,
    magic: &[u8; 4],
    h: usize,
    w: usize,
    data: &[i32],
) -> Result<(), DatasetError> {
    debug_assert_eq!(data.len(), h * w);
    let mut out = raster_header(magic, h, w);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_raster_bytes(
    path: &Path,
    magic: &[u8; 4],
    elem: usize,
) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parse = |offset: usize, reason: String| DatasetError::Parse {
        file: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < 12 {
        return Err(parse(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != magic {
        return Err(parse(
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + h * w * elem;
    if bytes.len() < expected {
        return Err(parse(
            bytes.len(),
            format!("truncated raster: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(parse(expected, "trailing bytes after raster".into()));
    }
    Ok((h, w, bytes[12..].to_vec()))
}

pub fn read_f64_raster(
    path: &Path,
    magic: &[u8; 4],
) -> Result<(usize, usize, Vec<f64>), DatasetError> {
    let (h, w, body) = read_raster_bytes(path, magic, 8)?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, data))
}

pub fn read_i32_raster(
    path: &Path,
    magic: &[u8; 4],
) -> Result<(usize, usize, Vec<i32>), DatasetError> {
    let (h, w, body) = read_raster_bytes(path, magic, 4)?;
    let data = body
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, data))
}

fn write_ppm(path: &Path, h: usize, w: usize, rgb: &[f64]) -> Result<(), DatasetError> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        rgb.iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(io_err(path))
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>), DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parse = |offset: usize, reason: &str| DatasetError::Parse {
        file: path.to_path_buf(),
        offset,
        reason: reason.to_string(),
    };
    // header: four whitespace-separated fields, then one whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse(pos, "truncated PPM header"));
        }
        fields.push((
            start,
            String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
        ));
    }
    if fields[0].1 != "P6" {
        return Err(parse(0, "not a P6 PPM"));
    }
    let num = |i: usize| {
        fields[i]
            .1
            .parse::<usize>()
            .map_err(|_| parse(fields[i].0, "bad PPM header number"))
    };
    let (w, h, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(parse(fields[3].0, "only 8-bit PPM is supported"));
    }
    pos += 1;
    let expected = pos + h * w * 3;
    if bytes.len() < expected {
        return Err(parse(bytes.len(), "truncated PPM body"));
    }
    if bytes.len() > expected {
        return Err(parse(expected, "trailing bytes after PPM body"));
    }
    Ok((
        h,
        w,
        bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn camera_json(cams: &[CameraParams]) -> String {
    let list = |vals: &[f64]| {
        vals.iter()
            .map(|&v| fmt17(v))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let body: Vec<String> = cams
        .iter()
        .map(|c| {
            format!(
                "  {{\"quaternion\": [{}], \"translation\": [{}], \"fov\": [{}]}}",
                list(&c.rotation),
                list(&c.translation),
                list(&c.fov)
            )
        })
        .collect();
    format!("[\n{}\n]\n", body.join(",\n"))
}

#[derive(Deserialize)]
struct CameraRecord {
    quaternion: [f64; 4],
    translation: [f64; 3],
    fov: [f64; 2],
}

fn scene_dir_name(index: usize) -> String {
    format!("scene_{index}")
}

/// Writes `scenes` under `dir` (created if missing).
pub fn write_dataset(scenes: &[RenderedScene], dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        scenes: Vec::new(),
    };
    for (s, scene) in scenes.iter().enumerate() {
        let sdir = dir.join(scene_dir_name(s));
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        let mut entry = scene.entry();
        entry.name = scene_dir_name(s);
        manifest.scenes.push(entry);
        let (h, w) = (scene.height(), scene.width());
        for (i, view) in scene.views.iter().enumerate() {
            if view.height != h || view.width != w {
                return Err(DatasetError::Inconsistent(format!(
                    "scene {s} view {i} resolution differs"
                )));
            }
            write_ppm(&sdir.join(format!("view_{i}.ppm")), h, w, &view.rgb)?;
            write_f64_raster(
                &sdir.join(format!("view_{i}.depth")),
                DEPTH_MAGIC,
                h,
                w,
                &view.depth,
            )?;
            write_i32_raster(
                &sdir.join(format!("view_{i}.inst")),
                INSTANCE_MAGIC,
                h,
                w,
                &view.instance_map,
            )?;
            write_i32_raster(
                &sdir.join(format!("view_{i}.half.inst")),
                INSTANCE_MAGIC,
                h / 2,
                w / 2,
                &scene.half_instance_maps[i],
            )?;
        }
        let cams: Vec<CameraParams> = scene.views.iter().map(|v| v.camera).collect();
        let path = sdir.join("cameras.json");
        fs::write(&path, camera_json(&cams)).map_err(io_err(&path))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
            file: path.clone(),
            offset: e.column(),
            reason: e.to_string(),
        })?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64);
    match version {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(DatasetError::Version { found: v as u32 }),
        None => {
            return Err(DatasetError::Parse {
                file: path,
                offset: 0,
                reason: "missing format_version".into(),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| DatasetError::Parse {
        file: path,
        offset: 0,
        reason: e.to_string(),
    })
}

fn read_scene(dir: &Path, entry: &SceneEntry) -> Result<RenderedScene, DatasetError> {
    let sdir = dir.join(&entry.name);
    let cam_path = sdir.join("cameras.json");
    let cam_text = fs::read_to_string(&cam_path).map_err(io_err(&cam_path))?;
    let cams: Vec<CameraRecord> =
        serde_json::from_str(&cam_text).map_err(|e| DatasetError::Parse {
            file: cam_path.clone(),
            offset: e.column(),
            reason: e.to_string(),
        })?;
    if cams.len() != entry.views {
        return Err(DatasetError::Inconsistent(format!(
            "{}: {} cameras for {} views",
            cam_path.display(),
            cams.len(),
            entry.views
        )));
    }
    let (h, w) = (entry.height, entry.width);
    let check = |file: PathBuf, got: (usize, usize), want: (usize, usize)| {
        if got == want {
            Ok(())
        } else {
            Err(DatasetError::Parse {
                file,
                offset: 4,
                reason: format!("raster is {got:?}, manifest says {want:?}"),
            })
        }
    };
    let mut views = Vec::with_capacity(entry.views);
    let mut half = Vec::with_capacity(entry.views);
    for (i, cam) in cams.iter().enumerate() {
        let ppm = sdir.join(format!("view_{i}.ppm"));
        let (ph, pw, rgb) = read_ppm(&ppm)?;
        check(ppm, (ph, pw), (h, w))?;
        let dpath = sdir.join(format!("view_{i}.depth"));
        let (dh, dw, depth) = read_f64_raster(&dpath, DEPTH_MAGIC)?;
        check(dpath, (dh, dw), (h, w))?;
        let ipath = sdir.join(format!("view_{i}.inst"));
        let (ih, iw, instance_map) = read_i32_raster(&ipath, INSTANCE_MAGIC)?;
        check(ipath, (ih, iw), (h, w))?;
        let hpath = sdir.join(format!("view_{i}.half.inst"));
        let (hh, hw, half_map) = read_i32_raster(&hpath, INSTANCE_MAGIC)?;
        check(hpath, (hh, hw), (h / 2, w / 2))?;
        half.push(half_map);
        views.push(ViewSample {
            height: h,
            width: w,
            rgb,
            depth,
            instance_map,
            camera: CameraParams {
                rotation: cam.quaternion,
                translation: cam.translation,
                fov: cam.fov,
            },
        });
    }
    Ok(RenderedScene {
        name: entry.name.clone(),
        seed: entry.seed,
        num_classes: entry.num_classes,
        instances: entry.instances.iter().map(|e| (e.id, e.class)).collect(),
        objects: entry.objects.clone(),
        views,
        half_instance_maps: half,
    })
}

/// Reads every scene listed in `dir/manifest.json`.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<RenderedScene>), DatasetError> {
    let manifest = read_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| read_scene(dir, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, scenes))
}

/// Reads a single `scene_{s}` directory using its parent's manifest.
pub fn read_scene_dir(scene_dir: &Path) -> Result<RenderedScene, DatasetError> {
    let parent = scene_dir.parent().ok_or_else(|| {
        DatasetError::Inconsistent(format!("{} has no parent", scene_dir.display()))
    })?;
    let name = scene_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| {
            DatasetError::Inconsistent(format!("bad scene path {}", scene_dir.display()))
        })?;
    let manifest = read_manifest(parent)?;
    let entry = manifest
        .scenes
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| DatasetError::Inconsistent(format!("{name} not listed in manifest")))?;
    read_scene(parent, entry)
}
