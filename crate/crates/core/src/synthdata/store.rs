use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSpec, IdentityData, SyntheticIdentity, Texture};
use crate::error::{Error, Result};
use crate::headmodel::{HeadParams, HeadTemplate};
use crate::losses::Supervision;
use crate::raster::{load_png_gray, load_png_rgb, save_png_gray, save_png_rgb, Camera};

pub const MANIFEST_SCHEMA: u32 = 1;
const TEMPLATE_OBJ: &str = "template.obj";
const TEMPLATE_SIDECAR: &str = "template.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    spec: DatasetSpec,
    cameras: Vec<Camera>,
    template_obj: String,
    template_sidecar: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentityFile {
    seed: u64,
    texture: Texture,
    frames: usize,
}

pub fn identity_dir(root: &Path, j: usize) -> PathBuf {
    root.join(format!("id_{j:03}"))
}

pub fn frame_dir(root: &Path, j: usize, f: usize) -> PathBuf {
    identity_dir(root, j).join(format!("frame_{f:03}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the manifest, template, per-frame parameters and PNG images.
pub fn write_dataset(root: &Path, data: &Dataset) -> Result<()> {
    mkdir(root)?;
    data.template
        .save(&root.join(TEMPLATE_OBJ), &root.join(TEMPLATE_SIDECAR))?;
    write_json(
        &root.join("manifest.json"),
        &Manifest {
            schema_version: MANIFEST_SCHEMA,
            spec: data.spec.clone(),
            cameras: data.cameras.clone(),
            template_obj: TEMPLATE_OBJ.into(),
            template_sidecar: TEMPLATE_SIDECAR.into(),
        },
    )?;
    for (j, id) in data.identities.iter().enumerate() {
        mkdir(&identity_dir(root, j))?;
        write_json(
            &identity_dir(root, j).join("identity.json"),
            &IdentityFile {
                seed: id.identity.seed,
                texture: id.identity.texture.clone(),
                frames: id.identity.frames.len(),
            },
        )?;
        for (f, views) in id.views.iter().enumerate() {
            let dir = frame_dir(root, j, f);
            mkdir(&dir)?;
            write_json(&dir.join("params.json"), &id.identity.frames[f])?;
            for (v, s) in views.iter().enumerate() {
                save_png_rgb(&dir.join(format!("view_{v:02}_rgb.png")), &s.image)?;
                save_png_gray(&dir.join(format!("view_{v:02}_mask.png")), &s.mask)?;
                save_png_gray(&dir.join(format!("view_{v:02}_mouth.png")), &s.mouth)?;
            }
        }
    }
    Ok(())
}

fn binarize(mut t: crate::diffengine::Tensor) -> crate::diffengine::Tensor {
    for v in t.data_mut() {
        *v = (*v >= 0.5) as u8 as f64;
    }
    t
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    if manifest.schema_version != MANIFEST_SCHEMA {
        return Err(Error::Dataset(format!(
            "unsupported manifest schema {} (expected {MANIFEST_SCHEMA})",
            manifest.schema_version
        )));
    }
    let spec = manifest.spec;
    if manifest.cameras.len() != spec.views {
        return Err(Error::Dataset("manifest camera count does not match views".into()));
    }
    for c in &manifest.cameras {
        c.validate()?;
    }
    let template = HeadTemplate::load(&root.join(&manifest.template_obj), &root.join(&manifest.template_sidecar))?;
    let mut identities = Vec::with_capacity(spec.identities);
    for j in 0..spec.identities {
        let file: IdentityFile = read_json(&identity_dir(root, j).join("identity.json"))?;
        if file.frames != spec.expressions {
            return Err(Error::Dataset(format!("identity {j} has {} frames, expected {}", file.frames, spec.expressions)));
        }
        let mut frames = Vec::with_capacity(file.frames);
        let mut views = Vec::with_capacity(file.frames);
        for f in 0..file.frames {
            let dir = frame_dir(root, j, f);
            let params: HeadParams = read_json(&dir.join("params.json"))?;
            params.check(&template)?;
            frames.push(params);
            let mut row = Vec::with_capacity(spec.views);
            for v in 0..spec.views {
                let s = Supervision {
                    image: load_png_rgb(&dir.join(format!("view_{v:02}_rgb.png")))?,
                    mask: binarize(load_png_gray(&dir.join(format!("view_{v:02}_mask.png")))?),
                    mouth: binarize(load_png_gray(&dir.join(format!("view_{v:02}_mouth.png")))?),
                };
                s.check()?;
                if s.image.shape()[1..] != [spec.resolution, spec.resolution] {
                    return Err(Error::Dataset(format!("{} has the wrong resolution", dir.display())));
                }
                row.push(s);
            }
            views.push(row);
        }
        identities.push(IdentityData {
            identity: SyntheticIdentity {
                seed: file.seed,
                texture: file.texture,
                frames,
            },
            views,
        });
    }
    Ok(Dataset {
        spec,
        template,
        cameras: manifest.cameras,
        identities,
    })
}
