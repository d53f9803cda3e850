use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadTemplate, Joint, Part};
use crate::error::{Error, Result};

pub const SIDECAR_SCHEMA: u32 = 1;

/// Everything in a template that the OBJ file does not carry.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    schema_version: u32,
    num_vertices: usize,
    shape_dim: usize,
    shape_basis: Vec<f64>,
    expr_dim: usize,
    expr_basis: Vec<f64>,
    joints: Vec<Joint>,
    skin_weights: Vec<f64>,
    face_parts: Vec<Part>,
}

impl HeadTemplate {
    /// Mesh as `v`/`vt`/`f` lines; vertex and texture indices coincide.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]);
        }
        for t in &self.uv {
            let _ = writeln!(s, "vt {:.17e} {:.17e}", t[0], t[1]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {0}/{0} {1}/{1} {2}/{2}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn save(&self, obj: &Path, sidecar: &Path) -> Result<()> {
        std::fs::write(obj, self.to_obj()).map_err(|e| Error::io(obj, e))?;
        let side = Sidecar {
            schema_version: SIDECAR_SCHEMA,
            num_vertices: self.num_vertices(),
            shape_dim: self.shape_dim,
            shape_basis: self.shape_basis.clone(),
            expr_dim: self.expr_dim,
            expr_basis: self.expr_basis.clone(),
            joints: self.joints.clone(),
            skin_weights: self.skin_weights.clone(),
            face_parts: self.face_parts.clone(),
        };
        let text = serde_json::to_string(&side)?;
        std::fs::write(sidecar, text).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(obj: &Path, sidecar: &Path) -> Result<HeadTemplate> {
        let text = std::fs::read_to_string(obj).map_err(|e| Error::io(obj, e))?;
        let (vertices, uv, faces) = parse_obj(&text)?;
        let side_text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
        let side: Sidecar = serde_json::from_str(&side_text)?;
        if side.schema_version != SIDECAR_SCHEMA {
            return Err(Error::Template(format!(
                "unsupported sidecar schema {} (expected {SIDECAR_SCHEMA})",
                side.schema_version
            )));
        }
        if side.num_vertices != vertices.len() {
            return Err(Error::Template(format!(
                "sidecar describes {} vertices but the mesh has {}",
                side.num_vertices,
                vertices.len()
            )));
        }
        let t = HeadTemplate {
            vertices,
            faces,
            uv,
            shape_dim: side.shape_dim,
            shape_basis: side.shape_basis,
            expr_dim: side.expr_dim,
            expr_basis: side.expr_basis,
            joints: side.joints,
            skin_weights: side.skin_weights,
            face_parts: side.face_parts,
        };
        t.validate()?;
        Ok(t)
    }
}

type ObjMesh = (Vec<[f64; 3]>, Vec<[f64; 2]>, Vec<[usize; 3]>);

fn parse_obj(text: &str) -> Result<ObjMesh> {
    let mut v = Vec::new();
    let mut vt = Vec::new();
    let mut faces = Vec::new();
    let mut face_uv = Vec::new();
    let err = |line: usize, what: &str| Error::Template(format!("obj line {}: {what}", line + 1));
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let nums = |it: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            it.map(|t| t.parse::<f64>().map_err(|_| err(ln, "bad number"))).collect()
        };
        match it.next() {
            Some("v") => {
                let n = nums(it)?;
                if n.len() < 3 {
                    return Err(err(ln, "vertex needs 3 coordinates"));
                }
                v.push([n[0], n[1], n[2]]);
            }
            Some("vt") => {
                let n = nums(it)?;
                if n.len() < 2 {
                    return Err(err(ln, "texture coordinate needs 2 values"));
                }
                vt.push([n[0], n[1]]);
            }
            Some("f") => {
                let mut vi = [0usize; 3];
                let mut ti = [None; 3];
                let toks: Vec<&str> = it.collect();
                if toks.len() != 3 {
                    return Err(err(ln, "only triangles are supported"));
                }
                for (k, tok) in toks.iter().enumerate() {
                    let mut parts = tok.split('/');
                    let idx = |s: Option<&str>| -> Result<Option<usize>> {
                        match s {
                            None | Some("") => Ok(None),
                            Some(s) => s
                                .parse::<usize>()
                                .ok()
                                .filter(|&i| i > 0)
                                .map(|i| Some(i - 1))
                                .ok_or_else(|| err(ln, "bad face index")),
                        }
                    };
                    vi[k] = idx(parts.next())?.ok_or_else(|| err(ln, "missing vertex index"))?;
                    ti[k] = idx(parts.next())?;
                }
                faces.push(vi);
                face_uv.push(ti);
            }
            _ => {}
        }
    }
    let mut uv = vec![[0.0; 2]; v.len()];
    if vt.len() == v.len() {
        uv.copy_from_slice(&vt);
    }
    for (f, t) in faces.iter().zip(&face_uv) {
        for k in 0..3 {
            if let Some(ti) = t[k] {
                if ti != f[k] {
                    return Err(Error::Template("texture indices must match vertex indices".into()));
                }
            }
        }
    }
    if vt.len() != v.len() {
        return Err(Error::Template(format!("{} vt lines for {} vertices", vt.len(), v.len())));
    }
    Ok((v, uv, faces))
}
