use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codebook::combine_identity_op;
use crate::diffengine::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::headmodel::{
    pose_mesh_op, triangle_frames_op, HeadParams, HeadTemplate, Part, TemplateTensors, NUM_PARTS,
};
use crate::raster::{rasterize, rasterize_op, Camera, SplatScene, DEFAULT_TILE};
use crate::splatcore::{bind_covariance, bind_positions, FeaturePointCloud, ENCODING_DIM};

/// Splatted appearance channels: 3 RGB followed by latent features.
pub const APPEARANCE_DIM: usize = 34;
pub const RGB_DIM: usize = 3;
/// Geometry head outputs: position offset (3), rotation (4), scale (3), opacity (1).
pub const GEOMETRY_DIM: usize = 11;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Texel grid used to place primitives; 300 matches the original setup.
    pub uv_resolution: usize,
    pub mlp_hidden: usize,
    /// Per-part identity code width.
    pub code_dim: usize,
    pub cnn_width: usize,
    pub cnn_layers: usize,
    /// Bound on each local position offset component, face-local units.
    pub position_range: f64,
    pub scale_init: f64,
    pub opacity_init: f64,
    /// Multiplier on the dynamic signal before it enters the appearance MLP.
    pub dynamic_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            uv_resolution: 64,
            mlp_hidden: 128,
            code_dim: 128,
            cnn_width: 32,
            cnn_layers: 6,
            position_range: 2.0,
            scale_init: 0.5,
            opacity_init: 0.8,
            dynamic_scale: 20.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.uv_resolution == 0 || self.mlp_hidden == 0 || self.code_dim == 0 || self.cnn_width == 0 {
            return bad("model widths and uv_resolution must be positive");
        }
        if self.cnn_layers < 2 {
            return bad("cnn_layers must be at least 2");
        }
        if !(self.position_range > 0.0) || !(self.scale_init > 0.0) {
            return bad("position_range and scale_init must be positive");
        }
        if !(self.opacity_init > 0.0 && self.opacity_init < 1.0) {
            return bad("opacity_init must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Which identity codes drive the part MLPs.
#[derive(Clone, Debug)]
pub enum Identity {
    /// Row `j` of the codebook.
    Codebook(usize),
    /// Softmax mixture of the codebook with the inversion logits.
    Mixture,
    /// Free per-part codes created for fine-tuning.
    Personal,
    /// Explicit `p × code_dim` codes, treated as constants.
    Fixed(Arc<Vec<Vec<f64>>>),
    /// Separate constant codes for the geometry and appearance MLPs.
    Split {
        geometry: Arc<Vec<Vec<f64>>>,
        appearance: Arc<Vec<Vec<f64>>>,
    },
}

/// Graph handles produced by one avatar evaluation.
pub struct AvatarOutput {
    /// Refined image `[3, H, W]`.
    pub image: Var,
    /// Splatted RGB `[3, H, W]`.
    pub rgb: Var,
    /// Splatted latent features `[31, H, W]`.
    pub feat: Var,
    /// Accumulated opacity `[1, H, W]`.
    pub alpha: Var,
    /// Local position offsets `[n, 3]`.
    pub offsets: Var,
    /// Unit rotations `[n, 4]`.
    pub rotations: Var,
    /// Local scales `[n, 3]`.
    pub scales: Var,
    pub opacity: Var,
    /// Splatted appearance `[n, 34]`.
    pub appearance: Var,
    pub dynamic: Var,
    /// World means `[n, 3]` and covariances `[n, 9]`.
    pub means: Var,
    pub covariances: Var,
    pub posed_vertices: Var,
}

/// Images from a forward pass without gradient bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImages {
    pub image: Tensor,
    pub rgb: Tensor,
    pub feat: Tensor,
    pub alpha: Tensor,
}

/// The prior network together with its primitives and parameters.
#[derive(Clone)]
pub struct GapNet {
    pub config: ModelConfig,
    pub template: Arc<HeadTemplate>,
    pub points: FeaturePointCloud,
    pub store: ParamStore,
    pub num_identities: usize,
    tensors: TemplateTensors,
    faces: Arc<Vec<[usize; 3]>>,
    parent: Arc<Vec<usize>>,
    anchors: Arc<Tensor>,
    ranges: [std::ops::Range<usize>; NUM_PARTS],
}

pub fn encoding_name(part: Part) -> String {
    format!("enc/{part}")
}

pub fn code_name(part: Part) -> String {
    format!("code/{part}")
}

pub fn inversion_name(part: Part) -> String {
    format!("invw/{part}")
}

pub fn personal_name(part: Part) -> String {
    format!("personal/{part}")
}

pub fn offsets_name(identity: usize) -> String {
    format!("delta/{identity}")
}

fn mlp_prefix(kind: &str, part: Part) -> String {
    format!("{kind}/{part}")
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, rows: usize, cols: usize, gain: f64) -> Tensor {
        let bound = gain * (3.0 / rows as f64).sqrt();
        Tensor::new(&[rows, cols], (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect())
    }
}

impl GapNet {
    pub fn new(template: Arc<HeadTemplate>, config: ModelConfig, num_identities: usize, seed: u64) -> Result<GapNet> {
        config.validate()?;
        if num_identities == 0 {
            return Err(Error::InvalidArgument("the prior needs at least one identity".into()));
        }
        let points = FeaturePointCloud::init_uv(&template, config.uv_resolution, seed)?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908),
        };
        let ranges = points.part_ranges();
        let relu_gain = 2f64.sqrt();
        for part in Part::ALL {
            let r = ranges[part.index()].clone();
            let enc = points.encodings[r.start * ENCODING_DIM..r.end * ENCODING_DIM].to_vec();
            store.add(encoding_name(part), Tensor::new(&[r.len(), ENCODING_DIM], enc));
        }
        for part in Part::ALL {
            let codes = Tensor::new(
                &[num_identities, config.code_dim],
                (0..num_identities * config.code_dim)
                    .map(|_| init.rng.random_range(-1.0..1.0) * 0.01)
                    .collect(),
            );
            store.add(code_name(part), codes);
        }
        let h = config.mlp_hidden;
        let geo_in = ENCODING_DIM + config.code_dim;
        let app_in = ENCODING_DIM + 3 + GEOMETRY_DIM + config.code_dim;
        let logit = |p: f64| (p / (1.0 - p)).ln();
        for part in Part::ALL {
            for (kind, input, out) in [("geo", geo_in, GEOMETRY_DIM), ("app", app_in, APPEARANCE_DIM)] {
                let prefix = mlp_prefix(kind, part);
                let dims = [input, h, h, h, out];
                for l in 0..4 {
                    let w = if l == 3 {
                        Tensor::zeros(&[dims[l], dims[l + 1]])
                    } else {
                        init.he(dims[l], dims[l + 1], relu_gain)
                    };
                    store.add(format!("{prefix}/w{l}"), w);
                    let mut b = Tensor::zeros(&[dims[l + 1]]);
                    if l == 3 && kind == "geo" {
                        let d = b.data_mut();
                        d[3] = 1.0;
                        d[7..10].fill(config.scale_init.ln());
                        d[10] = logit(config.opacity_init);
                    }
                    store.add(format!("{prefix}/b{l}"), b);
                }
            }
        }
        let leaky_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        for l in 0..config.cnn_layers {
            let cin = if l == 0 { APPEARANCE_DIM } else { config.cnn_width };
            let last = l + 1 == config.cnn_layers;
            let cout = if last { RGB_DIM } else { config.cnn_width };
            let w = if last {
                Tensor::zeros(&[cout, cin * 9])
            } else {
                // Stored as [c_out, c_in·9]; fan-in is the row length.
                let t = init.he(cin * 9, cout, leaky_gain);
                transpose(&t)
            };
            store.add(format!("cnn/w{l}"), w);
            store.add(format!("cnn/b{l}"), Tensor::zeros(&[cout]));
        }
        GapNet::from_parts(template, config, points, store, num_identities)
    }

    /// Reassembles a model from stored state.
    pub fn from_parts(
        template: Arc<HeadTemplate>,
        config: ModelConfig,
        points: FeaturePointCloud,
        store: ParamStore,
        num_identities: usize,
    ) -> Result<GapNet> {
        config.validate()?;
        template.validate()?;
        points.validate(&template)?;
        let anchors = Tensor::new(&[points.len(), 3], points.anchor_local.iter().flatten().copied().collect());
        let ranges = points.part_ranges();
        let net = GapNet {
            tensors: TemplateTensors::new(template.clone()),
            faces: Arc::new(template.faces.clone()),
            parent: Arc::new(points.parent_face.clone()),
            anchors: Arc::new(anchors),
            ranges,
            config,
            template,
            points,
            store,
            num_identities,
        };
        for part in Part::ALL {
            let id = net.pid(&encoding_name(part))?;
            let expect = [net.ranges[part.index()].len(), ENCODING_DIM];
            if net.store.get(id).shape() != expect {
                return Err(Error::shape("encodings", format!("{expect:?}"), format!("{:?}", net.store.get(id).shape())));
            }
            let code = net.pid(&code_name(part))?;
            if net.store.get(code).shape() != [num_identities, net.config.code_dim] {
                return Err(Error::Checkpoint(format!("codebook for {part} has the wrong shape")));
            }
        }
        Ok(net)
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn part_range(&self, part: Part) -> std::ops::Range<usize> {
        self.ranges[part.index()].clone()
    }

    pub fn pid(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no parameter {name}")))
    }

    /// Parameter ids belonging to one part: encodings, both MLPs and the
    /// codebook slice, plus any inversion or personal codes.
    pub fn part_params(&self, part: Part) -> Vec<ParamId> {
        let mut names = vec![encoding_name(part), code_name(part), inversion_name(part), personal_name(part)];
        for kind in ["geo", "app"] {
            for l in 0..4 {
                names.push(format!("{}/w{l}", mlp_prefix(kind, part)));
                names.push(format!("{}/b{l}", mlp_prefix(kind, part)));
            }
        }
        names.iter().filter_map(|n| self.store.id(n)).collect()
    }

    pub fn cnn_params(&self) -> Vec<ParamId> {
        (0..self.config.cnn_layers)
            .flat_map(|l| [format!("cnn/w{l}"), format!("cnn/b{l}")])
            .filter_map(|n| self.store.id(&n))
            .collect()
    }

    /// Codebook row `j` for every part.
    pub fn codebook_row(&self, j: usize) -> Result<Vec<Vec<f64>>> {
        if j >= self.num_identities {
            return Err(Error::InvalidArgument(format!(
                "identity {j} out of range for a codebook of {}",
                self.num_identities
            )));
        }
        let d = self.config.code_dim;
        Part::ALL
            .iter()
            .map(|&p| Ok(self.store.get(self.pid(&code_name(p))?).data()[j * d..(j + 1) * d].to_vec()))
            .collect()
    }

    /// Codes currently selected by `identity`, evaluated to values. For a
    /// split identity these are the geometry codes.
    pub fn identity_codes(&self, identity: &Identity) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        Part::ALL
            .iter()
            .map(|&p| {
                let v = self.part_codes(&mut g, identity, p)?.0;
                Ok(g.value(v).data().to_vec())
            })
            .collect()
    }

    /// Inversion logits, one `[k, 1]` parameter per part, reset to zero.
    pub fn reset_inversion_weights(&mut self) {
        for part in Part::ALL {
            let zeros = Tensor::zeros(&[self.num_identities, 1]);
            match self.store.id(&inversion_name(part)) {
                Some(id) => self.store.set(id, zeros).expect("same shape"),
                None => {
                    self.store.add(inversion_name(part), zeros);
                }
            }
        }
    }

    pub fn set_personal_codes(&mut self, codes: &[Vec<f64>]) -> Result<()> {
        if codes.len() != NUM_PARTS || codes.iter().any(|c| c.len() != self.config.code_dim) {
            return Err(Error::InvalidArgument("personal codes must be parts × code_dim".into()));
        }
        for (part, c) in Part::ALL.iter().zip(codes) {
            let t = Tensor::new(&[1, self.config.code_dim], c.clone());
            match self.store.id(&personal_name(*part)) {
                Some(id) => self.store.set(id, t)?,
                None => {
                    self.store.add(personal_name(*part), t);
                }
            }
        }
        Ok(())
    }

    fn fixed_code(&self, g: &mut Graph, codes: &[Vec<f64>], part: Part) -> Result<Var> {
        let c = codes
            .get(part.index())
            .filter(|c| c.len() == self.config.code_dim)
            .ok_or_else(|| Error::InvalidArgument("fixed codes must be parts × code_dim".into()))?;
        Ok(g.constant(Tensor::new(&[1, self.config.code_dim], c.clone())))
    }

    /// Codes for the geometry and appearance MLPs of one part.
    fn part_codes(&self, g: &mut Graph, identity: &Identity, part: Part) -> Result<(Var, Var)> {
        let code = match identity {
            Identity::Codebook(j) => {
                if *j >= self.num_identities {
                    return Err(Error::InvalidArgument(format!(
                        "identity {j} out of range for a codebook of {}",
                        self.num_identities
                    )));
                }
                let codes = g.param(&self.store, self.pid(&code_name(part))?);
                g.slice_rows(codes, *j, j + 1)
            }
            Identity::Mixture => {
                let w = g.param(&self.store, self.pid(&inversion_name(part))?);
                let codes = g.param(&self.store, self.pid(&code_name(part))?);
                combine_identity_op(g, w, codes)?
            }
            Identity::Personal => g.param(&self.store, self.pid(&personal_name(part))?),
            Identity::Fixed(codes) => self.fixed_code(g, codes, part)?,
            Identity::Split { geometry, appearance } => {
                let a = self.fixed_code(g, geometry, part)?;
                let b = self.fixed_code(g, appearance, part)?;
                return Ok((a, b));
            }
        };
        Ok((code, code))
    }

    /// Four-layer rectifier MLP whose first layer takes `[x, code]`; the code
    /// term is shared by all rows so it enters as a bias.
    fn part_mlp(&self, g: &mut Graph, kind: &str, part: Part, x: Var, code: Var) -> Result<Var> {
        let prefix = mlp_prefix(kind, part);
        let p = |g: &mut Graph, name: String| -> Result<Var> { Ok(g.param(&self.store, self.pid(&name)?)) };
        let in_x = g.shape(x)[1];
        let w0 = p(g, format!("{prefix}/w0"))?;
        let rows = g.shape(w0)[0];
        let wx = g.slice_rows(w0, 0, in_x);
        let wz = g.slice_rows(w0, in_x, rows);
        let zb = g.matmul(code, wz);
        let h = self.config.mlp_hidden;
        let zb = g.reshape(zb, &[h]);
        let b0 = p(g, format!("{prefix}/b0"))?;
        let b0 = g.add(zb, b0);
        let mut y = g.affine(x, wx, b0);
        for l in 1..4 {
            y = g.relu(y);
            let w = p(g, format!("{prefix}/w{l}"))?;
            let b = p(g, format!("{prefix}/b{l}"))?;
            y = g.affine(y, w, b);
        }
        Ok(y)
    }

    /// Screen-space refinement of `[34, H, W]` rendered channels to RGB.
    pub fn refine(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != APPEARANCE_DIM {
            return Err(Error::shape("refine", format!("[{APPEARANCE_DIM}, H, W]"), format!("{s:?}")));
        }
        let mut y = x;
        for l in 0..self.config.cnn_layers {
            let w = g.param(&self.store, self.pid(&format!("cnn/w{l}"))?);
            let b = g.param(&self.store, self.pid(&format!("cnn/b{l}"))?);
            y = g.conv3x3(y, w, b);
            y = if l + 1 == self.config.cnn_layers {
                g.sigmoid(y)
            } else {
                g.leaky_relu(y, LEAKY_SLOPE)
            };
        }
        Ok(y)
    }

    /// Refines separately supplied RGB `[3, H, W]` and feature `[31, H, W]` planes.
    pub fn refine_planes(&self, g: &mut Graph, rgb: Var, feat: Var) -> Result<Var> {
        let (a, b) = (g.shape(rgb).to_vec(), g.shape(feat).to_vec());
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] || a[0] != RGB_DIM || b[0] != APPEARANCE_DIM - RGB_DIM {
            return Err(Error::shape("refine", "[3, H, W] and [31, H, W]", format!("{a:?} and {b:?}")));
        }
        let hw = a[1] * a[2];
        let ra = g.reshape(rgb, &[RGB_DIM, hw]);
        let fb = g.reshape(feat, &[APPEARANCE_DIM - RGB_DIM, hw]);
        let cat = g.concat_rows(&[ra, fb]);
        let x = g.reshape(cat, &[APPEARANCE_DIM, a[1], a[2]]);
        self.refine(g, x)
    }

    /// Full mapping from mesh parameters and identity to images.
    /// `delta` overrides the static offsets of `params` with a graph value.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &HeadParams,
        delta: Option<Var>,
        camera: &Camera,
        identity: &Identity,
    ) -> Result<AvatarOutput> {
        params.check(&self.template)?;
        let t = &self.template;
        let nj = t.num_joints();
        let beta = g.constant(Tensor::new(&[t.shape_dim], params.beta.clone()));
        let theta = g.constant(Tensor::new(&[nj, 3], params.theta.iter().flatten().copied().collect()));
        let phi = g.constant(Tensor::new(&[t.expr_dim], params.phi.clone()));
        let delta = match delta {
            Some(d) => d,
            None => g.constant(Tensor::new(&[t.num_vertices(), 3], params.delta.iter().flatten().copied().collect())),
        };
        let posed = pose_mesh_op(g, &self.tensors, beta, theta, phi, delta)?;
        let zero_theta = g.constant(Tensor::zeros(&[nj, 3]));
        let zero_phi = g.constant(Tensor::zeros(&[t.expr_dim]));
        let neutral = pose_mesh_op(g, &self.tensors, beta, zero_theta, zero_phi, delta)?;
        let frames_posed = triangle_frames_op(g, posed, self.faces.clone())?;
        let frames_neutral = triangle_frames_op(g, neutral, self.faces.clone())?;
        let fp = g.gather_rows(frames_posed, self.parent.clone());
        let fnt = g.gather_rows(frames_neutral, self.parent.clone());

        let mut codes = Vec::with_capacity(NUM_PARTS);
        let mut raw_geo = Vec::new();
        let mut encs = Vec::with_capacity(NUM_PARTS);
        for part in Part::ALL {
            let (geo_code, app_code) = self.part_codes(g, identity, part)?;
            codes.push(app_code);
            let enc = g.param(&self.store, self.pid(&encoding_name(part))?);
            encs.push(enc);
            if !self.ranges[part.index()].is_empty() {
                raw_geo.push(self.part_mlp(g, "geo", part, enc, geo_code)?);
            }
        }
        let raw = g.concat_rows(&raw_geo);
        let off = g.slice_cols(raw, 0, 3);
        let off = g.tanh(off);
        let offsets = g.scale(off, self.config.position_range);
        let q = g.slice_cols(raw, 3, 7);
        let rotations = g.normalize_rows(q);
        let s = g.slice_cols(raw, 7, 10);
        let s = g.clamp(s, -8.0, 1.5);
        let scales = g.exp(s);
        let a = g.slice_cols(raw, 10, 11);
        let opacity = g.sigmoid(a);

        let anchors = g.constant_shared(self.anchors.clone());
        let mu_local = g.add(anchors, offsets);
        let means = bind_positions(g, fp, mu_local)?;
        let neutral_means = bind_positions(g, fnt, mu_local)?;
        let dynamic = g.sub(means, neutral_means);
        let dyn_scaled = g.scale(dynamic, self.config.dynamic_scale);
        let geo_feat = g.concat_cols(&[offsets, rotations, scales, opacity]);

        let mut raw_app = Vec::new();
        for part in Part::ALL {
            let r = self.ranges[part.index()].clone();
            if r.is_empty() {
                continue;
            }
            let e = g.slice_rows(dyn_scaled, r.start, r.end);
            let gf = g.slice_rows(geo_feat, r.start, r.end);
            let x = g.concat_cols(&[encs[part.index()], e, gf]);
            raw_app.push(self.part_mlp(g, "app", part, x, codes[part.index()])?);
        }
        let raw = g.concat_rows(&raw_app);
        let color = g.slice_cols(raw, 0, RGB_DIM);
        let color = g.sigmoid(color);
        let latent = g.slice_cols(raw, RGB_DIM, APPEARANCE_DIM);
        let appearance = g.concat_cols(&[color, latent]);

        let covariances = bind_covariance(g, fp, rotations, scales)?;
        let img = rasterize_op(g, means, covariances, appearance, opacity, camera)?;
        let (h, w) = (camera.height, camera.width);
        let flat = g.reshape(img, &[APPEARANCE_DIM + 1, h * w]);
        let rgb = g.slice_rows(flat, 0, RGB_DIM);
        let rgb = g.reshape(rgb, &[RGB_DIM, h, w]);
        let feat = g.slice_rows(flat, RGB_DIM, APPEARANCE_DIM);
        let feat = g.reshape(feat, &[APPEARANCE_DIM - RGB_DIM, h, w]);
        let alpha = g.slice_rows(flat, APPEARANCE_DIM, APPEARANCE_DIM + 1);
        let alpha = g.reshape(alpha, &[1, h, w]);
        let cnn_in = g.slice_rows(flat, 0, APPEARANCE_DIM);
        let cnn_in = g.reshape(cnn_in, &[APPEARANCE_DIM, h, w]);
        let image = self.refine(g, cnn_in)?;
        Ok(AvatarOutput {
            image,
            rgb,
            feat,
            alpha,
            offsets,
            rotations,
            scales,
            opacity,
            appearance,
            dynamic,
            means,
            covariances,
            posed_vertices: posed,
        })
    }

    /// Forward pass returning plain images.
    pub fn render(&self, params: &HeadParams, camera: &Camera, identity: &Identity) -> Result<RenderedImages> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, None, camera, identity)?;
        Ok(RenderedImages {
            image: g.value(out.image).clone(),
            rgb: g.value(out.rgb).clone(),
            feat: g.value(out.feat).clone(),
            alpha: g.value(out.alpha).clone(),
        })
    }

    /// Accumulated opacity of only the primitives in `parts`, from the values
    /// of an evaluated forward pass.
    pub fn parts_alpha(&self, g: &Graph, out: &AvatarOutput, camera: &Camera, parts: &[Part]) -> Result<Tensor> {
        let (mu, cov, op) = (g.value(out.means), g.value(out.covariances), g.value(out.opacity));
        let mut scene = SplatScene {
            channels: 0,
            ..Default::default()
        };
        for part in parts {
            for i in self.part_range(*part) {
                let m = mu.row(i);
                scene.mu.push([m[0], m[1], m[2]]);
                scene.cov.push(std::array::from_fn(|k| cov.row(i)[k]));
                scene.opacity.push(op.data()[i]);
            }
        }
        let r = rasterize(&scene, camera, DEFAULT_TILE)?;
        Ok(r.image)
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}
