use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffengine::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Feature-space image distance used by the perceptual term.
pub trait PerceptualBackend: Send + Sync {
    /// Scalar distance between two `[3, H, W]` images.
    fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var>;
}

/// Frozen random convolutional pyramid. Each scale runs two 3×3 conv +
/// rectifier layers, unit-normalizes features per pixel and compares them
/// with a mean squared difference; the input is then average-pooled.
#[derive(Clone, Debug)]
pub struct RandomPyramid {
    layers: Vec<[(Tensor, Tensor); 2]>,
}

pub const PYRAMID_SCALES: usize = 3;
pub const PYRAMID_WIDTH: usize = 8;
const FEATURE_EPS: f64 = 1e-10;

impl RandomPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |cin: usize, cout: usize| {
            let n = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).expect("valid std");
            let w = Tensor::new(&[cout, cin * 9], (0..cout * cin * 9).map(|_| n.sample(&mut rng)).collect());
            let b = Tensor::new(&[cout], (0..cout).map(|_| n.sample(&mut rng) * 0.1).collect());
            (w, b)
        };
        let layers = (0..PYRAMID_SCALES)
            .map(|_| [conv(3, PYRAMID_WIDTH), conv(PYRAMID_WIDTH, PYRAMID_WIDTH)])
            .collect();
        RandomPyramid { layers }
    }

    fn features(&self, g: &mut Graph, x: Var, scale: usize) -> Var {
        let mut y = x;
        for (w, b) in &self.layers[scale] {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            y = g.conv3x3(y, w, b);
            y = g.relu(y);
        }
        g.channel_normalize(y, FEATURE_EPS)
    }
}

impl Default for RandomPyramid {
    fn default() -> Self {
        RandomPyramid::new(0x5eed_1e55)
    }
}

impl PerceptualBackend for RandomPyramid {
    fn distance(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
        if sa != sb || sa.len() != 3 || sa[0] != 3 {
            return Err(Error::shape("perceptual", format!("{sa:?}"), format!("{sb:?}")));
        }
        let (mut x, mut y) = (a, b);
        let mut terms = Vec::new();
        for s in 0..PYRAMID_SCALES {
            let shape = g.shape(x).to_vec();
            if shape[1] < 2 || shape[2] < 2 {
                break;
            }
            // Raw colors anchor the distance so it only vanishes on equal inputs.
            let d = g.sub(x, y);
            let d = g.square(d);
            terms.push(g.mean(d));
            let (fx, fy) = (self.features(g, x, s), self.features(g, y, s));
            let d = g.sub(fx, fy);
            let d = g.square(d);
            terms.push(g.mean(d));
            if s + 1 < PYRAMID_SCALES {
                x = g.avg_pool2(x);
                y = g.avg_pool2(y);
            }
        }
        let weighted: Vec<(f64, Var)> = terms.into_iter().map(|t| (1.0, t)).collect();
        Ok(g.weighted_sum(&weighted))
    }
}
