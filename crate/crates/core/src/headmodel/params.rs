use serde::{Deserialize, Serialize};

use super::HeadTemplate;
use crate::error::{Error, Result};

/// Shape, pose, expression and static-offset parameters driving the mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub beta: Vec<f64>,
    /// Axis-angle rotation per joint, radians.
    pub theta: Vec<[f64; 3]>,
    pub phi: Vec<f64>,
    /// Per-vertex offsets, meters.
    pub delta: Vec<[f64; 3]>,
}

impl HeadParams {
    /// All-zero parameters: reproduces the template exactly.
    pub fn neutral(template: &HeadTemplate) -> Self {
        HeadParams {
            beta: vec![0.0; template.shape_dim],
            theta: vec![[0.0; 3]; template.num_joints()],
            phi: vec![0.0; template.expr_dim],
            delta: vec![[0.0; 3]; template.num_vertices()],
        }
    }

    /// Same identity (shape and offsets) with zero pose and expression.
    pub fn neutralized(&self) -> Self {
        HeadParams {
            beta: self.beta.clone(),
            theta: vec![[0.0; 3]; self.theta.len()],
            phi: vec![0.0; self.phi.len()],
            delta: self.delta.clone(),
        }
    }

    pub fn check(&self, template: &HeadTemplate) -> Result<()> {
        let dim = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Dimension { what, expected, got })
            }
        };
        dim("beta", template.shape_dim, self.beta.len())?;
        dim("theta", template.num_joints(), self.theta.len())?;
        dim("phi", template.expr_dim, self.phi.len())?;
        dim("delta", template.num_vertices(), self.delta.len())?;
        let finite = self.beta.iter().chain(&self.phi).all(|v| v.is_finite())
            && self.theta.iter().flatten().all(|v| v.is_finite())
            && self.delta.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("head parameters".into()));
        }
        Ok(())
    }

    pub fn set_joint(&mut self, template: &HeadTemplate, name: &str, axis_angle: [f64; 3]) -> Result<()> {
        let j = template
            .joint_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no joint named {name}")))?;
        self.theta[j] = axis_angle;
        Ok(())
    }
}
