use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::geometry::{Pose, Rotation, Vec3};
use crate::sim::{render, CameraIntrinsics, GoalSpec, Image, Scene};
use crate::workspace::{Primitive, SafetyConfig, VolumeNode, WorkspaceVolume};

/// Everything fixed about the task: the scene, the eye-in-hand camera, the
/// goal, and the safe workspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct World {
    pub scene: Scene,
    pub camera: CameraIntrinsics,
    pub goal: GoalSpec,
    pub workspace: WorkspaceVolume,
    pub safety: SafetyConfig,
    /// Per-pixel Gaussian noise on every observation; 0 disables it.
    pub camera_noise_std: f64,
}

impl Default for World {
    fn default() -> Self {
        let scene = Scene::default();
        let goal = GoalSpec::default();
        let workspace = default_workspace(&scene, &goal);
        World {
            scene,
            camera: CameraIntrinsics::default(),
            goal,
            workspace,
            safety: SafetyConfig::default(),
            camera_noise_std: 0.01,
        }
    }
}

/// Convex region above the cup: a floor 2 cm over the rim, a cylinder
/// around the cup axis and a sphere around the hover point.
pub fn default_workspace(scene: &Scene, goal: &GoalSpec) -> WorkspaceVolume {
    let cup = scene.cup_position;
    let hover = scene.hover_point(goal);
    WorkspaceVolume::new(VolumeNode::Intersection(vec![
        Primitive::HalfSpace { normal: Vec3::Z, offset: scene.cup_top_z() + 0.02 }.into(),
        Primitive::Cylinder {
            center: Vec3::new(cup.x, cup.y, scene.table_plane_z + 0.45),
            radius: 0.5,
            half_height: 0.45,
            axis: Vec3::Z,
        }
        .into(),
        Primitive::Sphere { center: hover, radius: 0.75 }.into(),
    ]))
    .expect("default workspace is valid")
}

/// Orientation with the optical axis (end-effector +Z) pointing straight
/// down and image rows aligned with world -Y.
pub fn looking_down() -> Rotation {
    Rotation::from_axis_angle(Vec3::X, std::f64::consts::PI).expect("unit axis")
}

impl World {
    pub fn validate(&self) -> Result<(), SimError> {
        self.scene.validate()?;
        self.camera.validate()?;
        self.goal.validate()?;
        self.safety
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if !(self.camera_noise_std >= 0.0) {
            return Err(SimError::InvalidConfig("camera_noise_std must be non-negative".into()));
        }
        let hover = self.scene.hover_point(&self.goal);
        if !self.workspace.contains(hover) {
            return Err(SimError::InvalidConfig("hover point lies outside the workspace".into()));
        }
        Ok(())
    }

    pub fn hover_point(&self) -> Vec3 {
        self.scene.hover_point(&self.goal)
    }

    /// Noise-free camera image.
    pub fn render(&self, pose: &Pose) -> Image {
        render(&self.scene, pose, &self.camera)
    }

    /// Camera image with the configured sensor noise.
    pub fn observe(&self, pose: &Pose, rng: &mut impl Rng) -> Image {
        let mut img = self.render(pose);
        img.add_noise(rng, self.camera_noise_std);
        img
    }

    /// Whether the cup's rim center projects inside the image with `margin`
    /// pixels to spare.
    pub fn cup_visible(&self, pose: &Pose, margin: f64) -> bool {
        let p = pose.inverse_transform_point(self.scene.cup_top_center());
        match self.camera.project(p) {
            Some((u, v)) => {
                u >= margin
                    && v >= margin
                    && u <= self.camera.width as f64 - margin
                    && v <= self.camera.height as f64 - margin
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_is_valid() {
        let w = World::default();
        w.validate().unwrap();
        assert!(w.cup_visible(&Pose::new(w.hover_point(), looking_down()), 4.0));
        assert!(!w.workspace.contains(w.scene.cup_top_center()));
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(serde_json::from_str::<World>(&json).unwrap(), w);
    }
}
