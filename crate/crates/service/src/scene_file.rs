//! On-disk scene description used by `compose` and `export`: layers refer to
//! splat files by path, relative to the scene file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use genprim::authoring::{write_atomic, Layer, Scene};
use genprim::splat_io::{parse_splat_file, SimilarityTransform};
use genprim::voxelizer::{Bounds, VoxelGrid};

use crate::ServiceError;

fn unit_gain() -> [f32; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFileLayer {
    pub id: String,
    pub splat: String,
    #[serde(default)]
    pub primitive: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transform: SimilarityTransform,
    #[serde(default = "unit_gain")]
    pub gain: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(default)]
    pub layers: Vec<SceneFileLayer>,
    #[serde(default)]
    pub static_regions: Vec<String>,
}

impl SceneFile {
    /// Missing files read as an empty scene.
    pub fn load_or_default(path: &Path) -> Result<Self, ServiceError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Self::load(path)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ServiceError> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut SceneFileLayer> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn to_scene(&self, base: &Path) -> Result<Scene, ServiceError> {
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut scene = Scene::default();
        for l in &self.layers {
            let cloud = parse_splat_file(&std::fs::read(resolve(&l.splat))?)?;
            scene.add_layer(Layer {
                id: l.id.clone(),
                primitive_id: l.primitive.clone(),
                seed: l.seed,
                cloud,
                grid: VoxelGrid::new(1, Bounds::unit()),
                conditioning: VoxelGrid::new(1, Bounds::unit()),
                transform: l.transform,
                gain: l.gain,
            })?;
        }
        for s in &self.static_regions {
            scene.static_regions.push(parse_splat_file(&std::fs::read(resolve(s))?)?);
        }
        Ok(scene)
    }
}
