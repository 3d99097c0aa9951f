use std::fs;
use std::path::Path;

use crate::geometry::{PointSet, Pose, RotationMatrix, SizeVec, Vec3};
use crate::model::Prediction;
use crate::synthdata::DENSE_POINTS;

use super::CliError;

/// Field order of a prediction file; every value is a little-endian `f32`,
/// like the dataset blob.
pub const PREDICTION_LAYOUT: [&str; 4] = ["rotation f32 3x3 row-major", "translation f32 3", "size f32 3", "dense f32 2048x3"];
pub const PREDICTION_FLOATS: usize = 9 + 3 + 3 + DENSE_POINTS * 3;

/// Prediction as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFile {
    pub pose: Pose,
    pub size: SizeVec,
    pub dense: PointSet,
}

impl PredictionFile {
    /// A dense cloud with other than 2048 points is resampled cyclically.
    pub fn from_prediction(p: &Prediction) -> Self {
        let pts = p.dense.points();
        let dense = PointSet::new((0..DENSE_POINTS).map(|i| pts[i % pts.len()]).collect()).expect("non-empty");
        Self { pose: Pose { rotation: p.rotation, translation: p.translation }, size: p.size, dense }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.pose.rotation.matrix();
        let mut vals: Vec<f64> = Vec::with_capacity(PREDICTION_FLOATS);
        for r in 0..3 {
            for c in 0..3 {
                vals.push(m[(r, c)]);
            }
        }
        vals.extend(self.pose.translation.iter());
        vals.extend(self.size.extents().iter());
        vals.extend(self.dense.to_flat());
        vals.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() != 4 * PREDICTION_FLOATS {
            return Err(format!("expected {} bytes, got {}", 4 * PREDICTION_FLOATS, bytes.len()));
        }
        let v: Vec<f64> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let m = nalgebra::Matrix3::from_row_slice(&v[0..9]);
        let pose = Pose::new(RotationMatrix::new_unchecked(m), Vec3::new(v[9], v[10], v[11])).map_err(|e| e.to_string())?;
        let size = SizeVec::new(v[12], v[13], v[14]).map_err(|e| e.to_string())?;
        let dense = PointSet::from_flat(&v[15..]).map_err(|e| e.to_string())?;
        Ok(Self { pose, size, dense })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
