//! Data-independent baseline: sign of a Gaussian random projection of
//! mean-centered features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::MultiLabelDataset;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::model::sign;
use crate::retrieval::{CodeDatabase, PackedCode};

#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjection {
    /// `K x D`, entries drawn from N(0, 1).
    pub projection: Matrix,
    /// Subtracted from every feature vector before projecting.
    pub center: Vec<f64>,
}

impl RandomProjection {
    /// Draws the projection from `seed` and centers on the mean of `fit`.
    pub fn fit(fit: &MultiLabelDataset, bits: usize, seed: u64) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidArgument("bit count must be positive".into()));
        }
        if fit.is_empty() {
            return Err(Error::InvalidArgument("cannot center on an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bits * fit.dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut center = vec![0.0; fit.dim];
        for p in &fit.points {
            for (c, f) in center.iter_mut().zip(&p.features) {
                *c += f;
            }
        }
        center.iter_mut().for_each(|c| *c /= fit.len() as f64);
        Ok(RandomProjection {
            projection: Matrix::from_vec(bits, fit.dim, data),
            center,
        })
    }

    pub fn bits(&self) -> usize {
        self.projection.rows()
    }

    pub fn code(&self, features: &[f64]) -> Result<PackedCode> {
        if features.len() != self.center.len() {
            return Err(Error::DimensionMismatch {
                expected: self.center.len(),
                found: features.len(),
            });
        }
        let centered: Vec<f64> = features.iter().zip(&self.center).map(|(f, c)| f - c).collect();
        let signs: Vec<i8> = self.projection.iter_rows().map(|r| sign(dot(r, &centered))).collect();
        PackedCode::pack(&signs)
    }

    pub fn encode(&self, ds: &MultiLabelDataset) -> Result<CodeDatabase> {
        let mut db = CodeDatabase::new(self.bits())?;
        for p in &ds.points {
            db.push(p.id, &self.code(&p.features)?)?;
        }
        Ok(db)
    }
}
