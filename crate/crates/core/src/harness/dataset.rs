//! Labelled synthetic data drawn from a Gaussian mixture.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::tensor::Tensor;
use crate::rng::NoiseStream;
use crate::sde::{GmmDistribution, StateVector};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<StateVector>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        let x = Tensor::from_rows(&self.xs)?;
        let y = Tensor::new(vec![self.labels.len(), 1], self.labels.iter().map(|&l| l as f32).collect())?;
        Ok((x, y))
    }

    /// Writes `<stem>_x.tensor` and `<stem>_labels.tensor` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (x, y) = self.to_tensors()?;
        x.save(&dir.join(format!("{stem}_x.tensor")))?;
        y.save(&dir.join(format!("{stem}_labels.tensor")))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let x = Tensor::load(&dir.join(format!("{stem}_x.tensor")))?;
        let y = Tensor::load(&dir.join(format!("{stem}_labels.tensor")))?;
        let xs = x.rows().into_iter().map(StateVector::new).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = y.data().iter().map(|&v| v as usize).collect();
        if xs.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), actual: labels.len() });
        }
        Ok(Self { xs, labels })
    }
}

/// `n_per_class` points from each mixture component, clamped to the unit
/// box and labelled by component. Point `i` uses its own substream, so the
/// result depends only on `(gmm, n_per_class, noise)`.
pub fn synth_with_stream(gmm: &GmmDistribution, n_per_class: usize, noise: &NoiseStream) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::InvalidParameter("n_per_class must be at least 1".into()));
    }
    let mut xs = Vec::with_capacity(n_per_class * gmm.n_components());
    let mut labels = Vec::with_capacity(xs.capacity());
    for k in 0..gmm.n_components() {
        let (mean, var) = (&gmm.means()[k], &gmm.vars()[k]);
        for j in 0..n_per_class {
            let mut g = noise.substream((k * n_per_class + j) as u64, "dataset/point").source();
            let x: Vec<f64> = mean.iter().zip(var).map(|(m, v)| m + v.sqrt() * g.normal()).collect();
            xs.push(StateVector::clamped(x)?);
            labels.push(k);
        }
    }
    Ok(Dataset { xs, labels })
}

pub fn synth_dataset(gmm: &GmmDistribution, n_per_class: usize, seed: u64) -> Result<Dataset> {
    synth_with_stream(gmm, n_per_class, &NoiseStream::new(seed, 0, "dataset"))
}
