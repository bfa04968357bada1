//! Encoders, prototype embeddings and the cosine zero-shot classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::sde::{dot, norm, StateVector};

/// A differentiable map from data space to embedding space.
pub trait Encoder: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Vector-Jacobian product `J(x)^T cotangent`.
    fn pullback(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>>;
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}

fn matvec(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| dot(r, x)).collect()
}

fn matvec_t(rows: &[Vec<f64>], y: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, yi) in rows.iter().zip(y) {
        for (o, a) in out.iter_mut().zip(r) {
            *o += a * yi;
        }
    }
    out
}

/// `x -> A x` with an `m x d` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncoder {
    rows: Vec<Vec<f64>>,
}

impl LinearEncoder {
    /// Gaussian rows normalized to unit length.
    pub fn random(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim < 2 || input_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "linear encoder needs m >= 2 and d >= 1, got m = {output_dim}, d = {input_dim}"
            )));
        }
        let mut g = NoiseStream::new(seed, 0, "encoder/linear").source();
        let rows = (0..output_dim)
            .map(|_| loop {
                let r = g.vector(input_dim);
                let n = norm(&r);
                if n > 0.0 {
                    break r.iter().map(|v| v / n).collect();
                }
            })
            .collect();
        Ok(Self { rows })
    }

    /// Uses the matrix as given (no normalization).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidParameter("linear encoder needs at least two rows".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter("linear encoder rows are empty".into()));
        }
        for r in &rows {
            check_len(d, r.len())?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("encoder matrix"));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { rows: self.rows.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect() }
    }

    /// Largest singular value by power iteration on `A^T A`.
    pub fn operator_norm(&self) -> f64 {
        let d = self.input_dim();
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        // perturb the start so it is not orthogonal to the top singular vector
        for (i, x) in v.iter_mut().enumerate() {
            *x += 1e-3 * ((i * 7919 % 13) as f64);
        }
        let mut sigma = 0.0;
        for _ in 0..10_000 {
            let w = matvec_t(&self.rows, &matvec(&self.rows, &v), d);
            let n = norm(&w);
            if n == 0.0 {
                return 0.0;
            }
            let next: Vec<f64> = w.iter().map(|x| x / n).collect();
            let converged = (n.sqrt() - sigma).abs() <= 1e-14 * n.sqrt();
            sigma = n.sqrt();
            v = next;
            if converged {
                break;
            }
        }
        sigma
    }
}

impl Encoder for LinearEncoder {
    fn input_dim(&self) -> usize {
        self.rows[0].len()
    }

    fn output_dim(&self) -> usize {
        self.rows.len()
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        Ok(matvec(&self.rows, x))
    }

    fn pullback(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        check_len(self.output_dim(), cotangent.len())?;
        Ok(matvec_t(&self.rows, cotangent, self.input_dim()))
    }
}

/// One tanh hidden layer followed by a linear read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEncoder {
    hidden_w: Vec<Vec<f64>>,
    hidden_b: Vec<f64>,
    out_w: Vec<Vec<f64>>,
}

impl MlpEncoder {
    pub fn random(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || output_dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "mlp encoder needs d >= 1, hidden >= 1, m >= 2 (got {input_dim}, {hidden}, {output_dim})"
            )));
        }
        let mut g = NoiseStream::new(seed, 0, "encoder/mlp").source();
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let hidden_w = (0..hidden).map(|_| g.vector(input_dim).into_iter().map(|v| 2.0 * s1 * v).collect()).collect();
        let hidden_b = g.vector(hidden).into_iter().map(|v| 0.1 * v).collect();
        let out_w = (0..output_dim).map(|_| g.vector(hidden).into_iter().map(|v| s2 * v).collect()).collect();
        Ok(Self { hidden_w, hidden_b, out_w })
    }

    pub fn hidden_weights(&self) -> &[Vec<f64>] {
        &self.hidden_w
    }

    pub fn hidden_bias(&self) -> &[f64] {
        &self.hidden_b
    }

    pub fn output_weights(&self) -> &[Vec<f64>] {
        &self.out_w
    }

    fn activations(&self, x: &[f64]) -> Vec<f64> {
        self.hidden_w.iter().zip(&self.hidden_b).map(|(w, b)| (dot(w, x) + b).tanh()).collect()
    }
}

impl Encoder for MlpEncoder {
    fn input_dim(&self) -> usize {
        self.hidden_w[0].len()
    }

    fn output_dim(&self) -> usize {
        self.out_w.len()
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        Ok(matvec(&self.out_w, &self.activations(x)))
    }

    fn pullback(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_dim(), x.len())?;
        check_len(self.output_dim(), cotangent.len())?;
        let a = self.activations(x);
        let ga = matvec_t(&self.out_w, cotangent, a.len());
        let gz: Vec<f64> = ga.iter().zip(&a).map(|(g, a)| g * (1.0 - a * a)).collect();
        Ok(matvec_t(&self.hidden_w, &gz, self.input_dim()))
    }
}

/// Encoder chosen by configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnyEncoder {
    Linear(LinearEncoder),
    Mlp(MlpEncoder),
}

impl Encoder for AnyEncoder {
    fn input_dim(&self) -> usize {
        match self {
            AnyEncoder::Linear(e) => e.input_dim(),
            AnyEncoder::Mlp(e) => e.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            AnyEncoder::Linear(e) => e.output_dim(),
            AnyEncoder::Mlp(e) => e.output_dim(),
        }
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            AnyEncoder::Linear(e) => e.encode(x),
            AnyEncoder::Mlp(e) => e.encode(x),
        }
    }

    fn pullback(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        match self {
            AnyEncoder::Linear(e) => e.pullback(x, cotangent),
            AnyEncoder::Mlp(e) => e.pullback(x, cotangent),
        }
    }
}

impl<E: Encoder + ?Sized> Encoder for &E {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        (**self).encode(x)
    }

    fn pullback(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        (**self).pullback(x, cotangent)
    }
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u.len(), v.len())?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 {
        return Err(Error::UndefinedSimilarity("first vector".into()));
    }
    if nv == 0.0 {
        return Err(Error::UndefinedSimilarity("second vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Unit-norm class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    prototypes: Vec<Vec<f64>>,
}

impl PrototypeSet {
    /// Normalizes each vector; rejects zero vectors and fewer than two classes.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::InvalidParameter("need at least two prototypes".into()));
        }
        let dim = vectors[0].len();
        let prototypes = vectors
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                check_len(dim, v.len())?;
                let n = norm(&v);
                if !(n > 0.0 && n.is_finite()) {
                    return Err(Error::UndefinedSimilarity(format!("prototype {k}")));
                }
                Ok(v.iter().map(|x| x / n).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { prototypes })
    }

    /// Encodings of per-class mean points.
    pub fn from_class_means<E: Encoder>(encoder: &E, means: &[Vec<f64>]) -> Result<Self> {
        let v = means.iter().map(|m| encoder.encode(m)).collect::<Result<Vec<_>>>()?;
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.prototypes
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineClassifier<E> {
    encoder: E,
    prototypes: PrototypeSet,
}

impl<E: Encoder> CosineClassifier<E> {
    pub fn new(encoder: E, prototypes: PrototypeSet) -> Result<Self> {
        check_len(encoder.output_dim(), prototypes.dim())?;
        Ok(Self { encoder, prototypes })
    }

    pub fn encoder(&self) -> &E {
        &self.encoder
    }

    pub fn prototypes(&self) -> &PrototypeSet {
        &self.prototypes
    }

    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Cosine logits of every class.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.encoder.encode(x)?;
        if norm(&e) == 0.0 {
            return Err(Error::UndefinedSimilarity("input embedding".into()));
        }
        self.prototypes.vectors().iter().map(|p| cosine(&e, p)).collect()
    }

    pub fn logits_and_classify(&self, x: &[f64]) -> Result<(Vec<f64>, usize)> {
        let l = self.logits(x)?;
        let k = argmax(&l);
        Ok((l, k))
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        self.logits_and_classify(x).map(|(_, k)| k)
    }

    /// Softmax cross-entropy of `logits / temperature` against `label`.
    pub fn loss(&self, x: &[f64], label: usize, temperature: f64) -> Result<f64> {
        self.check_label(label)?;
        let z: Vec<f64> = self.logits(x)?.iter().map(|l| l / temperature).collect();
        Ok(crate::sde::log_sum_exp(&z) - z[label])
    }

    /// Exact gradient of [`Self::loss`] with respect to the input.
    pub fn loss_gradient(&self, x: &[f64], label: usize, temperature: f64) -> Result<StateVector> {
        self.check_label(label)?;
        if !(temperature > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
        }
        let e = self.encoder.encode(x)?;
        let n = norm(&e);
        if n == 0.0 {
            return Err(Error::UndefinedSimilarity("input embedding".into()));
        }
        // unclamped cosines so the gradient matches the smooth loss exactly
        let logits: Vec<f64> = self.prototypes.vectors().iter().map(|p| dot(p, &e) / n).collect();
        let z: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let lse = crate::sde::log_sum_exp(&z);
        let mut grad_e = vec![0.0; e.len()];
        for (k, (p, l)) in self.prototypes.vectors().iter().zip(&logits).enumerate() {
            let prob = (z[k] - lse).exp();
            let dl = (prob - if k == label { 1.0 } else { 0.0 }) / temperature;
            // d(cos_k)/de = (p - cos_k e / n) / n
            for ((g, pi), ei) in grad_e.iter_mut().zip(p).zip(&e) {
                *g += dl * (pi - l * ei / n) / n;
            }
        }
        StateVector::new(self.encoder.pullback(x, &grad_e)?)
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label < self.n_classes() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("label {label} out of range for {} classes", self.n_classes())))
        }
    }
}
