//! Variational graph encoder: per-node latent Gaussians over propagated
//! features, reparameterized sampling, and the softmax classifier head.
//!
//! Architecture: one shared ReLU propagation layer feeds two linear
//! propagation heads for the mean and log-variance,
//!
//! ```text
//! H  = relu(A_hat (X W_hidden))
//! P  = A_hat H
//! mu = P W_mu        log_var = clamp(P W_sigma, -10, 10)
//! z  = mu + exp(log_var / 2) .* eps        eps ~ N(0, I)
//! p  = softmax_rows(z W_cls)
//! ```
//!
//! The log-variance clamp keeps `exp` bounded and stops the uncertainty gate
//! from saturating early in training.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::CsrMatrix;
use crate::matrix::DenseMatrix;
use crate::rand_util::{glorot_uniform, standard_normal_matrix};
use crate::tape::{NodeId, Parameter, Tape};

/// Symmetric bound on the raw log-variance before `exp`.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Layer sizes of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
}

/// The four weight matrices of the encoder and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_hidden: Parameter,
    pub w_mu: Parameter,
    pub w_sigma: Parameter,
    pub w_cls: Parameter,
}

impl EncoderParams {
    /// Glorot-uniform initialization from the run's seeded generator.
    pub fn init(dims: EncoderDims, rng: &mut ChaCha20Rng) -> Self {
        EncoderParams {
            w_hidden: Parameter::new(
                "w_hidden",
                glorot_uniform(rng, dims.in_dim, dims.hidden_dim),
            ),
            w_mu: Parameter::new("w_mu", glorot_uniform(rng, dims.hidden_dim, dims.latent_dim)),
            w_sigma: Parameter::new(
                "w_sigma",
                glorot_uniform(rng, dims.hidden_dim, dims.latent_dim),
            ),
            w_cls: Parameter::new(
                "w_cls",
                glorot_uniform(rng, dims.latent_dim, dims.num_classes),
            ),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            in_dim: self.w_hidden.value.rows(),
            hidden_dim: self.w_hidden.value.cols(),
            latent_dim: self.w_mu.value.cols(),
            num_classes: self.w_cls.value.cols(),
        }
    }

    pub fn params(&self) -> [&Parameter; 4] {
        [&self.w_hidden, &self.w_mu, &self.w_sigma, &self.w_cls]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.w_hidden,
            &mut self.w_mu,
            &mut self.w_sigma,
            &mut self.w_cls,
        ]
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Parameter values in canonical order (hidden, mu, sigma, cls).
    pub fn values(&self) -> Vec<DenseMatrix> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    /// Accumulated gradients in canonical order.
    pub fn grads(&self) -> Vec<DenseMatrix> {
        self.params().iter().map(|p| p.grad.clone()).collect()
    }

    /// Rebuilds a parameter set from values in canonical order.
    pub fn from_values(values: &[DenseMatrix]) -> Result<Self> {
        if values.len() != 4 {
            return Err(Error::InvalidConfig(alloc::format!(
                "expected 4 weight matrices, got {}",
                values.len()
            )));
        }
        Ok(EncoderParams {
            w_hidden: Parameter::new("w_hidden", values[0].clone()),
            w_mu: Parameter::new("w_mu", values[1].clone()),
            w_sigma: Parameter::new("w_sigma", values[2].clone()),
            w_cls: Parameter::new("w_cls", values[3].clone()),
        })
    }
}

/// Node feature input, densely or in CSR form.
///
/// Citation-graph bag-of-words features are overwhelmingly zero; the CSR
/// route makes the first layer cost proportional to the nonzeros.
#[derive(Debug, Clone)]
pub enum Features {
    Dense(Arc<DenseMatrix>),
    Sparse {
        csr: Arc<CsrMatrix>,
        csr_t: Arc<CsrMatrix>,
    },
}

impl Features {
    pub fn dense(m: DenseMatrix) -> Self {
        Features::Dense(Arc::new(m))
    }

    pub fn sparse(m: &DenseMatrix) -> Self {
        let csr = CsrMatrix::from_dense(m);
        let csr_t = csr.transpose();
        Features::Sparse {
            csr: Arc::new(csr),
            csr_t: Arc::new(csr_t),
        }
    }

    /// Picks the representation by measured density.
    pub fn auto(m: &DenseMatrix) -> Self {
        let csr = CsrMatrix::from_dense(m);
        if csr.density() <= 0.25 {
            let csr_t = csr.transpose();
            Features::Sparse {
                csr: Arc::new(csr),
                csr_t: Arc::new(csr_t),
            }
        } else {
            Features::dense(m.clone())
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Features::Dense(m) => m.rows(),
            Features::Sparse { csr, .. } => csr.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Features::Dense(m) => m.cols(),
            Features::Sparse { csr, .. } => csr.cols(),
        }
    }

    /// Records `X * w` on the tape.
    fn matmul_on_tape(&self, tape: &mut Tape, w: NodeId) -> Result<NodeId> {
        match self {
            Features::Dense(m) => {
                let x = tape.constant(DenseMatrix::clone(m));
                tape.matmul(x, w)
            }
            Features::Sparse { csr, csr_t } => tape.csr_matmul(csr, csr_t, w),
        }
    }
}

/// Tape handles of the four weight leaves for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ParamLeaves {
    pub w_hidden: NodeId,
    pub w_mu: NodeId,
    pub w_sigma: NodeId,
    pub w_cls: NodeId,
}

impl ParamLeaves {
    pub fn create(tape: &mut Tape, params: &EncoderParams) -> Self {
        ParamLeaves {
            w_hidden: tape.param(&params.w_hidden),
            w_mu: tape.param(&params.w_mu),
            w_sigma: tape.param(&params.w_sigma),
            w_cls: tape.param(&params.w_cls),
        }
    }

    /// Adds the tape gradients of this pass onto the parameter gradients.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut EncoderParams) -> Result<()> {
        let pairs = [
            (self.w_hidden, &mut params.w_hidden),
            (self.w_mu, &mut params.w_mu),
            (self.w_sigma, &mut params.w_sigma),
            (self.w_cls, &mut params.w_cls),
        ];
        for (leaf, param) in pairs {
            if let Some(g) = tape.grad(leaf) {
                param.grad.add_assign_scaled(g, 1.0)?;
            }
        }
        Ok(())
    }
}

/// Tape handles of the latent Gaussian parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncodedDistribution {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// Tape handles of one reparameterized sample.
#[derive(Debug, Clone)]
pub struct SampledLatent {
    pub z: NodeId,
    pub noise: Arc<DenseMatrix>,
}

/// Value snapshot of the per-node latent Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: DenseMatrix,
    pub log_var: DenseMatrix,
}

impl LatentDistribution {
    pub fn from_tape(tape: &Tape, enc: &EncodedDistribution) -> Self {
        LatentDistribution {
            mu: tape.value(enc.mu).clone(),
            log_var: tape.value(enc.log_var).clone(),
        }
    }
}

/// Value snapshot of one latent sample; `z = mu + exp(log_var / 2) .* noise`
/// holds exactly for the stored noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: DenseMatrix,
    pub noise: DenseMatrix,
}

impl LatentSample {
    pub fn from_tape(tape: &Tape, sample: &SampledLatent) -> Self {
        LatentSample {
            z: tape.value(sample.z).clone(),
            noise: DenseMatrix::clone(&sample.noise),
        }
    }
}

/// Records the encoder forward pass and returns the latent Gaussian nodes.
pub fn encode(
    tape: &mut Tape,
    adj: &Arc<crate::graph::SparseAdjacency>,
    features: &Features,
    leaves: &ParamLeaves,
) -> Result<EncodedDistribution> {
    if adj.n() != features.rows() {
        return Err(Error::dim_mismatch(
            "encode",
            (adj.n(), adj.n()),
            (features.rows(), features.cols()),
        ));
    }
    let xw = features.matmul_on_tape(tape, leaves.w_hidden)?;
    let propagated = tape.spmm(adj, xw)?;
    let hidden = tape.relu(propagated);
    let pooled = tape.spmm(adj, hidden)?;
    let mu = tape.matmul(pooled, leaves.w_mu)?;
    let raw_log_var = tape.matmul(pooled, leaves.w_sigma)?;
    let log_var = tape.clamp(raw_log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
    Ok(EncodedDistribution { mu, log_var })
}

/// Draws one reparameterized sample using the seeded generator.
pub fn sample_latent(
    tape: &mut Tape,
    enc: &EncodedDistribution,
    rng: &mut ChaCha20Rng,
) -> Result<SampledLatent> {
    let shape = tape.value(enc.mu).shape();
    let noise = standard_normal_matrix(rng, shape.0, shape.1);
    sample_latent_with_noise(tape, enc, noise)
}

/// Reparameterized sample with caller-provided noise. Used by the gradient
/// checker, where the noise must stay frozen across loss evaluations.
pub fn sample_latent_with_noise(
    tape: &mut Tape,
    enc: &EncodedDistribution,
    noise: DenseMatrix,
) -> Result<SampledLatent> {
    if noise.shape() != tape.value(enc.mu).shape() {
        return Err(Error::dim_mismatch(
            "sample_latent",
            tape.value(enc.mu).shape(),
            noise.shape(),
        ));
    }
    let noise = Arc::new(noise);
    let half_log_var = tape.scale(enc.log_var, 0.5);
    let sigma = tape.exp(half_log_var);
    let scaled = tape.mul_const(sigma, &noise)?;
    let z = tape.add(enc.mu, scaled)?;
    Ok(SampledLatent { z, noise })
}

/// Deterministic variant: `z = mu` exactly, zero noise.
pub fn sample_latent_mean(tape: &Tape, enc: &EncodedDistribution) -> SampledLatent {
    let shape = tape.value(enc.mu).shape();
    SampledLatent {
        z: enc.mu,
        noise: Arc::new(DenseMatrix::zeros(shape.0, shape.1)),
    }
}

/// Per-node mean variance: `sigma_bar_i = mean_k exp(log_var[i, k])`.
pub fn mean_uncertainty(dist: &LatentDistribution) -> Vec<f64> {
    let d = dist.log_var.cols() as f64;
    (0..dist.log_var.rows())
        .map(|i| dist.log_var.row(i).iter().map(|&v| libm::exp(v)).sum::<f64>() / d)
        .collect()
}

/// Classifier head: `softmax_rows(z W_cls)`.
pub fn predict(tape: &mut Tape, z: NodeId, w_cls: NodeId) -> Result<NodeId> {
    let logits = tape.matmul(z, w_cls)?;
    Ok(tape.softmax_rows(logits))
}
