//! Encoder + interaction stack + classifier.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scope, Tape, Var};
use crate::block::{FeatureSet, TapeFeatures};
use crate::error::{Error, Result};
use crate::ia::{classify, ia_forward_traced, valid_rows, BoundStack, Classifier, IaConfig, IaStack, StackOutput};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::NUM_CLASSES;

/// Shared linear instance encoder, standing in for a clip backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Encoder<T> {
    /// `gain` times an orthogonal matrix (orthonormal rows or columns,
    /// whichever is shorter) and zero bias.
    pub fn init(d_in: usize, d: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = orthogonal(d_in, d, rng).into_iter().map(|x| T::lit(gain * x)).collect();
        Self {
            weights: Tensor::new(vec![d_in, d], data).expect("d_in·d").with_grad(),
            bias: Tensor::zeros(&[d]).with_grad(),
        }
    }
}

/// Row-major `rows × cols` matrix from Gram-Schmidt on Gaussian vectors.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, len) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (k, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            let (r, c) = if rows <= cols { (k, j) } else { (j, k) };
            out[r * cols + c] = x;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub ia: IaConfig,
    /// Persons kept per clip in memory (K).
    pub capacity: usize,
    /// Scale of the orthogonal encoder initialisation.
    #[serde(default = "default_encoder_gain")]
    pub encoder_gain: f64,
}

fn default_encoder_gain() -> f64 {
    6.0
}

impl ModelConfig {
    /// Serial P→O→M stack repeated twice, with the default encoder gain.
    pub fn standard(d_in: usize, d: usize, capacity: usize) -> Self {
        Self {
            d_in,
            ia: IaConfig::default_for(d),
            capacity,
            encoder_gain: default_encoder_gain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ia.validate()?;
        if self.d_in == 0 || self.capacity == 0 {
            return Err(Error::Config("d_in and capacity must be positive".into()));
        }
        if !(self.encoder_gain > 0.0) || !self.encoder_gain.is_finite() {
            return Err(Error::Config(format!("encoder_gain must be positive, got {}", self.encoder_gain)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub stack: IaStack<T>,
    pub head: Classifier<T>,
}

/// Tape handles for a whole model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: (Var, Var),
    pub stack: BoundStack,
    pub head: (Var, Var),
}

impl BoundModel {
    /// Handles in [`Model::named_params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.encoder.0, self.encoder.1];
        v.extend(self.stack.vars());
        v.extend([self.head.0, self.head.1]);
        v
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(config.d_in, config.ia.d, config.encoder_gain, &mut rng);
        let stack = IaStack::build(&config.ia, rng.gen())?;
        let head = Classifier::init(config.ia.d, NUM_CLASSES, rng.gen());
        Ok(Self {
            config,
            encoder,
            stack,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.ia.d
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("encoder.w".to_string(), &self.encoder.weights),
            ("encoder.b".to_string(), &self.encoder.bias),
        ];
        out.extend(self.stack.named_params().into_iter().map(|(n, t)| (format!("ia.{n}"), t)));
        out.extend(self.head.named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("encoder.w".to_string(), &mut self.encoder.weights),
            ("encoder.b".to_string(), &mut self.encoder.bias),
        ];
        out.extend(self.stack.named_params_mut().into_iter().map(|(n, t)| (format!("ia.{n}"), t)));
        out.extend(self.head.named_params_mut());
        out
    }

    pub fn bind(&self, tape: &Tape<T>) -> BoundModel {
        let encoder = tape.with_scope(Scope::Encoder, || (tape.param(&self.encoder.weights), tape.param(&self.encoder.bias)));
        BoundModel {
            encoder,
            stack: self.stack.bind(tape),
            head: self.head.bind(tape),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Encodes one clip's persons and objects in a single encoder pass.
pub fn encode_clip<T: Scalar>(
    tape: &Tape<T>,
    model: &BoundModel,
    persons: &Tensor<T>,
    objects: &Tensor<T>,
) -> Result<(TapeFeatures, TapeFeatures)> {
    tape.with_scope(Scope::Encoder, || {
        let (np, no) = (persons.rows(), objects.rows());
        let raw = if no == 0 {
            persons.clone()
        } else {
            let mut data = persons.data().to_vec();
            data.extend_from_slice(objects.data());
            Tensor::new(vec![np + no, persons.cols()], data)?
        };
        let x = tape.constant(raw);
        let encoded = tape.add_row(tape.matmul(x, model.encoder.0)?, model.encoder.1)?;
        let p = if no == 0 {
            encoded
        } else {
            tape.select_rows(encoded, &(0..np).collect::<Vec<_>>())?
        };
        let o = tape.select_rows(encoded, &(np..np + no).collect::<Vec<_>>())?;
        Ok((
            TapeFeatures {
                var: p,
                mask: vec![true; np],
            },
            TapeFeatures {
                var: o,
                mask: vec![true; no],
            },
        ))
    })
}

/// Encoded person features of a clip, off-tape.
pub fn encode_persons<T: Scalar>(model: &Model<T>, persons: &Tensor<T>) -> Result<FeatureSet<T>> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let (p, _) = encode_clip(&tape, &bound, persons, &Tensor::zeros(&[0, persons.cols()]))?;
    Ok(p.to_feature_set(&tape))
}

/// Interaction stack and classifier on already encoded inputs.
/// Returns logits for the valid persons together with the stack trace.
pub fn head_forward<T: Scalar>(
    tape: &Tape<T>,
    model: &BoundModel,
    persons: &TapeFeatures,
    objects: &TapeFeatures,
    memory: &TapeFeatures,
) -> Result<(Var, StackOutput)> {
    let out = ia_forward_traced(tape, &model.stack, persons, objects, memory)?;
    let actions = valid_rows(tape, &out.features)?;
    let logits = classify(tape, model.head, actions)?;
    Ok((logits, out))
}
