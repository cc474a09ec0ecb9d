//! Fully connected rectifier networks used as teacher and student.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layer widths from input dimension to class count, plus the init seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = Self { layer_widths, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "an MLP needs at least two non-zero widths, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Parameter shapes in storage order: weight `in × out`, then bias `out`,
    /// for each layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }
}

/// Network parameters, stored as `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    spec: MlpSpec,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> MlpParams<T> {
    /// He-normal weights (variance `2 / fan_in`) and zero biases.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(spec.seed);
        let mut tensors = Vec::new();
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z * std)
                })
                .collect();
            tensors.push(Tensor::new(vec![fan_in, fan_out], data)?);
            tensors.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            spec: spec.clone(),
            tensors,
        })
    }

    /// Wraps existing tensors, checking them against the `MlpSpec` shape table.
    pub fn from_tensors(spec: &MlpSpec, tensors: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes();
        let got: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        if expected != got {
            return Err(Error::ShapeTable(format!("expected {:?}, got {:?}", expected, got)));
        }
        Ok(Self {
            spec: spec.clone(),
            tensors,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Records the parameters on a tape as trainable leaves.
    pub fn attach<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Records the parameters on a tape as constants.
    pub fn attach_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Logits without recording anything.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let layers = self.tensors.len() / 2;
        let mut h = x.clone();
        for (l, pair) in self.tensors.chunks(2).enumerate() {
            h = h.matmul(&pair[0])?.add_row_broadcast(&pair[1])?;
            if l + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.spec.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("input {:?} for input width {}", shape, self.spec.input_dim()),
            });
        }
        Ok(())
    }

    /// Affine/rectifier chain on the tape, ending with an affine layer.
    pub fn forward<'t>(&self, params: &[Var<'t, T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        if params.len() != self.tensors.len() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("{} parameter vars for {} tensors", params.len(), self.tensors.len()),
            });
        }
        let layers = params.len() / 2;
        let mut h = x;
        for (l, pair) in params.chunks(2).enumerate() {
            h = h.matmul(pair[0])?.add_bias(pair[1])?;
            if l + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// FNV-1a over the raw bytes of every parameter; used to detect changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for &x in t.data() {
                for b in x.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}
