use crate::error::{Error, Result};
use crate::numerics::{embedding_table, Activation, Layer, Network, Tape, Tensor};
use crate::rng::Rng;

/// Anything that predicts the forward-process noise from `(x_t, t, c)`.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;

    /// Row-wise predictions for `xs` (`n x data_dim`) at per-row steps and classes.
    fn predict(&self, xs: &[f64], ts: &[usize], classes: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpsNetSpec {
    pub data_dim: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub steps: usize,
}

/// MLP noise predictor over `x_t ⊕ embed(t) ⊕ one_hot(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsNet {
    pub spec: EpsNetSpec,
    pub net: Network,
    embeds: Vec<Vec<f64>>,
}

impl EpsNet {
    pub fn layers(spec: &EpsNetSpec) -> Vec<Layer> {
        let input = spec.data_dim + spec.embed_dim + spec.classes;
        vec![
            Layer::Dense { inputs: input, outputs: spec.hidden },
            Layer::Act(Activation::Tanh),
            Layer::Dense { inputs: spec.hidden, outputs: spec.hidden },
            Layer::Act(Activation::Tanh),
            Layer::Dense { inputs: spec.hidden, outputs: spec.data_dim },
        ]
    }

    pub fn new(spec: EpsNetSpec, rng: &mut Rng) -> Result<Self> {
        let net = Network::init(Self::layers(&spec), rng)?;
        Self::from_network(spec, net)
    }

    pub fn zeros(spec: EpsNetSpec) -> Result<Self> {
        Self::from_network(spec, Network::zeros(Self::layers(&spec))?)
    }

    pub fn from_network(spec: EpsNetSpec, net: Network) -> Result<Self> {
        if net.layers() != Self::layers(&spec).as_slice() {
            return Err(Error::usage("network architecture does not match the noise-predictor shape"));
        }
        let embeds = embedding_table(spec.embed_dim, spec.steps)?;
        Ok(EpsNet { spec, net, embeds })
    }

    pub fn input(&self, xs: &[f64], ts: &[usize], classes: &[usize]) -> Result<Tensor> {
        let d = self.spec.data_dim;
        let n = ts.len();
        if xs.len() != n * d || classes.len() != n {
            return Err(Error::shape("noise predictor batch", n * d, xs.len()));
        }
        let width = d + self.spec.embed_dim + self.spec.classes;
        let mut data = vec![0.0; n * width];
        for (i, row) in data.chunks_exact_mut(width).enumerate() {
            let (t, c) = (ts[i], classes[i]);
            if t > self.spec.steps {
                return Err(Error::usage(format!("step {t} outside 0..={}", self.spec.steps)));
            }
            if c >= self.spec.classes {
                return Err(Error::usage(format!("class {c} outside 0..{}", self.spec.classes)));
            }
            row[..d].copy_from_slice(&xs[i * d..(i + 1) * d]);
            row[d..d + self.spec.embed_dim].copy_from_slice(&self.embeds[t]);
            row[d + self.spec.embed_dim + c] = 1.0;
        }
        Ok(Tensor::from_parts_unchecked(vec![n, width], data))
    }

    pub fn predict_tape(&self, xs: &[f64], ts: &[usize], classes: &[usize]) -> Result<(Tensor, Tape)> {
        let input = self.input(xs, ts, classes)?;
        let tape = self.net.forward_tape(&input, None)?;
        Ok((input, tape))
    }
}

impl NoisePredictor for EpsNet {
    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn predict(&self, xs: &[f64], ts: &[usize], classes: &[usize]) -> Result<Vec<f64>> {
        let input = self.input(xs, ts, classes)?;
        Ok(self.net.forward(&input, None)?.into_data())
    }
}

/// Predicts zero noise everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ZeroPredictor(pub usize);

impl NoisePredictor for ZeroPredictor {
    fn data_dim(&self) -> usize {
        self.0
    }

    fn predict(&self, xs: &[f64], _ts: &[usize], _classes: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![0.0; xs.len()])
    }
}
