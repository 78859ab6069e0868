use crate::autodiff::{BatchNormStats, Graph, Mode, Tensor, Var};
use crate::error::{Error, Result};

/// A frozen feed-forward layer, as seen by relevance propagation.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Input normalization in eval mode.
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Conv1d {
        w: Tensor,
        b: Tensor,
    },
    Elu,
    Relu,
    MaxPool2,
    GlobalAvgPool,
    /// `[B, L, C] -> [B, L * C]`
    Flatten,
    Dense {
        w: Tensor,
        b: Tensor,
    },
}

/// A chain of frozen layers mapping `[B, L, C]` windows to `[B, K]` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub input_length: usize,
    pub channels: usize,
    pub layers: Vec<Layer>,
}

impl Sequential {
    /// Pre-softmax scores, with weights entering the graph as constants.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let n = gamma.len();
                    let gm = g.constant(Tensor::new([n], gamma.clone())?);
                    let bt = g.constant(Tensor::new([n], beta.clone())?);
                    let mut stats = BatchNormStats {
                        mean: mean.clone(),
                        var: var.clone(),
                        momentum: 0.9,
                    };
                    g.batch_norm(h, gm, bt, &mut stats, Mode::Eval)?
                }
                Layer::Conv1d { w, b } => {
                    let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                    g.conv1d(h, w, b)?
                }
                Layer::Elu => g.elu(h),
                Layer::Relu => g.relu(h),
                Layer::MaxPool2 => g.max_pool2(h)?,
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Flatten => {
                    let s = g.shape(h).to_vec();
                    if s.len() != 3 {
                        return Err(Error::Shape(format!("flatten expects [B, L, C], got {s:?}")));
                    }
                    g.reshape(h, &[s[0], s[1] * s[2]])?
                }
                Layer::Dense { w, b } => {
                    let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
                    g.linear(h, w, Some(b))?
                }
            };
        }
        Ok(h)
    }

    /// Scores for a batch `[B, L, C]`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn uses_relu_only(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, Layer::Elu))
    }
}
