use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, ConvCache, PoolCache};
use crate::error::{DgdmError, Result};
use crate::layer::{self, Dgdm, DgdmConfig, ForwardTrace};
use crate::tensor::FeatureMap;

/// One VGG-style stage: `convs` 3x3 conv + ReLU pairs of width `channels`,
/// optionally followed by 2x2 max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
    pub downsample: bool,
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.channels, self.convs)?;
        if self.downsample {
            f.write_str("p")?;
        }
        Ok(())
    }
}

impl FromStr for StageSpec {
    type Err = String;

    /// `16x2p` is two 16-wide convolutions followed by pooling.
    fn from_str(s: &str) -> Result<Self, String> {
        let (body, downsample) = match s.strip_suffix('p') {
            Some(b) => (b, true),
            None => (s, false),
        };
        let (ch, n) = body
            .split_once('x')
            .ok_or_else(|| format!("stage `{s}` is not of the form <channels>x<convs>[p]"))?;
        let channels = ch
            .parse()
            .map_err(|_| format!("bad channel count in `{s}`"))?;
        let convs = n.parse().map_err(|_| format!("bad conv count in `{s}`"))?;
        Ok(StageSpec {
            channels,
            convs,
            downsample,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    /// Subtracted from every input pixel before the first convolution.
    pub input_mean: f64,
    pub stages: Vec<StageSpec>,
    /// Stage indices whose output passes through DGDM.
    pub dgdm_insertion_points: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneSpec {
    /// Three-stage VGG-GAP toy backbone with DGDM after the last two stages.
    pub fn toy(num_classes: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            input_mean: 0.5,
            stages: vec![
                StageSpec {
                    channels: 8,
                    convs: 1,
                    downsample: true,
                },
                StageSpec {
                    channels: 16,
                    convs: 1,
                    downsample: true,
                },
                StageSpec {
                    channels: 32,
                    convs: 2,
                    downsample: false,
                },
            ],
            dgdm_insertion_points: vec![1, 2],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input_mean.is_finite() {
            return Err(DgdmError::config("model.input_mean", "must be finite"));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(DgdmError::config(
                "model",
                "input channels and class count must be positive",
            ));
        }
        if self.stages.is_empty() {
            return Err(DgdmError::config(
                "model.stages",
                "at least one stage is required",
            ));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.convs == 0) {
            return Err(DgdmError::config(
                "model.stages",
                "every stage needs at least one conv of positive width",
            ));
        }
        if let Some(&p) = self
            .dgdm_insertion_points
            .iter()
            .find(|&&p| p >= self.stages.len())
        {
            return Err(DgdmError::config(
                "model.insertion_points",
                format!("stage {p} does not exist ({} stages)", self.stages.len()),
            ));
        }
        Ok(())
    }

    /// Shape `(channels, height, width)` of the final feature map.
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let (mut h, mut w) = (height, width);
        for s in &self.stages {
            if s.downsample {
                h /= 2;
                w /= 2;
            }
        }
        (
            self.stages.last().map_or(self.in_channels, |s| s.channels),
            h,
            w,
        )
    }

    pub fn final_channels(&self) -> usize {
        self.output_shape(1, 1).0
    }

    pub fn stages_string(&self) -> String {
        self.stages
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `(out_channels, in_channels * 9)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// All trainable parameters, also used to hold their gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub convs: Vec<ConvParams>,
    /// `(num_classes, final_channels)`
    pub fc_weight: Array2<f64>,
    pub fc_bias: Array1<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            convs: other
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: Array2::zeros(c.weight.dim()),
                    bias: Array1::zeros(c.bias.dim()),
                })
                .collect(),
            fc_weight: Array2::zeros(other.fc_weight.dim()),
            fc_bias: Array1::zeros(other.fc_bias.dim()),
        }
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Flat views in a fixed order: conv weights and biases, then the classifier.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.convs.len() * 2 + 2);
        for c in &self.convs {
            out.push(c.weight.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        out.push(self.fc_weight.as_slice().expect("standard layout"));
        out.push(self.fc_bias.as_slice().expect("standard layout"));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.convs.len() * 2 + 2);
        for c in &mut self.convs {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.fc_weight.as_slice_mut().expect("standard layout"));
        out.push(self.fc_bias.as_slice_mut().expect("standard layout"));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    /// Index into `Params::convs`; always followed by ReLU.
    Conv(usize),
    Pool,
    Dgdm,
}

/// How DGDM layers behave during a forward pass.
pub enum DgdmMode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
    /// Reuse the traces of an earlier training forward, in insertion order.
    Replay(&'a [ForwardTrace]),
}

#[allow(clippy::large_enum_variant)]
enum Cache {
    Conv(ConvCache, Array4<f64>),
    Pool(PoolCache),
    Dgdm(FeatureMap, Option<ForwardTrace>),
}

/// Output of a forward pass.
pub struct Forward {
    pub logits: Array2<f64>,
    /// Final feature map before global average pooling.
    pub features: Array4<f64>,
    /// DGDM traces in insertion order; empty at evaluation.
    pub traces: Vec<ForwardTrace>,
    caches: Vec<Cache>,
    pooled: Array2<f64>,
}

/// Gradients and statistics of one mini-batch.
pub struct BatchGrad {
    pub loss: f64,
    pub correct: usize,
    pub grads: Params,
    pub traces: Vec<ForwardTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: BackboneSpec,
    dgdm_cfg: DgdmConfig,
    dgdm: Dgdm,
    ops: Vec<Op>,
    pub params: Params,
}

/// Builds a model with He-initialised parameters drawn from `seed`.
pub fn build_model(spec: &BackboneSpec, dgdm_cfg: &DgdmConfig, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut cin = spec.in_channels;
    for stage in &spec.stages {
        for _ in 0..stage.convs {
            let fan_in = cin * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            convs.push(ConvParams {
                weight: Array2::from_shape_simple_fn((stage.channels, fan_in), || {
                    normal.sample(&mut rng)
                }),
                bias: Array1::zeros(stage.channels),
            });
            cin = stage.channels;
        }
    }
    let normal = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("positive std");
    let fc_weight =
        Array2::from_shape_simple_fn((spec.num_classes, cin), || normal.sample(&mut rng));
    let params = Params {
        convs,
        fc_weight,
        fc_bias: Array1::zeros(spec.num_classes),
    };
    Model::from_parts(spec.clone(), *dgdm_cfg, params)
}

impl Model {
    /// Assembles a model from existing parameters, checking their shapes.
    pub fn from_parts(spec: BackboneSpec, dgdm_cfg: DgdmConfig, params: Params) -> Result<Model> {
        spec.validate()?;
        let dgdm = Dgdm::new(dgdm_cfg)?;
        let mut ops = Vec::new();
        let mut cin = spec.in_channels;
        let mut conv = 0;
        for (si, stage) in spec.stages.iter().enumerate() {
            for _ in 0..stage.convs {
                let p = params.convs.get(conv).ok_or_else(|| {
                    DgdmError::Checkpoint(format!("missing parameters for conv {conv}"))
                })?;
                if p.weight.dim() != (stage.channels, cin * 9) || p.bias.len() != stage.channels {
                    return Err(DgdmError::Checkpoint(format!(
                        "conv {conv} has shape {:?}, expected {:?}",
                        p.weight.dim(),
                        (stage.channels, cin * 9)
                    )));
                }
                ops.push(Op::Conv(conv));
                conv += 1;
                cin = stage.channels;
            }
            if stage.downsample {
                ops.push(Op::Pool);
            }
            if spec.dgdm_insertion_points.contains(&si) {
                ops.push(Op::Dgdm);
            }
        }
        if params.convs.len() != conv
            || params.fc_weight.dim() != (spec.num_classes, cin)
            || params.fc_bias.len() != spec.num_classes
        {
            return Err(DgdmError::Checkpoint(
                "parameter shapes do not match the backbone".into(),
            ));
        }
        Ok(Model {
            spec,
            dgdm_cfg,
            dgdm,
            ops,
            params,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn dgdm_config(&self) -> &DgdmConfig {
        &self.dgdm_cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, images: &Array4<f64>, mut mode: DgdmMode<'_>) -> Result<Forward> {
        let (_, c, h, w) = images.dim();
        if c != self.spec.in_channels || h == 0 || w == 0 {
            return Err(DgdmError::ShapeMismatch {
                expected: vec![self.spec.in_channels],
                actual: images.shape().to_vec(),
            });
        }
        let mut x = images.mapv(|v| v - self.spec.input_mean);
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut traces = Vec::new();
        let mut dgdm_index = 0;
        for op in &self.ops {
            match *op {
                Op::Conv(i) => {
                    let p = &self.params.convs[i];
                    let (mut y, cache) = ops::conv3x3_forward(&x, &p.weight, &p.bias);
                    ops::relu_inplace(&mut y);
                    caches.push(Cache::Conv(cache, y.clone()));
                    x = y;
                }
                Op::Pool => {
                    if x.dim().2 < 2 || x.dim().3 < 2 {
                        return Err(DgdmError::InvalidArgument(format!(
                            "input too small to pool a {}x{} map",
                            x.dim().2,
                            x.dim().3
                        )));
                    }
                    let (y, cache) = ops::maxpool2_forward(&x);
                    caches.push(Cache::Pool(cache));
                    x = y;
                }
                Op::Dgdm => {
                    let input = FeatureMap::new(x)?;
                    let (out, trace) = match &mut mode {
                        DgdmMode::Eval => (self.dgdm.forward_eval(&input), None),
                        DgdmMode::Train(rng) => {
                            let (out, trace) = self.dgdm.forward_train(&input, &mut **rng)?;
                            (out, Some(trace))
                        }
                        DgdmMode::Replay(saved) => {
                            let trace = saved.get(dgdm_index).ok_or_else(|| {
                                DgdmError::InvalidArgument("too few traces to replay".into())
                            })?;
                            (layer::forward_frozen(&input, trace)?, Some(trace.clone()))
                        }
                    };
                    dgdm_index += 1;
                    if let Some(t) = &trace {
                        traces.push(t.clone());
                    }
                    caches.push(Cache::Dgdm(input, trace));
                    x = out.into_inner();
                }
            }
        }
        let pooled = ops::gap_forward(&x);
        let mut logits = pooled.dot(&self.params.fc_weight.t());
        logits += &self.params.fc_bias;
        Ok(Forward {
            logits,
            features: x,
            traces,
            caches,
            pooled,
        })
    }

    /// Evaluation forward: class scores plus the final feature maps for CAM.
    pub fn predict(&self, images: &Array4<f64>) -> Result<Forward> {
        self.forward(images, DgdmMode::Eval)
    }

    /// Mean cross-entropy loss and parameter gradients for one mini-batch.
    pub fn loss_and_grad(
        &self,
        images: &Array4<f64>,
        labels: &[usize],
        mode: DgdmMode<'_>,
    ) -> Result<BatchGrad> {
        if labels.len() != images.dim().0 {
            return Err(DgdmError::ShapeMismatch {
                expected: vec![images.dim().0],
                actual: vec![labels.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.spec.num_classes) {
            return Err(DgdmError::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        let fwd = self.forward(images, mode)?;
        let (loss, grad_logits) = ops::cross_entropy(&fwd.logits, labels);
        let correct = argmax_rows(&fwd.logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();

        let mut grads = Params::zeros_like(&self.params);
        grads.fc_weight = grad_logits.t().dot(&fwd.pooled);
        grads.fc_bias = grad_logits.sum_axis(Axis(0));
        let grad_pooled = grad_logits.dot(&self.params.fc_weight);
        let (_, _, fh, fw) = fwd.features.dim();
        let mut g = ops::gap_backward(&grad_pooled, fh, fw);

        for (op, cache) in self.ops.iter().zip(&fwd.caches).rev() {
            g = match (op, cache) {
                (Op::Conv(i), Cache::Conv(conv_cache, y)) => {
                    ops::relu_backward(&mut g, y);
                    let (gx, gw, gb) =
                        ops::conv3x3_backward(&g, conv_cache, &self.params.convs[*i].weight);
                    grads.convs[*i] = ConvParams {
                        weight: gw,
                        bias: gb,
                    };
                    gx
                }
                (Op::Pool, Cache::Pool(pool_cache)) => ops::maxpool2_backward(&g, pool_cache),
                (Op::Dgdm, Cache::Dgdm(input, trace)) => match trace {
                    Some(t) => layer::backward(input, t, &g)?,
                    None => g,
                },
                _ => unreachable!("cache order follows op order"),
            };
        }
        Ok(BatchGrad {
            loss,
            correct,
            grads,
            traces: fwd.traces,
        })
    }
}

pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Convenience for tests and demos: a random batch in `[0, 1)`.
pub fn random_images<R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize, usize, usize),
) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::softmax;

    #[test]
    fn toy_spec_output_shape() {
        let spec = BackboneSpec {
            stages: vec![
                StageSpec {
                    channels: 8,
                    convs: 1,
                    downsample: true,
                },
                StageSpec {
                    channels: 16,
                    convs: 1,
                    downsample: true,
                },
                StageSpec {
                    channels: 32,
                    convs: 1,
                    downsample: true,
                },
            ],
            ..BackboneSpec::toy(3)
        };
        assert_eq!(spec.output_shape(64, 64), (32, 8, 8));
        let model = build_model(&spec, &DgdmConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_images(&mut rng, (2, 3, 64, 64));
        let fwd = model.predict(&x).unwrap();
        assert_eq!(fwd.features.dim(), (2, 32, 8, 8));
        assert_eq!(fwd.logits.dim(), (2, 3));
    }

    #[test]
    fn insertion_points_must_exist() {
        let mut spec = BackboneSpec::toy(3);
        spec.dgdm_insertion_points = vec![3];
        assert!(build_model(&spec, &DgdmConfig::default(), 0).is_err());
    }

    #[test]
    fn dgdm_adds_no_parameters() {
        let with = BackboneSpec::toy(4);
        let without = BackboneSpec {
            dgdm_insertion_points: vec![],
            ..with.clone()
        };
        let a = build_model(&with, &DgdmConfig::default(), 5).unwrap();
        let b = build_model(&without, &DgdmConfig::default(), 5).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn no_insertion_points_train_equals_eval() {
        let spec = BackboneSpec {
            dgdm_insertion_points: vec![],
            ..BackboneSpec::toy(3)
        };
        let model = build_model(&spec, &DgdmConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_images(&mut rng, (2, 3, 16, 16));
        let eval = model.predict(&x).unwrap().logits;
        let train = model.forward(&x, DgdmMode::Train(&mut rng)).unwrap().logits;
        assert_eq!(eval, train);
    }

    #[test]
    fn predict_contract() {
        let model = build_model(&BackboneSpec::toy(3), &DgdmConfig::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = random_images(&mut rng, (1, 3, 32, 32));
        let fwd = model.predict(&one).unwrap();
        assert_eq!(fwd.logits.dim(), (1, 3));

        let mut dup = Array4::zeros((2, 3, 32, 32));
        dup.index_axis_mut(Axis(0), 0)
            .assign(&one.index_axis(Axis(0), 0));
        dup.index_axis_mut(Axis(0), 1)
            .assign(&one.index_axis(Axis(0), 0));
        let scores = model.predict(&dup).unwrap().logits;
        assert_eq!(scores.row(0), scores.row(1));
        for row in softmax(&scores).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }

        assert!(model.predict(&Array4::zeros((1, 1, 32, 32))).is_err());
    }

    #[test]
    fn stage_spec_round_trip() {
        for s in ["8x1p", "32x2"] {
            assert_eq!(s.parse::<StageSpec>().unwrap().to_string(), s);
        }
        assert!("8-1".parse::<StageSpec>().is_err());
    }
}
