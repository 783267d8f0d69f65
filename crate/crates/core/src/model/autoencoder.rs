use serde::{Deserialize, Serialize};

use super::layers::{Activation, Conv2d, Dense, MaxPool, Network, Op, Trace, Upsample};
use crate::datagen::Shape;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

pub const DEFAULT_BOTTLENECK: usize = 100;

/// Topology of one convolutional auto-encoder.
///
/// Encoder: conv(`conv1_filters`, `conv1_kernel`) + relu, 2x2 max-pool,
/// conv(`conv2_filters`, `conv2_kernel`) + relu, 2x2 max-pool, dense
/// (`bottleneck_size`) + relu.
///
/// Decoder, the layer-for-layer mirror: dense + relu, 2x2 upsample,
/// conv(`conv2_filters`, `conv2_kernel`) + relu, 2x2 upsample,
/// conv(`conv1_filters`, `conv1_kernel`) + relu, then an output conv with
/// `output_kernel` and one filter per input channel, sigmoid activated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSpec {
    pub input_shape: Shape,
    pub bottleneck_size: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: [usize; 2],
    pub conv2_filters: usize,
    pub conv2_kernel: [usize; 2],
    pub output_kernel: [usize; 2],
}

impl AutoencoderSpec {
    pub fn new(input_shape: Shape, bottleneck_size: usize) -> Self {
        AutoencoderSpec {
            input_shape,
            bottleneck_size,
            conv1_filters: 16,
            conv1_kernel: [2, 2],
            conv2_filters: 32,
            conv2_kernel: [3, 3],
            output_kernel: [3, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_shape;
        if s.height < 4 || s.width < 4 || !s.height.is_multiple_of(4) || !s.width.is_multiple_of(4) {
            return Err(Error::ShapeMismatch(format!(
                "input {s} is too small for the pooling stack: height and width must be multiples of 4 and at least 4"
            )));
        }
        if s.channels == 0 || self.bottleneck_size == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 {
            return Err(Error::InvalidConfig(
                "channels, filters and bottleneck size must be positive".into(),
            ));
        }
        for k in [self.conv1_kernel, self.conv2_kernel, self.output_kernel] {
            if k[0] == 0 || k[1] == 0 {
                return Err(Error::InvalidConfig(format!("kernel {k:?} must be positive")));
            }
        }
        Ok(())
    }

    pub(crate) fn networks(&self) -> (Network, Network) {
        let Shape {
            height: h,
            width: w,
            channels: c,
        } = self.input_shape;
        let (f1, f2) = (self.conv1_filters, self.conv2_filters);
        let k = |a: [usize; 2]| (a[0], a[1]);
        let flat = f2 * (h / 4) * (w / 4);
        let conv = |in_channels, out_channels, kernel, height, width| Conv2d {
            in_channels,
            out_channels,
            kernel,
            height,
            width,
        };
        let encoder = Network::new(vec![
            Op::Conv(conv(c, f1, k(self.conv1_kernel), h, w), Activation::Relu),
            Op::Pool(MaxPool {
                channels: f1,
                height: h,
                width: w,
            }),
            Op::Conv(conv(f1, f2, k(self.conv2_kernel), h / 2, w / 2), Activation::Relu),
            Op::Pool(MaxPool {
                channels: f2,
                height: h / 2,
                width: w / 2,
            }),
            Op::Dense(
                Dense {
                    inputs: flat,
                    outputs: self.bottleneck_size,
                },
                Activation::Relu,
            ),
        ]);
        let decoder = Network::new(vec![
            Op::Dense(
                Dense {
                    inputs: self.bottleneck_size,
                    outputs: flat,
                },
                Activation::Relu,
            ),
            Op::Upsample(Upsample {
                channels: f2,
                height: h / 4,
                width: w / 4,
            }),
            Op::Conv(conv(f2, f2, k(self.conv2_kernel), h / 2, w / 2), Activation::Relu),
            Op::Upsample(Upsample {
                channels: f2,
                height: h / 2,
                width: w / 2,
            }),
            Op::Conv(conv(f2, f1, k(self.conv1_kernel), h, w), Activation::Relu),
            Op::Conv(conv(f1, c, k(self.output_kernel), h, w), Activation::Sigmoid),
        ]);
        (encoder, decoder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    spec: AutoencoderSpec,
    encoder: Network,
    decoder: Network,
    pub(crate) encoder_params: Vec<f32>,
    pub(crate) decoder_params: Vec<f32>,
}

/// Builds an auto-encoder with seeded Glorot-uniform weights.
pub fn build_autoencoder(spec: &AutoencoderSpec, seed: u64) -> Result<Autoencoder> {
    spec.validate()?;
    let (encoder, decoder) = spec.networks();
    let mut rng = seed::rng(seed, &[]);
    let encoder_params = encoder.init_params(&mut rng);
    let decoder_params = decoder.init_params(&mut rng);
    Ok(Autoencoder {
        spec: spec.clone(),
        encoder,
        decoder,
        encoder_params,
        decoder_params,
    })
}

/// Forward state kept for the backward pass of one batch.
pub(crate) struct AeTrace {
    pub encoder: Trace,
    pub decoder: Trace,
}

impl Autoencoder {
    pub(crate) fn from_parts(
        spec: AutoencoderSpec,
        encoder_params: Vec<f32>,
        decoder_params: Vec<f32>,
    ) -> Result<Self> {
        spec.validate()?;
        let (encoder, decoder) = spec.networks();
        for (what, have, want) in [
            ("encoder parameters", encoder_params.len(), encoder.num_params()),
            ("decoder parameters", decoder_params.len(), decoder.num_params()),
        ] {
            if have != want {
                return Err(Error::CountMismatch {
                    what: what.into(),
                    expected: want,
                    found: have,
                });
            }
        }
        Ok(Autoencoder {
            spec,
            encoder,
            decoder,
            encoder_params,
            decoder_params,
        })
    }

    pub fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    pub fn bottleneck_size(&self) -> usize {
        self.spec.bottleneck_size
    }

    pub fn encoder_params(&self) -> &[f32] {
        &self.encoder_params
    }

    pub fn decoder_params(&self) -> &[f32] {
        &self.decoder_params
    }

    pub fn num_params(&self) -> usize {
        self.encoder_params.len() + self.decoder_params.len()
    }

    /// Number of parametrised layers per half, `(encoder, decoder)`.
    pub fn layer_counts(&self) -> (usize, usize) {
        let count = |n: &Network| {
            n.ops()
                .iter()
                .filter(|op| matches!(op, Op::Conv(..) | Op::Dense(..)))
                .count()
        };
        (count(&self.encoder), count(&self.decoder))
    }

    fn check_batch(&self, values: usize, per_sample: usize, what: &str) -> Result<usize> {
        if per_sample == 0 || !values.is_multiple_of(per_sample) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {values} values is not a whole number of {per_sample}-value samples"
            )));
        }
        Ok(values / per_sample)
    }

    /// Maps a batch of samples (`n * input_shape.len()` values) to an
    /// `n x bottleneck_size` matrix.
    pub fn encode(&self, batch: &[f32]) -> Result<Matrix<f32>> {
        let n = self.check_batch(batch.len(), self.spec.input_shape.len(), "encode")?;
        let trace = self.encoder.forward(&self.encoder_params, batch, n);
        Matrix::from_vec(n, self.spec.bottleneck_size, trace.outputs.last().cloned().unwrap_or_default())
    }

    /// Maps bottleneck rows back to reconstructions in `(0, 1)`.
    pub fn decode(&self, bottleneck: &Matrix<f32>) -> Result<Vec<f32>> {
        if bottleneck.cols() != self.spec.bottleneck_size {
            return Err(Error::ShapeMismatch(format!(
                "decode: expected width {}, got {}",
                self.spec.bottleneck_size,
                bottleneck.cols()
            )));
        }
        let trace = self
            .decoder
            .forward(&self.decoder_params, bottleneck.as_slice(), bottleneck.rows());
        Ok(trace.outputs.last().cloned().unwrap_or_default())
    }

    pub(crate) fn forward_traced(&self, batch: &[f32], n: usize) -> AeTrace {
        let encoder = self.encoder.forward(&self.encoder_params, batch, n);
        let decoder = self.decoder.forward(&self.decoder_params, encoder.last(), n);
        AeTrace { encoder, decoder }
    }

    /// Backward pass for one batch. `recon_logit_grad` is the gradient w.r.t.
    /// the pre-sigmoid output; `bottleneck_grad` is an extra gradient applied
    /// directly at the bottleneck (after the relu).
    pub(crate) fn backward(
        &self,
        batch: &[f32],
        trace: &AeTrace,
        recon_logit_grad: Vec<f32>,
        bottleneck_grad: Option<&[f32]>,
        grad_encoder: &mut [f32],
        grad_decoder: &mut [f32],
    ) {
        let mut g = self
            .decoder
            .backward(
                &self.decoder_params,
                trace.encoder.last(),
                &trace.decoder,
                recon_logit_grad,
                true,
                grad_decoder,
                true,
            )
            .expect("input gradient requested");
        if let Some(extra) = bottleneck_grad {
            g.iter_mut().zip(extra).for_each(|(a, &b)| *a += b);
        }
        self.encoder.backward(
            &self.encoder_params,
            batch,
            &trace.encoder,
            g,
            false,
            grad_encoder,
            false,
        );
    }
}
