//! Convolutional feature extractor: stack specs, exact frame geometry, and
//! the bandwidth-adaptation surgeries (stride halving, fractional stride,
//! kernel folding).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer stride or the rational 5/2 case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Stride {
    Int(usize),
    Frac { num: usize, den: usize },
}

impl Stride {
    /// First input index read by output position `t`.
    pub fn start(self, t: usize) -> usize {
        match self {
            Stride::Int(s) => s * t,
            Stride::Frac { num, den } => num * t / den,
        }
    }

    fn as_ratio(self) -> (u64, u64) {
        match self {
            Stride::Int(s) => (s as u64, 1),
            Stride::Frac { num, den } => (num as u64, den as u64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: Stride,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default = "yes")]
    pub has_layer_norm: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStackSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub sample_rate: u32,
}

impl ConvStackSpec {
    /// The reference 7-layer geometry (kernels 10,3,3,3,3,2,2; strides
    /// 5,2,2,2,2,2,2) at 16 kHz with a uniform toy channel count.
    pub fn base_16k(channels: usize) -> Self {
        let kernels = [10usize, 3, 3, 3, 3, 2, 2];
        let strides = [5usize, 2, 2, 2, 2, 2, 2];
        let layers = kernels
            .iter()
            .zip(strides.iter())
            .enumerate()
            .map(|(i, (&kernel, &stride))| ConvLayerSpec {
                in_channels: if i == 0 { 1 } else { channels },
                out_channels: channels,
                kernel,
                stride: Stride::Int(stride),
                dilation: 1,
                has_layer_norm: true,
            })
            .collect();
        ConvStackSpec { layers, sample_rate: 16000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("empty conv stack".into()));
        }
        let mut prev_out = self.layers[0].in_channels;
        if prev_out == 0 {
            return Err(Error::InvalidArgument("zero input channels".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels != prev_out {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} input channels but receives {prev_out}",
                    l.in_channels
                )));
            }
            if l.kernel == 0 || l.out_channels == 0 || l.dilation == 0 {
                return Err(Error::InvalidArgument(format!("layer {i} has a zero extent")));
            }
            match l.stride {
                Stride::Int(s) if s >= 1 => {}
                Stride::Frac { num, den } if num > den && den >= 1 => {
                    if i != 0 {
                        return Err(Error::InvalidArgument(format!(
                            "fractional stride only allowed on the first layer, found on layer {i}"
                        )));
                    }
                    if l.dilation != 1 {
                        return Err(Error::InvalidArgument(
                            "fractional layers use unit-spaced taps (dilation 1)".into(),
                        ));
                    }
                }
                _ => {
                    return Err(Error::InvalidArgument(format!("layer {i} has an invalid stride")));
                }
            }
            prev_out = l.out_channels;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }
}

/// Exact timing of the extractor's output frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub sample_rate: u32,
    pub frame_shift_ms: f64,
    pub receptive_field_samples: usize,
    pub receptive_field_ms: f64,
    layers: Vec<(usize, Stride, usize)>, // kernel, stride, dilation
}

impl FrameGeometry {
    /// Number of output frames for an input of `len` samples.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let mut n = len;
        for &(kernel, stride, dilation) in &self.layers {
            n = match stride {
                Stride::Int(s) => ops::conv1d_out_len(n, kernel, s, dilation)?,
                Stride::Frac { num, den } => ops::fractional_out_len(n, kernel, num, den)?,
            };
        }
        Ok(n)
    }

    /// Raw-sample index where frame `t`'s receptive field starts.
    pub fn start_index(&self, t: usize) -> usize {
        let mut u = t;
        for &(_, stride, _) in self.layers.iter().rev() {
            u = stride.start(u);
        }
        u
    }
}

/// Closed-form frame shift and receptive field for a stack.
///
/// Receptive field is RF = 1 + sum_i d_i (K_i - 1) prod_{j<i} s_j with the
/// fractional layer contributing num/den to downstream stride products;
/// for fractional stacks this is the even-aligned frame's extent.
pub fn geometry(stack: &ConvStackSpec) -> Result<FrameGeometry> {
    stack.validate()?;
    let mut prod_num: u64 = 1;
    let mut prod_den: u64 = 1;
    let mut rf_num: u64 = 1;
    for l in &stack.layers {
        // non-integer contributions (fractional stacks) round down, which
        // matches the even-aligned frame extent
        let term = l.dilation as u64 * (l.kernel as u64 - 1) * prod_num;
        rf_num += term / prod_den;
        let (n, d) = l.stride.as_ratio();
        prod_num *= n;
        prod_den *= d;
        let g = gcd(prod_num, prod_den);
        prod_num /= g;
        prod_den /= g;
    }
    let rate = stack.sample_rate as u64;
    let frame_shift_ms = (prod_num * 1000) as f64 / (prod_den * rate) as f64;
    let receptive_field_samples = rf_num as usize;
    let receptive_field_ms = (rf_num * 1000) as f64 / rate as f64;
    Ok(FrameGeometry {
        sample_rate: stack.sample_rate,
        frame_shift_ms,
        receptive_field_samples,
        receptive_field_ms,
        layers: stack.layers.iter().map(|l| (l.kernel, l.stride, l.dilation)).collect(),
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------
// Surgery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetLayer {
    First,
    Last,
    #[serde(untagged)]
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurgeryMethod {
    /// Stride 5 -> 5/2 on the first layer.
    FractionalFirst,
    /// Stride s -> s/2 on any even-stride layer; weights untouched.
    HalveEven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrideSurgeryPlan {
    pub target: TargetLayer,
    pub method: SurgeryMethod,
    #[serde(default)]
    pub fold_kernel: bool,
}

impl StrideSurgeryPlan {
    pub fn describe(&self) -> String {
        let target = match self.target {
            TargetLayer::First => "first".to_string(),
            TargetLayer::Last => "last".to_string(),
            TargetLayer::Index(i) => format!("layer{i}"),
        };
        let method = match self.method {
            SurgeryMethod::FractionalFirst => "fractional-first",
            SurgeryMethod::HalveEven => "halve-even",
        };
        if self.fold_kernel {
            format!("adapt_bandwidth {method}@{target}+fold")
        } else {
            format!("adapt_bandwidth {method}@{target}")
        }
    }

    pub fn resolve_target(&self, stack: &ConvStackSpec) -> Result<usize> {
        let i = match self.target {
            TargetLayer::First => 0,
            TargetLayer::Last => stack.layers.len() - 1,
            TargetLayer::Index(i) => i,
        };
        if i >= stack.layers.len() {
            return Err(Error::Surgery(format!(
                "target layer {i} out of range for a {}-layer stack",
                stack.layers.len()
            )));
        }
        Ok(i)
    }
}

/// Spec-level half of `adapt_bandwidth`: retime the stack for 8 kHz input.
/// The caller folds layer-0 weights separately when the plan asks for it.
pub fn adapt_stack_spec(stack: &ConvStackSpec, plan: &StrideSurgeryPlan) -> Result<ConvStackSpec> {
    if stack.sample_rate == 8000 {
        return Err(Error::Surgery(
            "stack sample_rate is already 8000 Hz; bandwidth adaptation already applied".into(),
        ));
    }
    let i = plan.resolve_target(stack)?;
    let mut out = stack.clone();
    match plan.method {
        SurgeryMethod::HalveEven => {
            if plan.fold_kernel {
                return Err(Error::Surgery(
                    "fold_kernel only applies to the fractional-first method".into(),
                ));
            }
            match stack.layers[i].stride {
                Stride::Int(s) if s % 2 == 0 => {
                    out.layers[i].stride = Stride::Int(s / 2);
                }
                Stride::Int(s) => {
                    return Err(Error::Surgery(format!(
                        "layer {i} has odd stride {s}; halve-even cannot apply, use fractional-first"
                    )));
                }
                Stride::Frac { .. } => {
                    return Err(Error::Surgery(format!("layer {i} is already fractional")));
                }
            }
        }
        SurgeryMethod::FractionalFirst => {
            if i != 0 {
                return Err(Error::Surgery(format!(
                    "fractional-first targets the first layer, not layer {i}"
                )));
            }
            match stack.layers[0].stride {
                Stride::Int(5) => {
                    out.layers[0].stride = Stride::Frac { num: 5, den: 2 };
                    if plan.fold_kernel {
                        if stack.layers[0].kernel % 2 != 0 {
                            return Err(Error::Surgery(format!(
                                "cannot fold an odd kernel of length {}",
                                stack.layers[0].kernel
                            )));
                        }
                        out.layers[0].kernel = stack.layers[0].kernel / 2;
                    }
                }
                s => {
                    return Err(Error::Surgery(format!(
                        "fractional-first expects first-layer stride 5, found {s:?}"
                    )));
                }
            }
        }
    }
    out.sample_rate = 8000;
    out.validate()?;
    Ok(out)
}

/// Halve a kernel's length by summing adjacent tap pairs.
pub fn fold_kernel<T: Scalar>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = kernel.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("fold_kernel expects rank 3, got {shape:?}")));
    }
    let (cout, cin, k) = (shape[0], shape[1], shape[2]);
    if k % 2 != 0 {
        return Err(Error::Surgery(format!("cannot fold odd kernel length {k}")));
    }
    let m = k / 2;
    let mut out = vec![T::zero(); cout * cin * m];
    for ci in 0..cout * cin {
        for j in 0..m {
            out[ci * m + j] = kernel.data()[ci * k + 2 * j] + kernel.data()[ci * k + 2 * j + 1];
        }
    }
    Tensor::from_vec(vec![cout, cin, m], out)
}
