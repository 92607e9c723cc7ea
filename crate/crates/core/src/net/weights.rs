use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Axis, ConvId, ConvParams, Kernel, Real};

/// Convolutions per integration block: three two-layer branches plus three
/// resolution-transform stages.
const PER_FIB: usize = 9;

/// Position of every convolution in the flat parameter list.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    num_fibs: usize,
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        Layout {
            num_fibs: config.num_fibs,
        }
    }

    pub fn len(&self) -> usize {
        2 + PER_FIB * self.num_fibs
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn down(&self) -> ConvId {
        ConvId(0)
    }

    /// `(reduce, expand)` of the scanner branch along `axis`.
    pub fn lfe(&self, fib: usize, axis: Axis) -> (ConvId, ConvId) {
        let base = 1 + PER_FIB * fib + 2 * axis_slot(axis);
        (ConvId(base), ConvId(base + 1))
    }

    /// Stage `axis` of the resolution transform (channel, then width, then height).
    pub fn drtm(&self, fib: usize, axis: Axis) -> ConvId {
        ConvId(1 + PER_FIB * fib + 6 + axis_slot(axis))
    }

    pub fn up(&self) -> ConvId {
        ConvId(1 + PER_FIB * self.num_fibs)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["down".to_string()];
        for i in 0..self.num_fibs {
            for a in ["c", "w", "h"] {
                names.push(format!("fib{i}.lfe_{a}.reduce"));
                names.push(format!("fib{i}.lfe_{a}.expand"));
            }
            for a in ["c", "w", "h"] {
                names.push(format!("fib{i}.drtm.conv_{a}"));
            }
        }
        names.push("up".to_string());
        names
    }
}

fn axis_slot(axis: Axis) -> usize {
    match axis {
        Axis::Channel => 0,
        Axis::Width => 1,
        Axis::Height => 2,
    }
}

/// `(out, in, kernel)` of every convolution, in layout order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(usize, usize, Kernel)> {
    let c = config.channels;
    let r2 = config.downsample * config.downsample;
    let cc = config.effective_chunk_c();
    let mut shapes = vec![(c, 9 * r2, Kernel::K3)];
    for _ in 0..config.num_fibs {
        for ch in [cc, c, c] {
            let hid = config.hidden(ch);
            shapes.push((hid, ch, Kernel::K1));
            shapes.push((ch, hid, Kernel::K1));
        }
        shapes.push((c, c, Kernel::K1));
        shapes.push((config.drtm_w, config.drtm_w, Kernel::K1));
        shapes.push((config.drtm_h, config.drtm_h, Kernel::K1));
    }
    shapes.push((3 * r2, c, Kernel::K3));
    shapes
}

/// All learned parameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    pub config: ModelConfig,
    pub params: Vec<ConvParams<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(config)
            .into_iter()
            .map(|(o, i, k)| ConvParams::zeros(o, i, k))
            .collect();
        Ok(ModelWeights {
            config: config.clone(),
            params,
        })
    }

    /// Wraps `params` after checking them against `config`.
    pub fn from_params(config: &ModelConfig, params: Vec<ConvParams<T>>) -> Result<Self> {
        let w = ModelWeights {
            config: config.clone(),
            params,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn get(&self, id: ConvId) -> &ConvParams<T> {
        &self.params[id.0]
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(ConvParams::num_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let shapes = param_shapes(&self.config);
        if shapes.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "config needs {} convolutions, weights hold {}",
                shapes.len(),
                self.params.len()
            )));
        }
        let names = self.layout().names();
        for ((p, (o, i, k)), name) in self.params.iter().zip(shapes).zip(&names) {
            if (p.out_ch, p.in_ch, p.kernel) != (o, i, k) {
                return Err(Error::Incompatible(format!(
                    "{name}: expected ({o}, {i}, {k}, {k}), found ({}, {}, {kp}, {kp})",
                    p.out_ch,
                    p.in_ch,
                    k = k.size(),
                    kp = p.kernel.size()
                )));
            }
            if !p.weight.iter().chain(&p.bias).all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.iter().map(ConvParams::cast).collect(),
        }
    }
}

/// Weight gain of the UpSampler at initialization.
///
/// The output is `clamp(up(F_f) ⊙ x2, 0, 1)`; at full He scale `up(F_f)` is
/// several units wide and most pixels sit on the clamp, where no gradient
/// flows. With a unit bias and this gain the untrained network starts as a
/// small perturbation of the mid frame.
pub const UP_GAIN: f64 = 0.01;

/// Bias of the scanner gate convolutions at initialization: `σ(-ln 2) = 1/3`,
/// so the three branch outputs average instead of adding up.
pub const GATE_BIAS: f32 = -std::f32::consts::LN_2;

/// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases, except:
///
/// * the last resolution-transform stage is zero, so `x + a(x) ⊙ x` starts
///   as the identity (`a` scales with `x`, and at He scale the feature
///   magnitude compounds across blocks until it overflows);
/// * scanner gate biases are [`GATE_BIAS`];
/// * the UpSampler weights are scaled by [`UP_GAIN`] and its bias is one.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let mut w = ModelWeights::zeros(config)?;
    let layout = w.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in w.params.iter_mut() {
        let fan_in = p.in_ch * p.kernel.size() * p.kernel.size();
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        p.weight
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..bound));
    }
    for i in 0..config.num_fibs {
        w.params[layout.drtm(i, Axis::Height).0].weight.fill(0.0);
        for axis in Axis::ALL {
            w.params[layout.lfe(i, axis).1 .0].bias.fill(GATE_BIAS);
        }
    }
    let up = &mut w.params[layout.up().0];
    up.weight.iter_mut().for_each(|v| *v *= UP_GAIN as f32);
    up.bias.fill(1.0);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_shapes_and_names() {
        let cfg = ModelConfig::default();
        let w = ModelWeights::<f32>::zeros(&cfg).unwrap();
        let l = w.layout();
        assert_eq!(l.len(), w.params.len());
        assert_eq!(l.names().len(), l.len());
        let names = l.names();
        assert_eq!(names[l.lfe(3, Axis::Width).1 .0], "fib3.lfe_w.expand");
        assert_eq!(names[l.drtm(7, Axis::Height).0], "fib7.drtm.conv_h");
        assert_eq!(names[l.up().0], "up");
        let (r, e) = l.lfe(0, Axis::Channel);
        assert_eq!((w.get(r).out_ch, w.get(r).in_ch), (4, 16));
        assert_eq!((w.get(e).out_ch, w.get(e).in_ch), (16, 4));
        assert_eq!(w.get(l.down()).in_ch, 36);
        assert_eq!(w.get(l.up()).out_ch, 12);
        assert_eq!(w.get(l.drtm(0, Axis::Width)).in_ch, 64);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::micro();
        let a = init_weights(&cfg, 1).unwrap();
        assert_eq!(a, init_weights(&cfg, 1).unwrap());
        assert_ne!(a, init_weights(&cfg, 2).unwrap());
        a.validate().unwrap();
        let l = a.layout();
        assert!(a.get(l.down()).bias.iter().all(|&b| b == 0.0));
        assert!(a.get(l.lfe(0, Axis::Width).0).bias.iter().all(|&b| b == 0.0));
        assert!(a.get(l.lfe(0, Axis::Width).1).bias.iter().all(|&b| b == GATE_BIAS));
        assert!(a.get(l.drtm(0, Axis::Height)).weight.iter().all(|&v| v == 0.0));
        assert!(a.get(l.drtm(0, Axis::Channel)).weight.iter().any(|&v| v != 0.0));
        assert!(a.get(l.up()).bias.iter().all(|&b| b == 1.0));
    }

    #[test]
    fn init_variance_is_two_over_fan_in() {
        // The default down conv has 48·36·9 ≈ 15.5k weights; a 1000-sample
        // prefix is enough for a 20% tolerance.
        let w = init_weights(&ModelConfig::default(), 9).unwrap();
        let p = w.get(w.layout().down());
        let fan_in = (p.in_ch * 9) as f64;
        let sample = &p.weight[..1000];
        let mean = sample.iter().map(|&v| v as f64).sum::<f64>() / 1000.0;
        let var = sample.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 999.0;
        let target = 2.0 / fan_in;
        assert!((var - target).abs() / target < 0.2, "var {var} vs {target}");
    }

    #[test]
    fn weight_count_is_a_function_of_config() {
        let cfg = ModelConfig::tiny();
        let a = init_weights(&cfg, 3).unwrap().num_params();
        let b = ModelWeights::<f64>::zeros(&cfg).unwrap().num_params();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let cfg = ModelConfig::micro();
        let mut w = ModelWeights::<f32>::zeros(&cfg).unwrap();
        w.params.pop();
        assert!(matches!(w.validate(), Err(Error::Incompatible(_))));
        let mut w = ModelWeights::<f32>::zeros(&cfg).unwrap();
        w.params[2].bias[0] = f32::INFINITY;
        assert!(w.validate().is_err());
    }
}
