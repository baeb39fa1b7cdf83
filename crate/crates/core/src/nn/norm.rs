//! Per-channel normalisation, activations and dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::params::{Binder, Init};
use super::{sigmoid, Frame, Layer};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Inference-mode batch norm folded to `x * scale + shift` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl BatchNorm {
    pub fn new(b: &mut Binder, name: &str, channels: usize, bins: usize) -> Result<Self> {
        let gamma = b.take(&format!("{name}.weight"), &[channels], Init::Const(1.0));
        let beta = b.take(&format!("{name}.bias"), &[channels], Init::Const(0.0));
        let mean = b.take(&format!("{name}.running_mean"), &[channels], Init::Const(0.0));
        let var = b.take(&format!("{name}.running_var"), &[channels], Init::Const(1.0));
        b.layer(
            name,
            "BatchNorm",
            json!({ "eps": BN_EPS }),
            (bins, channels),
            (bins, channels),
        );
        Self::from_stats(&gamma, &beta, &mean, &var)
    }

    pub fn from_stats(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32]) -> Result<Self> {
        let n = gamma.len();
        if beta.len() != n || mean.len() != n || var.len() != n {
            return Err(Error::Contract("batch norm statistics differ in length".into()));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Contract("batch norm variance is negative".into()));
        }
        let mut scale = Vec::with_capacity(n);
        let mut shift = Vec::with_capacity(n);
        for c in 0..n {
            let s = gamma[c] as f64 / (var[c] as f64 + BN_EPS).sqrt();
            scale.push(s as f32);
            shift.push((beta[c] as f64 - mean[c] as f64 * s) as f32);
        }
        Ok(Self { scale, shift })
    }

    pub fn apply(&self, x: &mut Frame) -> Result<()> {
        check_channels(x, self.scale.len(), "batch norm")?;
        for v in x.data.chunks_exact_mut(x.channels) {
            for ((v, s), t) in v.iter_mut().zip(&self.scale).zip(&self.shift) {
                *v = *v * s + t;
            }
        }
        Ok(())
    }
}

fn check_channels(x: &Frame, channels: usize, what: &str) -> Result<()> {
    if x.channels != channels {
        return Err(Error::Contract(format!(
            "{what}: expected {channels} channels, got {}",
            x.channels
        )));
    }
    Ok(())
}

impl Layer for BatchNorm {
    type State = ();

    fn init_state(&self) {}

    fn step(&self, _: &mut (), x: &Frame) -> Result<Frame> {
        let mut y = x.clone();
        self.apply(&mut y)?;
        Ok(y)
    }
}

/// PReLU with one learned slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    slope: Vec<f32>,
}

impl PRelu {
    pub const DEFAULT_SLOPE: f32 = 0.25;

    pub fn new(b: &mut Binder, name: &str, channels: usize, bins: usize) -> Self {
        let slope = b.take(&format!("{name}.weight"), &[channels], Init::Const(Self::DEFAULT_SLOPE));
        b.layer(name, "PReLU", json!({}), (bins, channels), (bins, channels));
        Self { slope }
    }

    pub fn from_slopes(slope: Vec<f32>) -> Self {
        Self { slope }
    }

    pub fn apply(&self, x: &mut Frame) -> Result<()> {
        check_channels(x, self.slope.len(), "prelu")?;
        for v in x.data.chunks_exact_mut(x.channels) {
            for (v, a) in v.iter_mut().zip(&self.slope) {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
        Ok(())
    }
}

impl Layer for PRelu {
    type State = ();

    fn init_state(&self) {}

    fn step(&self, _: &mut (), x: &Frame) -> Result<Frame> {
        let mut y = x.clone();
        self.apply(&mut y)?;
        Ok(y)
    }
}

/// ELU with alpha = 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct Elu;

impl Elu {
    #[inline]
    pub fn f(x: f32) -> f32 {
        if x > 0.0 {
            x
        } else {
            x.exp_m1()
        }
    }

    pub fn apply(x: &mut Frame) {
        for v in x.data.iter_mut() {
            *v = Self::f(*v);
        }
    }
}

impl Layer for Elu {
    type State = ();

    fn init_state(&self) {}

    fn step(&self, _: &mut (), x: &Frame) -> Result<Frame> {
        let mut y = x.clone();
        Self::apply(&mut y);
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sigmoid;

impl Layer for Sigmoid {
    type State = ();

    fn init_state(&self) {}

    fn step(&self, _: &mut (), x: &Frame) -> Result<Frame> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Tanh;

impl Layer for Tanh {
    type State = ();

    fn init_state(&self) {}

    fn step(&self, _: &mut (), x: &Frame) -> Result<Frame> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.tanh());
        Ok(y)
    }
}

/// Dropout: identity at inference; in training mode each value is kept
/// with probability `1 - rate` and scaled by `1 / (1 - rate)`, drawing from
/// a seeded generator held in the stream state.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f32,
    pub training: Option<u64>,
}

impl Dropout {
    pub fn inference(rate: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, training: None })
    }

    pub fn training(rate: f32, seed: u64) -> Result<Self> {
        Ok(Self {
            training: Some(seed),
            ..Self::inference(rate)?
        })
    }
}

impl Layer for Dropout {
    type State = Option<ChaCha8Rng>;

    fn init_state(&self) -> Self::State {
        self.training.map(ChaCha8Rng::seed_from_u64)
    }

    fn step(&self, state: &mut Self::State, x: &Frame) -> Result<Frame> {
        let mut y = x.clone();
        if let Some(rng) = state {
            let keep = 1.0 - self.rate;
            for v in y.data.iter_mut() {
                *v = if rng.random::<f32>() < keep { *v / keep } else { 0.0 };
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::run;

    #[test]
    fn unit_batch_norm_is_identity_up_to_eps() {
        let bn = BatchNorm::from_stats(&[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2]).unwrap();
        let x = Frame::new(2, 2, vec![1.0, -3.0, 0.5, 100.0]).unwrap();
        let y = bn.step(&mut (), &x).unwrap();
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() <= 1e-5 * a.abs());
        }
    }

    #[test]
    fn batch_norm_uses_running_stats() {
        let bn = BatchNorm::from_stats(&[2.0], &[1.0], &[3.0], &[4.0]).unwrap();
        let y = bn.step(&mut (), &Frame::vector(vec![5.0])).unwrap();
        let expect = 2.0 * (5.0 - 3.0) / (4.0f64 + BN_EPS).sqrt() + 1.0;
        assert!((y.data[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn activation_examples() {
        let p = PRelu::from_slopes(vec![0.25]);
        assert_eq!(p.step(&mut (), &Frame::vector(vec![-2.0])).unwrap().data, vec![-0.5]);
        assert_eq!(p.step(&mut (), &Frame::vector(vec![3.0])).unwrap().data, vec![3.0]);
        let e = Elu.step(&mut (), &Frame::vector(vec![-1.0, 2.0])).unwrap();
        assert!((e.data[0] - (-0.632_120_56)).abs() < 1e-6);
        assert_eq!(e.data[1], 2.0);
        assert_eq!(
            Sigmoid.step(&mut (), &Frame::vector(vec![0.0])).unwrap().data,
            vec![0.5]
        );
    }

    #[test]
    fn dropout_modes() {
        let x: Vec<Frame> = (0..50).map(|_| Frame::vector(vec![1.0; 100])).collect();
        let inf = Dropout::inference(0.25).unwrap();
        assert_eq!(run(&inf, &x).unwrap(), x);

        let tr = Dropout::training(0.25, 9).unwrap();
        let a = run(&tr, &x).unwrap();
        assert_eq!(a, run(&tr, &x).unwrap());
        let vals: Vec<f32> = a.iter().flat_map(|f| f.data.iter().copied()).collect();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-6));
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
        assert!((kept - 0.75).abs() < 0.03, "{kept}");
        assert!(Dropout::inference(1.0).is_err());
    }
}
