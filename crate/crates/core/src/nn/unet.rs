//! Residual U-block used inside each encoder level.
//!
//! ```text
//! x0 = act(bn(conv_in(h)))                       same width
//! dk = act(bn(down_k(d{k-1}))), d0 = x0          stride 2, k = 1..depth
//! v  = act(bn(bottom(d_depth)))
//! v  = up_k(v + dk), k = depth..1                act(bn(.)) except k = 1
//! out = h + v
//! ```
//!
//! Channel count is preserved throughout, and the final up-projection is
//! linear so the residual branch can take either sign.

use std::collections::VecDeque;

use serde_json::json;

use super::conv::{Conv2d, ConvSpec, TrConv2d};
use super::norm::{BatchNorm, PRelu};
use super::params::Binder;
use super::{expect_shape, Frame, Layer};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Stage<C> {
    conv: C,
    post: Option<(BatchNorm, PRelu)>,
}

impl<C: Layer<State = VecDeque<Frame>>> Stage<C> {
    fn step(&self, st: &mut VecDeque<Frame>, x: &Frame) -> Result<Frame> {
        let mut y = self.conv.step(st, x)?;
        if let Some((bn, act)) = &self.post {
            bn.apply(&mut y)?;
            act.apply(&mut y)?;
        }
        Ok(y)
    }
}

fn norm_act(b: &mut Binder, name: &str, channels: usize, bins: usize) -> Result<(BatchNorm, PRelu)> {
    Ok((
        BatchNorm::new(b, &format!("{name}.bn"), channels, bins)?,
        PRelu::new(b, &format!("{name}.act"), channels, bins),
    ))
}

#[derive(Debug, Clone)]
pub struct UNetBlock {
    bins: usize,
    channels: usize,
    conv_in: Stage<Conv2d>,
    downs: Vec<Stage<Conv2d>>,
    bottom: Stage<Conv2d>,
    /// `ups[k]` maps level `k + 1` back to level `k`.
    ups: Vec<Stage<TrConv2d>>,
}

/// Frequency sizes `[F0, F1, .., F_depth]` of a U-block on `bins` bins.
pub fn unet_levels(bins: usize, depth: usize) -> Result<Vec<usize>> {
    let spec = ConvSpec::standard(1, 1);
    let mut levels = vec![bins];
    for _ in 0..depth {
        let f = spec.conv_out_bins(*levels.last().unwrap_or(&bins))?;
        levels.push(f);
    }
    if levels.iter().any(|&f| f < 2) {
        return Err(Error::Config(format!(
            "U-block depth {depth} on {bins} bins leaves a level narrower than 2 bins ({levels:?})"
        )));
    }
    Ok(levels)
}

impl UNetBlock {
    pub fn new(b: &mut Binder, name: &str, bins: usize, channels: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("U-block depth must be at least 1".into()));
        }
        let levels = unet_levels(bins, depth)?;
        let c = channels;
        let conv_in = Stage {
            conv: Conv2d::new(b, &format!("{name}.conv_in"), ConvSpec::same(c, c), bins)?,
            post: Some(norm_act(b, &format!("{name}.conv_in"), c, bins)?),
        };
        let mut downs = Vec::with_capacity(depth);
        for k in 1..=depth {
            let n = format!("{name}.down{k}");
            downs.push(Stage {
                conv: Conv2d::new(b, &format!("{n}.conv"), ConvSpec::standard(c, c), levels[k - 1])?,
                post: Some(norm_act(b, &n, c, levels[k])?),
            });
        }
        let fb = levels[depth];
        let bottom = Stage {
            conv: Conv2d::new(b, &format!("{name}.bottom.conv"), ConvSpec::same(c, c), fb)?,
            post: Some(norm_act(b, &format!("{name}.bottom"), c, fb)?),
        };
        let mut ups = Vec::with_capacity(depth);
        for k in 1..=depth {
            let n = format!("{name}.up{k}");
            let conv = TrConv2d::new(
                b,
                &format!("{n}.conv"),
                ConvSpec::standard(c, c),
                levels[k],
                levels[k - 1],
            )?;
            let post = if k > 1 {
                Some(norm_act(b, &n, c, levels[k - 1])?)
            } else {
                None
            };
            ups.push(Stage { conv, post });
        }
        b.layer(
            name,
            "UNetBlock",
            json!({ "depth": depth, "levels": levels }),
            (bins, c),
            (bins, c),
        );
        Ok(Self {
            bins,
            channels,
            conv_in,
            downs,
            bottom,
            ups,
        })
    }
}

impl Layer for UNetBlock {
    /// Convolution histories: conv_in, downs, bottom, ups.
    type State = Vec<VecDeque<Frame>>;

    fn init_state(&self) -> Self::State {
        let mut st = vec![self.conv_in.conv.init_state()];
        st.extend(self.downs.iter().map(|s| s.conv.init_state()));
        st.push(self.bottom.conv.init_state());
        st.extend(self.ups.iter().map(|s| s.conv.init_state()));
        st
    }

    fn step(&self, st: &mut Self::State, h: &Frame) -> Result<Frame> {
        expect_shape(h, self.bins, self.channels, "unet block")?;
        let depth = self.downs.len();
        let (st_in, rest) = st.split_first_mut().expect("state layout");
        let (st_down, rest) = rest.split_at_mut(depth);
        let (st_bottom, st_up) = rest.split_first_mut().expect("state layout");

        let mut skips = Vec::with_capacity(depth);
        let mut v = self.conv_in.step(st_in, h)?;
        for (stage, s) in self.downs.iter().zip(st_down.iter_mut()) {
            v = stage.step(s, &v)?;
            skips.push(v.clone());
        }
        v = self.bottom.step(st_bottom, &v)?;
        for k in (0..depth).rev() {
            v.add_assign(&skips[k])?;
            v = self.ups[k].step(&mut st_up[k], &v)?;
        }
        v.add_assign(h)?;
        Ok(v)
    }
}
