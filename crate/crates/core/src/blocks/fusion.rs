use super::params::{Conv2d, ForwardCtx, Init, ParamBuilder};
use super::residual::ResidualStack;
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Multi-level aggregation: three taps are channel-reduced by 1×1 convs,
/// resampled to the middle tap's resolution, summed and smoothed by two
/// residual blocks.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub reducers: Vec<Conv2d>,
    pub smooth: ResidualStack,
    pub width: usize,
}

impl Fusion {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, tap_channels: [usize; 3], width: usize, init: Init) -> Self {
        Fusion {
            reducers: tap_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| pb.conv(&format!("{name}.reduce{i}"), c, width, 1, 1, 0, true, init))
                .collect(),
            smooth: ResidualStack::build(pb, &format!("{name}.smooth"), width, 2, init),
            width,
        }
    }

    /// Sum of the reduced, resampled taps before the residual stack.
    pub fn aggregate<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, taps: &[Var]) -> Result<Var> {
        if taps.len() != 3 {
            return Err(Error::Config(format!("fusion expects exactly 3 taps, got {}", taps.len())));
        }
        let target = ctx.graph.value(taps[1]).dims4()?;
        let (th, tw) = (target[2], target[3]);
        let mut acc: Option<Var> = None;
        for (conv, &tap) in self.reducers.iter().zip(taps) {
            let [_, _, h, w] = ctx.graph.value(tap).dims4()?;
            // A 1×1 conv commutes with bilinear resampling (rows of the resize
            // operator sum to one), so shrink before convolving and enlarge after.
            let r = if (h, w) == (th, tw) {
                conv.forward(ctx, tap)?
            } else if h * w > th * tw {
                let small = ctx.graph.resize_bilinear(tap, th, tw)?;
                conv.forward(ctx, small)?
            } else {
                let r = conv.forward(ctx, tap)?;
                ctx.graph.resize_bilinear(r, th, tw)?
            };
            acc = Some(match acc {
                Some(a) => ctx.graph.add(a, r)?,
                None => r,
            });
        }
        Ok(acc.expect("three taps"))
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, taps: &[Var]) -> Result<Var> {
        let sum = self.aggregate(ctx, taps)?;
        self.smooth.forward(ctx, sum)
    }
}
